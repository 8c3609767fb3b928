"""Loss tests: arithmetic identities at the stated optima, term counts,
shift/temperature behavior, invariant enforcement, and grad checks."""

import numpy as np
import pytest

from melab import autodiff as ad
from melab import losses as ls


def emb(score, d=4):
    """Audio embedding whose similarity against `unit_cells` is exactly `score`."""
    v = np.zeros(d)
    v[0] = score
    return ad.tensor(v)


def unit_cells(d=4, n=1):
    cells = np.zeros((n, d))
    cells[:, 0] = 1.0
    return ad.tensor(cells)


def make_batch(s_anchor, s_neg, s_pos=None, n_pos=0, n_neg=1):
    """Batch with exact similarity scores: roles use orthogonal audio axes
    (anchor=e1, negatives=e2, positives=e3) so each image cell can pin every
    pairing's score independently."""
    s_pos = s_anchor if s_pos is None else s_pos
    e = np.eye(3)
    return ls.ContrastiveBatch(
        anchor_audio=ad.tensor(e[0]),
        anchor_image=ad.tensor([[s_anchor, s_neg, s_pos]]),
        pos_audio=[ad.tensor(e[2]) for _ in range(n_pos)],
        pos_images=[ad.tensor([[s_pos, 0.0, 0.0]]) for _ in range(n_pos)],
        neg_audio=[ad.tensor(e[1]) for _ in range(n_neg)],
        neg_images=[ad.tensor([[s_neg, 0.0, 0.0]]) for _ in range(n_neg)],
    )


class TestMattnetLoss:
    def test_zero_at_targets(self):
        b = ls.ContrastiveBatch(
            anchor_audio=emb(100.0), anchor_image=unit_cells(),
            pos_audio=[emb(100.0)], pos_images=[unit_cells()],
            neg_audio=[emb(0.0)], neg_images=[ad.tensor(np.zeros((1, 4)))],
        )
        assert ls.mattnet_loss(b).item() == 0.0

    def test_direct_arithmetic_no_positives(self):
        # S(a,v)=90, negatives at 10 -> (-10)^2 + 10^2 + 10^2 = 300
        b = make_batch(s_anchor=90.0, s_neg=10.0, n_pos=0, n_neg=1)
        assert ls.mattnet_loss(b).item() == pytest.approx(300.0, abs=1e-9)

    def test_direct_arithmetic_all_zero(self):
        # all S=0, one positive and one negative per side -> 3 * 100^2
        b = make_batch(s_anchor=0.0, s_neg=0.0, s_pos=0.0, n_pos=1, n_neg=1)
        assert ls.mattnet_loss(b).item() == pytest.approx(30000.0, abs=1e-9)

    def test_term_count_at_paper_defaults(self):
        b = make_batch(s_anchor=50.0, s_neg=5.0, n_pos=5, n_neg=11)
        assert len(ls.mattnet_loss_terms(b)) == 33

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b = make_batch(rng.uniform(-50, 150), rng.uniform(-50, 150),
                           rng.uniform(-50, 150), n_pos=2, n_neg=3)
            assert ls.mattnet_loss(b).item() >= 0.0


class TestHingeLoss:
    def test_margin_satisfied(self):
        b = make_batch(s_anchor=5.0, s_neg=3.0, n_neg=1)
        assert ls.hinge_loss(b, margin=1.0, temperature=1.0).item() == 0.0

    def test_equal_scores(self):
        b = make_batch(s_anchor=0.5, s_neg=0.5, n_neg=1)
        assert ls.hinge_loss(b, margin=1.0, temperature=1.0).item() == pytest.approx(2.0, abs=1e-12)

    def test_violated_margins(self):
        b = make_batch(s_anchor=0.0, s_neg=2.0, n_neg=1)
        assert ls.hinge_loss(b, margin=1.0, temperature=1.0).item() == pytest.approx(6.0, abs=1e-12)

    def test_temperature_rescales_scores(self):
        raw = make_batch(s_anchor=500.0, s_neg=300.0, n_neg=1)
        assert ls.hinge_loss(raw, margin=1.0, temperature=100.0).item() == \
            pytest.approx(ls.hinge_loss(make_batch(5.0, 3.0), margin=1.0, temperature=1.0).item())

    def test_nonpositive_margin_rejected(self):
        with pytest.raises(ValueError):
            ls.hinge_loss(make_batch(1.0, 0.0), margin=0.0)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            b = make_batch(rng.normal(), rng.normal(), n_neg=2)
            assert ls.hinge_loss(b, temperature=1.0).item() >= 0.0


class TestInfoNCELoss:
    def test_equal_scores_one_negative(self):
        b = make_batch(s_anchor=1.0, s_neg=1.0, n_neg=1)
        expected = 2.0 * np.log(2.0)
        assert ls.infonce_loss(b, temperature=1.0).item() == pytest.approx(expected, abs=1e-9)

    def test_equal_scores_three_negatives(self):
        b = make_batch(s_anchor=1.0, s_neg=1.0, n_neg=3)
        expected = 2.0 * np.log(4.0)
        assert ls.infonce_loss(b, temperature=1.0).item() == pytest.approx(expected, abs=1e-9)

    def test_limit_when_positive_dominates(self):
        b = make_batch(s_anchor=25.0, s_neg=5.0, n_neg=2)
        assert ls.infonce_loss(b, temperature=1.0).item() < 1e-6

    def test_shift_invariance(self):
        # adding a constant to every score in a direction leaves the loss unchanged
        base = make_batch(s_anchor=2.0, s_neg=1.0, n_neg=3)
        shifted = make_batch(s_anchor=2.0 + 7.5, s_neg=1.0 + 7.5, n_neg=3)
        a = ls.infonce_loss(base, temperature=1.0).item()
        c = ls.infonce_loss(shifted, temperature=1.0).item()
        assert a == pytest.approx(c, abs=1e-9)

    def test_stable_at_large_scores(self):
        b = make_batch(s_anchor=5000.0, s_neg=4000.0, n_neg=2)
        val = ls.infonce_loss(b, temperature=1.0).item()
        assert np.isfinite(val)


class TestBatchInvariants:
    def _embeds(self):
        return dict(anchor_audio=emb(1.0), anchor_image=unit_cells(),
                    pos_audio=[emb(1.0)], pos_images=[unit_cells()],
                    neg_audio=[emb(0.0)], neg_images=[unit_cells()])

    def test_positive_wrong_class_rejected(self):
        b = ls.ContrastiveBatch(**self._embeds(), anchor_class="cat",
                                pos_audio_classes=["dog"], pos_image_classes=["cat"],
                                neg_audio_classes=["dog"], neg_image_classes=["dog"])
        with pytest.raises(ls.BatchInvariantError):
            ls.mattnet_loss(b)

    def test_novel_negative_rejected(self):
        b = ls.ContrastiveBatch(**self._embeds(), anchor_class="cat",
                                pos_audio_classes=["cat"], pos_image_classes=["cat"],
                                neg_audio_classes=["piano"], neg_image_classes=["piano"],
                                novel_classes=frozenset({"piano"}))
        with pytest.raises(ls.BatchInvariantError):
            ls.mattnet_loss(b)

    def test_no_negatives_rejected(self):
        e = self._embeds()
        e["neg_audio"] = []
        e["neg_images"] = []
        with pytest.raises(ls.BatchInvariantError):
            ls.mattnet_loss(ls.ContrastiveBatch(**e))

    def test_valid_batch_passes(self):
        b = ls.ContrastiveBatch(**self._embeds(), anchor_class="cat",
                                pos_audio_classes=["cat"], pos_image_classes=["cat"],
                                neg_audio_classes=["dog"], neg_image_classes=["dog"],
                                novel_classes=frozenset({"piano"}))
        b.validate()


class TestLossGradients:
    @pytest.mark.parametrize("kind", ls.LOSS_KINDS)
    def test_grad_check_on_random_embeddings(self, kind):
        rng = np.random.default_rng(3)
        d = 4
        params = {
            "aa": ad.parameter(rng.normal(size=d)),
            "ai": ad.parameter(rng.normal(size=(3, d))),
            "pa": ad.parameter(rng.normal(size=d)),
            "pi": ad.parameter(rng.normal(size=(3, d))),
            "na": ad.parameter(rng.normal(size=d)),
            "ni": ad.parameter(rng.normal(size=(3, d))),
        }

        def fn():
            b = ls.ContrastiveBatch(
                anchor_audio=params["aa"], anchor_image=params["ai"],
                pos_audio=[params["pa"]], pos_images=[params["pi"]],
                neg_audio=[params["na"]], neg_images=[params["ni"]],
            )
            return ls.compute_loss(kind, b, temperature=1.0)

        err = ad.grad_check(fn, list(params.values()), h=1e-5)
        assert err < 1e-5

    def test_selector_rejects_unknown(self):
        with pytest.raises(ValueError):
            ls.compute_loss("triplet", make_batch(1.0, 0.0))
