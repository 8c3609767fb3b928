"""Episode battery tests: sampling structure and invariants, matched
episodes across kinds, agents, order invariance, epoch curves."""

import dataclasses

import numpy as np
import pytest

from melab import evaluation as ev
from melab import model as md
from melab.stats import binomial_ci
from melab.training import FeatureStore

SMALL_MODEL = md.ModelConfig(image_size=32)


class TestSampling:
    def test_trial_slot_count(self, small_dataset):
        _, manifest = small_dataset
        eps = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL, 50, seed=0)
        assert len(eps) == 50 * len(manifest.novel_classes)

    def test_validator_sweep_all_kinds(self, small_dataset):
        _, manifest = small_dataset
        for kind in ev.ALL_KINDS:
            for ep in ev.sample_episodes(manifest, kind, 40, seed=1):
                assert ev.validate_episode(ep, manifest) == [], (kind, ep)

    def test_familiar_familiar_pattern(self, small_dataset):
        _, manifest = small_dataset
        fam = set(manifest.familiar_classes)
        for ep in ev.sample_episodes(manifest, ev.TestKind.FAMILIAR_FAMILIAR, 20, seed=2):
            assert ep.query_class in fam
            assert ep.target.class_name == ep.query_class
            assert ep.other.class_name in fam
            assert ep.other.class_name != ep.query_class

    def test_same_bucket_constraint(self, small_dataset):
        _, manifest = small_dataset
        for kind in ev.ALL_KINDS:
            for ep in ev.sample_episodes(manifest, kind, 30, seed=3):
                assert manifest.images[ep.image_a.id].bucket == ep.bucket
                assert manifest.images[ep.image_b.id].bucket == ep.bucket

    def test_me_and_familiarq_share_image_pairs(self, small_dataset):
        _, manifest = small_dataset
        me = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL, 25, seed=4)
        fq = ev.sample_episodes(manifest, ev.TestKind.FAMILIARQ_NOVEL, 25, seed=4)
        assert len(me) == len(fq)
        for a, b in zip(me, fq):
            assert {a.image_a.id, a.image_b.id} == {b.image_a.id, b.image_b.id}
            # roles flip: the familiar image becomes the target
            assert a.other.id == b.target.id
            assert b.query_class == a.other.class_name

    def test_mismatched_keeps_familiar_image_swaps_novel(self, small_dataset):
        _, manifest = small_dataset
        me = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL, 25, seed=5)
        mm = ev.sample_episodes(manifest, ev.TestKind.ME_MISMATCHED, 25, seed=5)
        for a, b in zip(me, mm):
            assert a.other.id == b.other.id  # same familiar image
            assert b.query_class == a.query_class
            assert b.target.class_name != b.query_class
            assert b.target.class_name in manifest.novel_classes

    def test_deterministic_given_seed(self, small_dataset):
        _, manifest = small_dataset
        a = ev.sample_episodes(manifest, ev.TestKind.NOVEL_NOVEL, 10, seed=6)
        b = ev.sample_episodes(manifest, ev.TestKind.NOVEL_NOVEL, 10, seed=6)
        assert a == b

    def test_single_query_variant(self, small_dataset):
        _, manifest = small_dataset
        eps = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL, 30, seed=7,
                                 queries_per_episode=1)
        assert len(eps) == 30
        assert len({e.episode_index for e in eps}) == 30

    def test_infeasible_kind_rejected(self, small_dataset, tmp_path):
        from melab import datagen as dg
        cfg = dg.DatasetConfig(n_familiar=2, n_novel=2, train_pairs_per_class=2,
                               dev_per_class=1, test_audio_per_class=2,
                               test_images_per_class=2, image_size=32, seed=5)
        manifest = dg.build_dataset(cfg, tmp_path / "ds2")
        # drop one novel class's images to make novel-novel infeasible
        manifest.images = {k: v for k, v in manifest.images.items()
                           if not (v.class_name == manifest.novel_classes[1]
                                   and v.split == "test")}
        with pytest.raises(ev.EvaluationError):
            ev.sample_episodes(manifest, ev.TestKind.NOVEL_NOVEL, 5, seed=0)


class TestAgentsAndRunTest:
    def test_random_agent_within_99_ci_of_half(self, small_dataset):
        _, manifest = small_dataset
        for kind in ev.ALL_KINDS:
            eps = ev.sample_episodes(manifest, kind, 500, seed=8)
            acc, records = ev.run_test(ev.RandomAgent(seed=123), eps)
            lo, hi = binomial_ci(len(records) // 2, len(records), 0.99)
            assert lo <= acc <= hi, (kind, acc)

    def test_oracle_and_anti_oracle(self, small_dataset):
        _, manifest = small_dataset
        eps = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL, 50, seed=9)
        assert ev.run_test(ev.OracleAgent(), eps)[0] == 1.0
        assert ev.run_test(ev.AntiOracleAgent(), eps)[0] == 0.0

    def test_records_consistent(self, small_dataset):
        _, manifest = small_dataset
        eps = ev.sample_episodes(manifest, ev.TestKind.FAMILIAR_FAMILIAR, 30, seed=10)
        _, records = ev.run_test(ev.RandomAgent(seed=5), eps)
        for r in records:
            expected = r.target_image_id if r.s_target > r.s_other else r.other_image_id
            if not r.tie:
                assert r.chosen_image_id == expected
                assert r.correct == (r.chosen_image_id == r.target_image_id)
            else:
                assert not r.correct

    def test_order_invariance(self, small_dataset):
        _, manifest = small_dataset
        eps = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL, 40, seed=11)
        agent = ev.RandomAgent(seed=7)
        _, rec1 = ev.run_test(agent, eps)
        flipped = [dataclasses.replace(e, image_a=e.image_b, image_b=e.image_a)
                   for e in eps]
        _, rec2 = ev.run_test(agent, flipped)
        for r1, r2 in zip(rec1, rec2):
            assert r1.chosen_image_id == r2.chosen_image_id

    def test_tie_counts_incorrect(self, small_dataset):
        _, manifest = small_dataset

        class ConstantAgent:
            epoch = -1

            def score_episode(self, ep):
                return 1.0, 1.0

        eps = ev.sample_episodes(manifest, ev.TestKind.FAMILIAR_FAMILIAR, 10, seed=12)
        acc, records = ev.run_test(ConstantAgent(), eps)
        assert acc == 0.0
        assert all(r.tie for r in records)


class TestCheckpointScorer:
    def test_matches_direct_similarity(self, small_dataset):
        ds_dir, manifest = small_dataset
        params = md.init_params(md.InitStrategy(), 3, SMALL_MODEL)
        feats = FeatureStore(manifest, ds_dir)
        feats.load_split("test")
        eps = ev.sample_episodes(manifest, ev.TestKind.FAMILIAR_FAMILIAR, 3, seed=13)
        scorer = ev.CheckpointScorer(params, feats)
        acc, records = ev.run_test(scorer, eps)
        from melab import autodiff as ad
        for r in records[:5]:
            a = md.encode_audio(feats.mel(r.query_audio_id), params)
            v = md.encode_image(feats.image(r.target_image_id), params)
            s, _ = md.similarity(a, v)
            assert r.s_target == pytest.approx(s.item(), abs=1e-9)


class TestBatteryAndCurve:
    def test_perfect_me_agent_battery(self, small_dataset):
        _, manifest = small_dataset
        agent = ev.PerfectMEAgent(manifest, seed=3)
        rows, _ = ev.full_battery(agent, manifest, n_episodes=200, seed=14)
        by_kind = {r.kind: r for r in rows}
        assert by_kind["familiar-familiar"].accuracy == 1.0
        assert by_kind["familiarq-novel"].accuracy == 1.0
        assert by_kind["me-familiar-novel"].accuracy == 1.0
        assert by_kind["me-mismatched"].accuracy == 1.0
        nn = by_kind["novel-novel"]
        lo, hi = binomial_ci(nn.n_trials // 2, nn.n_trials, 0.99)
        assert lo <= nn.accuracy <= hi

    def test_battery_deterministic(self, small_dataset):
        _, manifest = small_dataset
        agent = ev.RandomAgent(seed=1)
        r1, rec1 = ev.full_battery(agent, manifest, n_episodes=50, seed=15)
        r2, rec2 = ev.full_battery(agent, manifest, n_episodes=50, seed=15)
        assert r1 == r2
        assert rec1 == rec2

    def test_epoch_curve_degenerate_and_flat(self, small_dataset):
        ds_dir, manifest = small_dataset
        params = md.init_params(md.InitStrategy(), 5, SMALL_MODEL)
        feats = FeatureStore(manifest, ds_dir)
        ck = md.Checkpoint(params=params, adam=None, epoch=1, config_fingerprint="x")
        kinds = (ev.TestKind.FAMILIAR_FAMILIAR,)
        rows1 = ev.epoch_curve([ck], feats, manifest, kinds, n_episodes=5, seed=16)
        assert len(rows1) == 1
        eps = ev.sample_episodes(manifest, kinds[0], 5, seed=16)
        scorer = ev.CheckpointScorer(params, feats)
        acc, _ = ev.run_test(scorer, eps)
        assert rows1[0]["accuracy"] == acc

        ck2 = md.Checkpoint(params=params, adam=None, epoch=2, config_fingerprint="x")
        rows = ev.epoch_curve([ck, ck2, ck2], feats, manifest, kinds, n_episodes=5, seed=16)
        accs = [r["accuracy"] for r in rows]
        assert accs.count(accs[0]) == len(accs)

    def test_smoothing_window_one_is_identity(self, small_dataset):
        ds_dir, manifest = small_dataset
        feats = FeatureStore(manifest, ds_dir)
        cks = [md.Checkpoint(params=md.init_params(md.InitStrategy(), s, SMALL_MODEL),
                             adam=None, epoch=s, config_fingerprint="x") for s in range(3)]
        kinds = (ev.TestKind.NOVEL_NOVEL,)
        rows = ev.epoch_curve(cks, feats, manifest, kinds, n_episodes=4, seed=17,
                              smoothing_window=1)
        for r in rows:
            assert r["smoothed"] == r["accuracy"]


class TestOutputs:
    def test_trial_csv_roundtrip(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        eps = ev.sample_episodes(manifest, ev.TestKind.NOVEL_NOVEL, 5, seed=18)
        _, records = ev.run_test(ev.RandomAgent(seed=2), eps)
        path = tmp_path / "trials.csv"
        ev.write_trial_records(path, records, meta={"config_hash": "h", "seed": 18})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# config_hash=h")
        assert lines[1] == ",".join(ev.TRIAL_CSV_HEADER)
        assert len(lines) == 2 + len(records)
