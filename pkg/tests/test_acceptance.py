"""Acceptance gate: every criterion at its stated tolerance, one printed
pass/fail line each (run with -s to watch them stream).

Criteria 5-8 and 10 share one heavyweight session fixture that trains five
default-config models (dataset seed = run seed) plus hinge and InfoNCE
variants; expect roughly 60-90 minutes on one CPU core for the full module.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from melab import analysis as an
from melab import autodiff as ad
from melab import cli
from melab import datagen as dg
from melab import evaluation as ev
from melab import io as mio
from melab import losses as ls
from melab import model as md
from melab import stats as st
from melab import training as tr
from melab.features import MelSpectrogram, pad_or_truncate

EPISODE_SEED = 1234
BATTERY_EPISODES = 100


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# Criterion 1: gradient correctness (< 2 min CPU)
# ---------------------------------------------------------------------------

def _primitive_cases(rng):
    r = rng

    def p(*shape):
        return ad.parameter(r.normal(size=shape))

    return {
        "add": (lambda a, b: a + b, [p(3, 4), p(4)]),
        "sub": (lambda a, b: a - b, [p(2, 3), p(2, 3)]),
        "neg": (lambda a: -a, [p(5)]),
        "mul": (lambda a, b: a * b, [p(2, 3, 2), p(3, 1)]),
        "div": (lambda a, b: a / b, [p(4), ad.parameter(r.uniform(0.5, 2.0, size=4))]),
        "matmul": (ad.matmul, [p(3, 5), p(5, 2)]),
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding="same"),
                   [p(1, 2, 6, 6), p(3, 2, 3, 3), p(3)]),
        "maxpool2d": (lambda x: ad.maxpool2d(x, 2), [p(1, 2, 4, 4)]),
        "relu": (ad.relu, [ad.parameter(r.normal(size=(4, 3)) + 0.05)]),
        "sigmoid": (ad.sigmoid, [p(6)]),
        "tanh": (ad.tanh, [p(6)]),
        "exp": (ad.exp, [p(5)]),
        "log": (ad.log, [ad.parameter(r.uniform(0.2, 3.0, size=5))]),
        "sqrt": (ad.sqrt, [ad.parameter(r.uniform(0.2, 3.0, size=5))]),
        "max_axis": (lambda a: ad.reduce_max(a, axis=1), [p(4, 6)]),
        "mean": (lambda a: ad.reduce_mean(a, axis=0), [p(5, 3)]),
        "sum": (lambda a: ad.reduce_sum(a, axis=1), [p(3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [p(2, 3), p(2, 2)]),
        "slice": (lambda a: a[1:3, ::2], [p(4, 6)]),
        "logsumexp": (lambda a: ad.logsumexp(a, axis=1), [p(3, 5)]),
        "squared_difference": (ad.squared_difference, [p(4), p(4)]),
        "reshape": (lambda a: ad.reshape(a, (6,)), [p(2, 3)]),
        "transpose": (lambda a: ad.transpose(a, (1, 0)), [p(3, 4)]),
        "lstm_step": (lambda x, s, wx, wh, b: ad.lstm_step(
            x, s, wx, wh, b, mask=np.array([[1.0], [0.0]])),
            [p(2, 3), p(2, 6), p(3, 12), p(3, 12), p(12)]),
    }


TINY_MODEL = md.ModelConfig(n_mels=4, embed_dim=3, audio_hidden=3,
                            conv_channels=(2, 3), image_size=8)


def _tiny_loss_graph(kind: str, seed: int):
    rng = np.random.default_rng(seed)
    params = md.init_params(md.InitStrategy(), seed, TINY_MODEL)
    mels = []
    for frames in rng.integers(3, 6, size=5):
        vals = rng.normal(size=(4, int(frames)))
        mels.append(MelSpectrogram(values=vals, n_mels=4, n_frames=int(frames),
                                   n_valid_frames=int(frames)))
    imgs = [rng.normal(size=(3, 8, 8)) * 0.5 for _ in range(5)]

    def fn():
        a = md.encode_audio_batch(mels, params)
        v = md.encode_image_batch(imgs, params)
        batch = ls.ContrastiveBatch(
            anchor_audio=a[0], anchor_image=v[0],
            pos_audio=[a[1], a[2]], pos_images=[v[1], v[2]],
            neg_audio=[a[3], a[4]], neg_images=[v[3], v[4]],
        )
        return ls.compute_loss(kind, batch, temperature=1.0)

    return fn, list(params.tensors.values())


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        for name, (op, params) in _primitive_cases(rng).items():
            err = ad.grad_check(lambda: ad.reduce_sum(op(*params)), params, h=1e-5)
            worst = max(worst, err)
    assert worst < 1e-5, f"primitive grad error {worst}"
    for kind in ls.LOSS_KINDS:
        for seed in range(100):
            fn, params = _tiny_loss_graph(kind, 20_000 + seed)
            err = ad.grad_check(fn, params, h=1e-5, max_coords_per_param=2, seed=seed)
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 120.0
    report("criterion 1 (gradient correctness)", ok,
           f"max rel err {worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# Criterion 2: loss identities
# ---------------------------------------------------------------------------

def _pinned_batch(s_anchor, s_neg, s_pos=None, n_pos=0, n_neg=1):
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


def test_criterion_2_loss_identities():
    at_targets = _pinned_batch(100.0, 0.0, 100.0, n_pos=2, n_neg=3)
    eq1_zero = ls.mattnet_loss(at_targets).item()

    satisfied = _pinned_batch(5.0, 3.0, n_neg=2)
    eq2_zero = ls.hinge_loss(satisfied, margin=1.0, temperature=1.0).item()

    equal = _pinned_batch(1.0, 1.0, n_neg=1)
    eq3 = ls.infonce_loss(equal, temperature=1.0).item()

    counted = len(ls.mattnet_loss_terms(_pinned_batch(50.0, 5.0, n_pos=5, n_neg=11)))

    ok = (eq1_zero == 0.0 and eq2_zero == 0.0
          and abs(eq3 - 2.0 * np.log(2.0)) < 1e-9 and counted == 33)
    report("criterion 2 (loss identities)", ok,
           f"eq1@targets={eq1_zero}, eq2@margins={eq2_zero}, "
           f"eq3={eq3:.9f} vs 2ln2, terms={counted}")


# ---------------------------------------------------------------------------
# Criteria 3/4/9 share a default-config dataset
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_ds")
    manifest = dg.build_dataset(dg.DatasetConfig(), out)
    return out, manifest


def test_criterion_3_sampler_and_dataset_invariants(default_dataset):
    _, manifest = default_dataset
    cfg = tr.TrainConfig()
    rng = np.random.default_rng(0)
    anchors = manifest.audio_ids(split="train")
    novel = set(manifest.novel_classes)
    bad = 0
    for i in range(10_000):
        b = tr.sample_contrastive_batch(manifest, anchors[i % len(anchors)], cfg, rng)
        classes = {manifest.audio[a].class_name for a in b.all_audio_ids()} | \
                  {manifest.images[x].class_name for x in b.all_image_ids()}
        if classes & novel:
            bad += 1
    assert bad == 0, f"{bad} batches touched novel classes"

    violations = 0
    bucket_bad = 0
    for kind in ev.ALL_KINDS:
        episodes = ev.sample_episodes(manifest, kind, 10_000, seed=7)
        for ep in episodes:
            if ev.validate_episode(ep, manifest):
                violations += 1
            if manifest.images[ep.image_a.id].bucket != manifest.images[ep.image_b.id].bucket:
                bucket_bad += 1
    disjoint = dg.validate_manifest(manifest) == []
    ok = bad == 0 and violations == 0 and bucket_bad == 0 and disjoint
    report("criterion 3 (sampler/dataset invariants)", ok,
           f"novel-touch={bad}, episode-violations={violations}, "
           f"bucket-violations={bucket_bad}, manifest-clean={disjoint}")


def test_criterion_4_random_baseline(default_dataset):
    _, manifest = default_dataset
    agent = ev.RandomAgent(seed=2024)
    details = []
    ok = True
    for kind in ev.ALL_KINDS:
        episodes = ev.sample_episodes(manifest, kind, 1000, seed=31)
        acc, records = ev.run_test(agent, episodes)
        lo, hi = st.binomial_ci(len(records) // 2, len(records), 0.99)
        inside = lo <= acc <= hi
        ok &= inside
        details.append(f"{kind.value}={acc:.4f}")
    report("criterion 4 (random baseline at chance)", ok, ", ".join(details))


def test_criterion_9_perfect_me_agent(default_dataset):
    _, manifest = default_dataset
    agent = ev.PerfectMEAgent(manifest, seed=5)
    rows, _ = ev.full_battery(agent, manifest, n_episodes=1000, seed=63)
    by = {r.kind: r for r in rows}
    exact = all(by[k].accuracy == 1.0 for k in
                ("familiar-familiar", "familiarq-novel", "me-familiar-novel",
                 "me-mismatched"))
    nn = by["novel-novel"]
    lo, hi = st.binomial_ci(nn.n_trials // 2, nn.n_trials, 0.99)
    near_half = lo <= nn.accuracy <= hi
    report("criterion 9 (perfect-ME agent battery)", exact and near_half,
           f"FF/FQ/ME/MM exact={exact}, NN={nn.accuracy:.4f} in 99% CI of 0.5")


# ---------------------------------------------------------------------------
# Criterion 12: statistics module
# ---------------------------------------------------------------------------

def test_criterion_12_statistics():
    lo, hi = st.binomial_ci(50, 100, 0.95)
    cp_ok = abs(lo - 0.3983) < 1e-3 and abs(hi - 0.6017) < 1e-3

    covered = 0
    for s in range(200):
        rng = np.random.default_rng(7000 + s)
        y = rng.binomial(1, 0.5, size=200).astype(float)
        labels = np.repeat(np.arange(40), 5)
        _, clo, chi = st.cluster_bootstrap(y, labels, n_resamples=400, seed=s)
        covered += clo <= 0.5 <= chi
    coverage_ok = covered / 200 >= 0.90

    rng = np.random.default_rng(99)
    effects = rng.uniform(0.2, 0.8, size=40)
    y = np.concatenate([rng.binomial(1, p, size=5) for p in effects]).astype(float)
    labels = np.repeat(np.arange(40), 5)
    _, l1, h1 = st.cluster_bootstrap(y, labels, n_resamples=4000, seed=1)
    y2, labels2 = np.concatenate([y, y]), np.concatenate([labels, labels])
    _, l2, h2 = st.cluster_bootstrap(y2, labels2, n_resamples=4000, seed=2)
    stable = abs((h2 - l2) - (h1 - l1)) / (h1 - l1) < 0.10
    b1 = st.binomial_ci(int(y.sum()), y.size)
    b2 = st.binomial_ci(int(y2.sum()), y2.size)
    shrink = (b1[1] - b1[0]) / (b2[1] - b2[0])
    naive_shrinks = abs(shrink - np.sqrt(2.0)) / np.sqrt(2.0) < 0.06

    ok = cp_ok and coverage_ok and stable and naive_shrinks
    report("criterion 12 (statistics module)", ok,
           f"CP=({lo:.4f},{hi:.4f}), coverage={covered}/200, "
           f"cluster-CI stable={stable}, naive shrink={shrink:.3f}~sqrt2")


# ---------------------------------------------------------------------------
# Criteria 5-8 and 10: five desk-scale runs plus the loss-swap pair.
# One run = one end-to-end replication: its dataset seed equals its run seed.
# ---------------------------------------------------------------------------

N_RUNS = 5


def _one_run(root: Path, seed: int, loss: str) -> dict:
    ds_dir = root / f"ds{seed}"
    manifest = dg.load_manifest(ds_dir) if (ds_dir / "manifest.json").exists() else \
        dg.build_dataset(dg.DatasetConfig(seed=seed), ds_dir)
    cfg = tr.TrainConfig(loss=loss, seed=seed)
    t0 = time.perf_counter()
    result = tr.train(cfg, manifest, ds_dir)
    wall = time.perf_counter() - t0
    feats = tr.FeatureStore(manifest, ds_dir)
    scorer = ev.CheckpointScorer(result.best.params, feats, epoch=result.best.epoch)
    rows, records = ev.full_battery(scorer, manifest, BATTERY_EPISODES, EPISODE_SEED)
    return {
        "seed": seed,
        "loss": loss,
        "manifest": manifest,
        "ds_dir": ds_dir,
        "params": result.best.params,
        "train_seconds": wall,
        "epochs": len(result.log.entries),
        "battery": {r.kind: r for r in rows},
        "records": records,
        "feats": feats,
    }


@pytest.fixture(scope="module")
def trained_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_runs")
    runs = [_one_run(root, seed, "mattnet") for seed in range(N_RUNS)]
    swaps = {loss: _one_run(root, 0, loss) for loss in ("hinge", "infonce")}
    return root, runs, swaps


def _pool(runs, kind):
    """Pooled per-trial outcomes with cluster labels across runs."""
    correct, episode, query, pair = [], [], [], []
    for run in runs:
        for r in run["records"]:
            if r.kind != kind:
                continue
            correct.append(float(r.correct))
            episode.append(f"{run['seed']}:{r.episode_index}")
            query.append(f"{run['seed']}:{r.query_audio_id}")
            pair.append(f"{run['seed']}:{r.query_class}>{r.other_class}")
    return (np.array(correct), np.array(episode), np.array(query), np.array(pair))


def test_criterion_5_familiar_word_learning(trained_runs):
    _, runs, _ = trained_runs
    ff = {run["seed"]: run["battery"]["familiar-familiar"].accuracy for run in runs}
    times = {run["seed"]: run["train_seconds"] for run in runs}
    ok = all(v >= 0.90 for v in ff.values()) and all(t < 900.0 for t in times.values())
    report("criterion 5 (familiar-word learning, 5 seeds)", ok,
           "FF=" + ", ".join(f"s{s}:{v:.3f}" for s, v in ff.items())
           + "; minutes=" + ", ".join(f"{t/60:.1f}" for t in times.values()))


def test_criterion_6_me_bias_directional(trained_runs):
    _, runs, _ = trained_runs
    me, me_ep, _, _ = _pool(runs, "me-familiar-novel")
    nn, *_ = _pool(runs, "novel-novel")
    est, lo, hi = st.cluster_bootstrap(me, me_ep, n_resamples=4000, seed=0, level=0.95)
    p = st.permutation_test(me, nn, n_permutations=10000, seed=0)
    ok = est > 0.5 and lo > 0.5 and p < 0.05
    report("criterion 6 (ME bias, pooled)", ok,
           f"ME={est:.4f} CI=[{lo:.4f},{hi:.4f}], ME vs NN p={p:.5f} "
           f"(NN={nn.mean():.4f})")


def test_criterion_7_sanity_battery_orderings(trained_runs):
    _, runs, _ = trained_runs
    me, *_ = _pool(runs, "me-familiar-novel")
    fq, *_ = _pool(runs, "familiarq-novel")
    mm, *_ = _pool(runs, "me-mismatched")
    nn, _, _, nn_pair = _pool(runs, "novel-novel")
    fq_gt_me = fq.mean() > me.mean()
    mm_close = abs(mm.mean() - me.mean()) <= 0.05
    _, lo, hi = st.cluster_bootstrap(nn, nn_pair, n_resamples=4000, seed=1, level=0.95)
    nn_chance = lo <= 0.5 <= hi
    ok = fq_gt_me and mm_close and nn_chance
    report("criterion 7 (sanity-battery orderings)", ok,
           f"FQ={fq.mean():.4f} > ME={me.mean():.4f}: {fq_gt_me}; "
           f"|MM-ME|={abs(mm.mean()-me.mean()):.4f} <= 0.05: {mm_close}; "
           f"NN CI=[{lo:.4f},{hi:.4f}] contains 0.5: {nn_chance}")


def test_criterion_8_representation_space(trained_runs):
    _, runs, _ = trained_runs
    run = runs[0]
    trained = an.similarity_distributions(run["params"], run["feats"], run["manifest"],
                                          seed=5, pairs_per_group=2000)
    untrained_params = md.init_params(md.InitStrategy(), run["seed"], md.ModelConfig())
    untrained = an.similarity_distributions(untrained_params, run["feats"],
                                            run["manifest"], seed=5, pairs_per_group=2000)
    ab_trained = trained["A"].median - trained["B"].median
    ab_untrained = untrained["A"].median - untrained["B"].median
    orderings = trained["A"].median > trained["B"].median and \
        trained["C"].median > trained["D"].median
    gap_shrinks = abs(ab_untrained) <= 0.5 * ab_trained
    ok = orderings and gap_shrinks
    report("criterion 8 (representation space)", ok,
           f"trained medians A={trained['A'].median:.2f} B={trained['B'].median:.2f} "
           f"C={trained['C'].median:.2f} D={trained['D'].median:.2f}; "
           f"untrained A-B gap {ab_untrained:.3f} vs trained {ab_trained:.3f}")


def test_criterion_10_loss_swap_report(trained_runs, tmp_path):
    root, runs, swaps = trained_runs
    rows_by_loss = {"mattnet": runs[0], "hinge": swaps["hinge"], "infonce": swaps["infonce"]}

    # materialize run dirs so the report command assembles the table
    run_dirs = []
    for loss, run in rows_by_loss.items():
        doc = json.loads(json.dumps(REPRO_CONFIG))
        doc["train"] = {"loss": loss, "seed": run["seed"]}
        doc["dataset"] = {"seed": run["seed"]}
        cfg = cli.parse_run_config(doc)
        run_dir = tmp_path / f"run-{cfg.config_hash()}"
        (run_dir / "eval").mkdir(parents=True)
        mio.write_json(run_dir / "config.json", cfg.to_json())
        ev.write_battery(run_dir / "eval" / "battery.csv",
                         list(run["battery"].values()),
                         meta={"config_hash": cfg.config_hash(), "seed": run["seed"]})
        run_dirs.append(str(run_dir))
    out = tmp_path / "report"
    code = cli.main(["report", "--runs", *run_dirs, "--out", str(out)])
    table = (out / "loss_comparison.csv").read_text().splitlines()
    losses_in_table = sorted(line.split(",")[1] for line in table[2:])
    ff = {loss: run["battery"]["familiar-familiar"].accuracy
          for loss, run in rows_by_loss.items()}
    me = {loss: run["battery"]["me-familiar-novel"].accuracy
          for loss, run in rows_by_loss.items()}
    ok = code == 0 and losses_in_table == ["hinge", "infonce", "mattnet"] and \
        all(v >= 0.90 for v in ff.values())
    report("criterion 10 (loss-swap harness)", ok,
           "FF=" + ", ".join(f"{k}:{v:.3f}" for k, v in ff.items())
           + "; ME(reported, not asserted)=" +
           ", ".join(f"{k}:{v:.3f}" for k, v in me.items()))


# ---------------------------------------------------------------------------
# Criterion 11: byte-identical reproducibility through the CLI
# ---------------------------------------------------------------------------

REPRO_CONFIG = {
    "seed": 11,
    "dataset": {"n_familiar": 2, "n_novel": 2, "train_pairs_per_class": 6,
                "dev_per_class": 2, "test_audio_per_class": 3,
                "test_images_per_class": 3, "image_size": 32, "seed": 11},
    "model": {"image_size": 32, "embed_dim": 8, "audio_hidden": 8,
              "conv_channels": [4, 6]},
    "train": {"n_pos": 1, "n_neg": 2, "max_epochs": 2, "anchors_per_step": 3,
              "seed": 11},
    "eval": {"n_episodes": 25, "seed": 17},
    "analyze": {"pairs_per_group": 50, "cosine_instances": 2},
}


def test_criterion_11_reproducibility(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(REPRO_CONFIG))
    outputs = {}
    for tag in ("a", "b"):
        base = tmp_path / tag
        assert cli.main(["gen-data", "--config", str(cfg_path),
                         "--out", str(base / "ds")]) == 0
        assert cli.main(["train", "--config", str(cfg_path), "--dataset",
                         str(base / "ds"), "--out", str(base / "runs")]) == 0
        run_dir = sorted((base / "runs").glob("run-*"))[0]
        assert cli.main(["eval", "--run", str(run_dir), "--dataset",
                         str(base / "ds")]) == 0
        assert cli.main(["analyze", "--run", str(run_dir), "--dataset",
                         str(base / "ds"), "--analyses", "distributions,cosine"]) == 0
        ckpts = sorted((run_dir / "checkpoints").glob("*.ckpt"))
        outputs[tag] = {
            "manifest": (base / "ds" / "manifest.json").read_bytes(),
            "audio0": sorted((base / "ds" / "audio").glob("*.f32"))[0].read_bytes(),
            "image0": sorted((base / "ds" / "images").glob("*.img"))[0].read_bytes(),
            "best": (run_dir / "best.ckpt").read_bytes(),
            "last_epoch": ckpts[-1].read_bytes(),
            "log": (run_dir / "train_log.csv").read_bytes(),
            "battery": (run_dir / "eval" / "battery.csv").read_bytes(),
            "trials": (run_dir / "eval" / "trials.csv").read_bytes(),
            "groups": (run_dir / "analysis" / "similarity_groups.csv").read_bytes(),
        }
    mismatches = [k for k in outputs["a"] if outputs["a"][k] != outputs["b"][k]]

    # checkpoint round trip is bit-exact
    base = tmp_path / "a"
    run_dir = sorted((base / "runs").glob("run-*"))[0]
    ckpt = md.load_checkpoint(run_dir / "best.ckpt")
    md.save_checkpoint(tmp_path / "resaved.ckpt", ckpt)
    roundtrip = (tmp_path / "resaved.ckpt").read_bytes() == outputs["a"]["best"]

    ok = not mismatches and roundtrip
    report("criterion 11 (byte-identical reproducibility)", ok,
           f"mismatches={mismatches or 'none'}, checkpoint roundtrip={roundtrip}")
