"""Batch front door: dataset generation, training, evaluation, analysis,
and report assembly driven by JSON run configs.

The JSON config is the unit of reproducibility; command-line flags only
select the command and paths. Every output file embeds the config hash and
seed, and identical configs always produce byte-identical outputs.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime/data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import analysis as an
from . import autodiff as ad
from . import datagen as dg
from . import evaluation as ev
from . import io as mio
from . import model as md
from . import training as tr
from .features import MelConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    seed: int = 0
    kinds: tuple[str, ...] = tuple(k.value for k in ev.ALL_KINDS)
    queries_per_episode: str = "all"
    ci_level: float = 0.95
    smoothing_window: int = 5


@dataclass(frozen=True)
class AnalyzeConfig:
    pairs_per_group: int = 2000
    cosine_instances: int = 5
    drilldown_classes: tuple[str, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class StatsConfig:
    n_permutations: int = 10000
    n_resamples: int = 2000
    cluster_key: str = "episode"
    level: float = 0.95


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: dg.DatasetConfig = field(default_factory=dg.DatasetConfig)
    features: MelConfig = field(default_factory=MelConfig)
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)

    def to_json(self) -> dict:
        out = {"seed": self.seed}
        for name in ("dataset", "features", "model", "train", "eval", "analyze", "stats"):
            section = getattr(self, name)
            d = asdict(section)
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            out[name] = d
        return out

    def config_hash(self) -> str:
        return mio.config_hash(self.to_json())


_SECTION_TYPES = {
    "dataset": dg.DatasetConfig,
    "features": MelConfig,
    "model": md.ModelConfig,
    "train": tr.TrainConfig,
    "eval": EvalConfig,
    "analyze": AnalyzeConfig,
    "stats": StatsConfig,
}

_TUPLE_FIELDS = {"conv_channels", "kinds", "drilldown_classes"}


def parse_run_config(doc: dict) -> RunConfig:
    """Schema-validated parse; unknown keys anywhere are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTION_TYPES) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {"seed": int(doc.get("seed", 0))}
    for name, cls in _SECTION_TYPES.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = set(cls.__dataclass_fields__)
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        coerced = {}
        for k, v in section.items():
            coerced[k] = tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
        try:
            kwargs[name] = cls(**coerced)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid section {name!r}: {e}") from e
    return RunConfig(**kwargs)


def load_run_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    return parse_run_config(doc)


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    ds_cfg = cfg.dataset
    manifest = dg.build_dataset(ds_cfg, out)
    log.info("dataset written to %s (%d audio, %d images)", out,
             len(manifest.audio), len(manifest.images))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    dataset_dir = Path(args.dataset)
    if not (dataset_dir / "manifest.json").exists():
        raise RuntimeError(f"no manifest.json under {dataset_dir}")
    manifest = dg.load_manifest(dataset_dir)
    run_dir = Path(args.out) / f"run-{cfg.config_hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    mio.write_json(run_dir / "config.json", cfg.to_json())

    artifacts = {}
    if cfg.train.vision_pretrained:
        pre = tr.pretrain_vision(manifest, dataset_dir, cfg.seed, cfg.model)
        artifacts["vision"] = pre.arrays
        mio.write_array_container(run_dir / "pretrain_vision.ckpt",
                                  {"kind": "pretrain", "branch": "vision", **_meta(cfg)},
                                  dict(sorted(pre.arrays.items())))
    if cfg.train.audio_pretrained:
        pre = tr.pretrain_audio(manifest, dataset_dir, cfg.seed, cfg.model, cfg.features)
        artifacts["audio"] = pre.arrays
        mio.write_array_container(run_dir / "pretrain_audio.ckpt",
                                  {"kind": "pretrain", "branch": "audio", **_meta(cfg)},
                                  dict(sorted(pre.arrays.items())))

    resume = None
    if args.resume:
        existing = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"))
        if existing:
            resume = md.load_checkpoint(existing[-1])
            log.info("resuming from %s (epoch %d)", existing[-1].name, resume.epoch)
    result = tr.train(cfg.train, manifest, dataset_dir, run_dir=run_dir,
                      model_cfg=cfg.model, mel_cfg=cfg.features,
                      pretrain_artifacts=artifacts or None, resume_from=resume)
    md.save_checkpoint(run_dir / "best.ckpt", result.best)
    tr.write_train_log(run_dir, result, cfg.seed, config_hash=cfg.config_hash())
    log.info("best epoch %d (val %.3f) -> %s", result.best.epoch,
             max(e.val_acc for e in result.log.entries), run_dir)
    return EXIT_OK


def _battery_outputs(out_dir: Path, rows, records, meta: dict) -> None:
    ev.write_battery(out_dir / "battery.csv", rows, meta)
    ev.write_trial_records(out_dir / "trials.csv", records, meta)
    ev.write_trial_records_json(out_dir / "trials.json", records, meta)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = load_run_config(run_dir / "config.json")
    n_episodes = args.episodes if args.episodes is not None else cfg.eval.n_episodes
    seed = args.seed if args.seed is not None else cfg.eval.seed
    kind_names = args.kinds.split(",") if args.kinds else list(cfg.eval.kinds)
    try:
        kinds = tuple(ev.TestKind(k) for k in kind_names)
    except ValueError as e:
        raise ConfigError(f"unknown test kind: {e}") from e
    manifest = dg.load_manifest(Path(args.dataset))
    ckpt = md.load_checkpoint(run_dir / "best.ckpt")
    feats = tr.FeatureStore(manifest, Path(args.dataset), cfg.features)
    scorer = ev.CheckpointScorer(ckpt.params, feats, epoch=ckpt.epoch)
    rows, records = ev.full_battery(scorer, manifest, n_episodes, seed, kinds,
                                    ci_level=cfg.eval.ci_level)
    out_dir = Path(args.out) if args.out else run_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {**_meta(cfg), "episode_seed": seed}
    _battery_outputs(out_dir, rows, records, meta)
    if args.epoch_curve:
        ckpts = [md.load_checkpoint(p) for p in sorted((run_dir / "checkpoints").glob("*.ckpt"))]
        curve = ev.epoch_curve(ckpts, feats, manifest, kinds, n_episodes, seed,
                               smoothing_window=cfg.eval.smoothing_window)
        mio.write_csv(out_dir / "epoch_curve.csv", ["epoch", "kind", "accuracy", "smoothed"],
                      [(r["epoch"], r["kind"], r["accuracy"], r["smoothed"]) for r in curve],
                      meta=meta)
    for r in rows:
        log.info("%-22s %.4f [%.4f, %.4f]", r.kind, r.accuracy, r.ci_low, r.ci_high)
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    cfg = load_run_config(run_dir / "config.json")
    manifest = dg.load_manifest(Path(args.dataset))
    feats = tr.FeatureStore(manifest, Path(args.dataset), cfg.features)
    ckpt = md.load_checkpoint(run_dir / "best.ckpt")
    params = ckpt.params
    if args.untrained:
        strategy = md.InitStrategy(audio_pretrained=cfg.train.audio_pretrained,
                                   vision_pretrained=cfg.train.vision_pretrained)
        artifacts = {}
        for branch in ("vision", "audio"):
            path = run_dir / f"pretrain_{branch}.ckpt"
            if path.exists():
                artifacts[branch] = mio.read_array_container(path)[1]
        params = md.init_params(strategy, cfg.train.seed, cfg.model,
                                pretrain_artifacts=artifacts or None)
    out_dir = Path(args.out) if args.out else run_dir / ("analysis-untrained" if args.untrained
                                                         else "analysis")
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {**_meta(cfg), "untrained": args.untrained}
    wanted = set(args.analyses.split(",")) if args.analyses else \
        {"distributions", "per-word", "pick-matrix", "cosine", "drilldown"}
    unknown = wanted - {"distributions", "per-word", "pick-matrix", "cosine", "drilldown"}
    if unknown:
        raise ConfigError(f"unknown analyses: {sorted(unknown)}")

    if "distributions" in wanted:
        groups = an.similarity_distributions(params, feats, manifest, cfg.analyze.seed,
                                             cfg.analyze.pairs_per_group)
        an.write_group_summaries(out_dir / "similarity_groups.csv", groups, meta)
    if wanted & {"per-word", "pick-matrix"}:
        episodes = ev.sample_episodes(manifest, ev.TestKind.ME_FAMILIAR_NOVEL,
                                      cfg.eval.n_episodes, cfg.eval.seed)
        scorer = ev.CheckpointScorer(params, feats, epoch=ckpt.epoch)
        _, records = ev.run_test(scorer, episodes)
        if "per-word" in wanted:
            an.write_per_word(out_dir / "per_word_me.csv", an.per_word_me(records), meta)
        if "pick-matrix" in wanted:
            novel, familiar, matrix, _ = an.familiar_pick_matrix(records)
            an.write_matrix(out_dir / "familiar_pick_matrix.csv", novel, familiar, matrix, meta)
    if "cosine" in wanted:
        classes, matrix = an.audio_cosine_matrix(params, feats, manifest,
                                                 n_instances=cfg.analyze.cosine_instances)
        an.write_matrix(out_dir / "audio_cosine_matrix.csv", classes, classes, matrix, meta)
    if "drilldown" in wanted:
        targets = cfg.analyze.drilldown_classes or tuple(manifest.novel_classes[:2])
        for cls in targets:
            groups = an.class_drilldown(params, feats, manifest, cls,
                                        seed=cfg.analyze.seed)
            an.write_group_summaries(out_dir / f"drilldown_{cls}.csv", groups, meta)
    return EXIT_OK


def _read_run_summary(run_dir: Path) -> dict | None:
    """Battery + config of one finished run, or None when incomplete."""
    cfg_path = run_dir / "config.json"
    battery = run_dir / "eval" / "battery.csv"
    if not cfg_path.exists() or not battery.exists():
        return None
    cfg = load_run_config(cfg_path)
    rows = {}
    for line in battery.read_text().splitlines():
        if line.startswith("#") or line.startswith("kind,"):
            continue
        parts = line.split(",")
        rows[parts[0]] = {"accuracy": float(parts[4]), "ci_low": float(parts[5]),
                          "ci_high": float(parts[6])}
    return {"run": run_dir.name, "loss": cfg.train.loss,
            "audio_pretrained": cfg.train.audio_pretrained,
            "vision_pretrained": cfg.train.vision_pretrained,
            "seed": cfg.train.seed, "battery": rows}


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    missing = []
    for run in args.runs:
        summary = _read_run_summary(Path(run))
        if summary is None:
            missing.append(str(run))
        else:
            summaries.append(summary)
    summaries.sort(key=lambda s: (s["loss"], s["audio_pretrained"], s["vision_pretrained"],
                                  s["seed"], s["run"]))

    def fmt(s, kind):
        cell = s["battery"].get(kind)
        return f"{100 * cell['accuracy']:.2f}" if cell else "absent"

    lines = ["# Mutual-exclusivity lab report", ""]
    if missing:
        lines += ["Missing runs: " + ", ".join(sorted(missing)), ""]

    lines += ["## Initialization grid", "",
              "| audio init | vision init | familiar-familiar | familiar-novel (ME) |",
              "|---|---|---|---|"]
    init_rows = []
    for s in summaries:
        if s["loss"] != "mattnet":
            continue
        lines.append(f"| {'cpc' if s['audio_pretrained'] else 'random'} "
                     f"| {'ssl' if s['vision_pretrained'] else 'random'} "
                     f"| {fmt(s, 'familiar-familiar')} | {fmt(s, 'me-familiar-novel')} |")
        init_rows.append((s["run"], s["audio_pretrained"], s["vision_pretrained"],
                          fmt(s, "familiar-familiar"), fmt(s, "me-familiar-novel")))

    lines += ["", "## Loss comparison", "",
              "| loss | familiar-familiar | familiar-novel (ME) |", "|---|---|---|"]
    loss_rows = []
    for s in summaries:
        lines.append(f"| {s['loss']} | {fmt(s, 'familiar-familiar')} "
                     f"| {fmt(s, 'me-familiar-novel')} |")
        loss_rows.append((s["run"], s["loss"], fmt(s, "familiar-familiar"),
                          fmt(s, "me-familiar-novel")))

    lines += ["", "## Full batteries", "",
              "| run | kind | accuracy | ci_low | ci_high |", "|---|---|---|---|---|"]
    battery_rows = []
    for s in summaries:
        for kind in sorted(s["battery"]):
            cell = s["battery"][kind]
            lines.append(f"| {s['run']} | {kind} | {cell['accuracy']:.4f} "
                         f"| {cell['ci_low']:.4f} | {cell['ci_high']:.4f} |")
            battery_rows.append((s["run"], kind, cell["accuracy"], cell["ci_low"],
                                 cell["ci_high"]))

    meta = {"runs": len(summaries), "missing": len(missing)}
    (out_dir / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    mio.write_csv(out_dir / "init_grid.csv",
                  ["run", "audio_pretrained", "vision_pretrained", "familiar_familiar",
                   "me_familiar_novel"], init_rows, meta=meta)
    mio.write_csv(out_dir / "loss_comparison.csv",
                  ["run", "loss", "familiar_familiar", "me_familiar_novel"],
                  loss_rows, meta=meta)
    mio.write_csv(out_dir / "batteries.csv",
                  ["run", "kind", "accuracy", "ci_low", "ci_high"], battery_rows, meta=meta)
    log.info("report written to %s (%d runs, %d missing)", out_dir, len(summaries),
             len(missing))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melab",
                                     description="Mutual-exclusivity lab for visually "
                                                 "grounded speech models")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (falls back to ME_LAB_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the episode battery")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kinds", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--epoch-curve", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="representation-space analyses")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--analyses", default=None)
    p.add_argument("--untrained", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="assemble tables across runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    threads = args.threads
    if threads is None:
        env = os.environ.get("ME_LAB_THREADS")
        if env is not None:
            try:
                threads = int(env)
            except ValueError:
                log.error("ME_LAB_THREADS must be an integer, got %r", env)
                return EXIT_CONFIG
    if threads is not None and threads < 1:
        log.error("--threads must be >= 1")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (dg.GenerationError, tr.TrainingError, ev.EvaluationError, an.AnalysisError,
            mio.FormatError, ad.NonFiniteError, OSError, RuntimeError) as e:
        log.error("runtime error: %s", e)
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())
