"""The five-test episode battery, trial scoring, accuracy-over-epochs
curves, and reference agents (uniform random, oracle, perfect-ME).

Episode geometry per test kind (query / target image / other image):
  familiar-familiar   F  / F  / F'
  familiarq-novel     F  / F  / N    (same image pairs as the ME episodes)
  me-familiar-novel   N  / N  / F    (the ME test)
  novel-novel         N  / N  / N'
  me-mismatched       N  / N' / F    (ME pairs with the novel image swapped)

Both images of an episode always come from one source bucket. The
familiarq-novel and me-mismatched kinds are derived from the ME episodes of
the same seed, sharing image pairs exactly.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from . import io as mio
from .datagen import DatasetManifest, SOURCE_BUCKETS
from .stats import binomial_ci
from .training import FeatureStore, score_pairs
from . import model as md

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


class TestKind(str, Enum):
    FAMILIAR_FAMILIAR = "familiar-familiar"
    FAMILIARQ_NOVEL = "familiarq-novel"
    ME_FAMILIAR_NOVEL = "me-familiar-novel"
    NOVEL_NOVEL = "novel-novel"
    ME_MISMATCHED = "me-mismatched"


ALL_KINDS = tuple(TestKind)


@dataclass(frozen=True)
class EpisodeImage:
    id: str
    class_name: str
    is_target: bool


@dataclass(frozen=True)
class Episode:
    episode_index: int
    kind: TestKind
    query_audio_id: str
    query_class: str
    image_a: EpisodeImage
    image_b: EpisodeImage
    bucket: str

    @property
    def target(self) -> EpisodeImage:
        return self.image_a if self.image_a.is_target else self.image_b

    @property
    def other(self) -> EpisodeImage:
        return self.image_b if self.image_a.is_target else self.image_a


@dataclass(frozen=True)
class TrialRecord:
    episode_index: int
    kind: str
    query_audio_id: str
    query_class: str
    target_class: str
    other_class: str
    target_image_id: str
    other_image_id: str
    s_target: float
    s_other: float
    chosen_image_id: str
    correct: bool
    tie: bool
    checkpoint_epoch: int = -1


def validate_episode(ep: Episode, manifest: DatasetManifest) -> list[str]:
    """Invariant check; returns a list of violations."""
    problems = []
    fam = set(manifest.familiar_classes)
    nov = set(manifest.novel_classes)
    img_a, img_b = ep.image_a, ep.image_b
    for img in (img_a, img_b):
        item = manifest.images.get(img.id)
        if item is None:
            problems.append(f"unknown image {img.id}")
            continue
        if not item.is_isolated:
            problems.append(f"image {img.id} is not isolated")
        if item.bucket != ep.bucket:
            problems.append(f"image {img.id} bucket {item.bucket} != episode {ep.bucket}")
        if item.class_name != img.class_name:
            problems.append(f"image {img.id} class mismatch")
    audio = manifest.audio.get(ep.query_audio_id)
    if audio is None or audio.class_name != ep.query_class:
        problems.append(f"query audio {ep.query_audio_id} class mismatch")
    if int(ep.image_a.is_target) + int(ep.image_b.is_target) != 1:
        problems.append("exactly one image must be the target")
    t, o = ep.target.class_name, ep.other.class_name
    q = ep.query_class
    k = ep.kind
    ok = {
        TestKind.FAMILIAR_FAMILIAR: q in fam and t == q and o in fam and o != q,
        TestKind.FAMILIARQ_NOVEL: q in fam and t == q and o in nov,
        TestKind.ME_FAMILIAR_NOVEL: q in nov and t == q and o in fam,
        TestKind.NOVEL_NOVEL: q in nov and t == q and o in nov and o != q,
        TestKind.ME_MISMATCHED: q in nov and t in nov and t != q and o in fam,
    }[k]
    if not ok:
        problems.append(f"class pattern violates {k.value}: query={q} target={t} other={o}")
    return problems


def _rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode())]))


def _image_pool(manifest: DatasetManifest, cls: str, bucket: str) -> list[str]:
    return manifest.image_ids(split="test", class_name=cls, bucket=bucket)


def _shared_bucket(manifest: DatasetManifest, cls_a: str, cls_b: str,
                   rng: np.random.Generator) -> str:
    options = [b for b in SOURCE_BUCKETS
               if _image_pool(manifest, cls_a, b) and _image_pool(manifest, cls_b, b)]
    if not options:
        raise EvaluationError(f"no shared bucket with images for {cls_a} and {cls_b}")
    return options[int(rng.integers(len(options)))]


def _draw(pool: list[str], rng: np.random.Generator) -> str:
    return pool[int(rng.integers(len(pool)))]


@dataclass(frozen=True)
class _MePair:
    """Image pair underlying one ME trial, reused by the derived kinds."""

    episode_index: int
    novel_class: str
    familiar_class: str
    novel_image_id: str
    familiar_image_id: str
    bucket: str
    flip: bool


def _me_pairs(manifest: DatasetManifest, n_episodes: int, seed: int) -> list[_MePair]:
    rng = _rng_for(seed, "me-pairs")
    fam = manifest.familiar_classes
    nov = manifest.novel_classes
    if not fam or not nov:
        raise EvaluationError("ME episodes need both familiar and novel classes")
    pairs = []
    for e in range(n_episodes):
        for ncls in nov:
            fcls = fam[int(rng.integers(len(fam)))]
            bucket = _shared_bucket(manifest, ncls, fcls, rng)
            pairs.append(_MePair(
                episode_index=e, novel_class=ncls, familiar_class=fcls,
                novel_image_id=_draw(_image_pool(manifest, ncls, bucket), rng),
                familiar_image_id=_draw(_image_pool(manifest, fcls, bucket), rng),
                bucket=bucket, flip=bool(rng.integers(2)),
            ))
    return pairs


def _query(manifest: DatasetManifest, cls: str, rng: np.random.Generator) -> str:
    pool = manifest.audio_ids(split="test", class_name=cls)
    if not pool:
        raise EvaluationError(f"no test audio for class {cls}")
    return _draw(pool, rng)


def _episode(e: int, kind: TestKind, query_id: str, query_class: str,
             target_id: str, target_class: str, other_id: str, other_class: str,
             bucket: str, flip: bool) -> Episode:
    target = EpisodeImage(id=target_id, class_name=target_class, is_target=True)
    other = EpisodeImage(id=other_id, class_name=other_class, is_target=False)
    a, b = (other, target) if flip else (target, other)
    return Episode(episode_index=e, kind=kind, query_audio_id=query_id,
                   query_class=query_class, image_a=a, image_b=b, bucket=bucket)


def sample_episodes(manifest: DatasetManifest, kind: TestKind, n_episodes: int,
                    seed: int, queries_per_episode: str = "all") -> list[Episode]:
    """Episodes for one kind; deterministic given (kind, seed).

    With ``queries_per_episode="all"`` each episode holds one trial per
    eligible query class; ``1`` keeps a single randomly chosen query class
    per episode.
    """
    kind = TestKind(kind)
    fam = manifest.familiar_classes
    nov = manifest.novel_classes
    episodes: list[Episode] = []

    if kind in (TestKind.ME_FAMILIAR_NOVEL, TestKind.FAMILIARQ_NOVEL, TestKind.ME_MISMATCHED):
        pairs = _me_pairs(manifest, n_episodes, seed)
        qrng = _rng_for(seed, f"queries-{kind.value}")
        swaprng = _rng_for(seed, "mismatch-swap")
        for p in pairs:
            if kind == TestKind.ME_FAMILIAR_NOVEL:
                episodes.append(_episode(
                    p.episode_index, kind, _query(manifest, p.novel_class, qrng),
                    p.novel_class, p.novel_image_id, p.novel_class,
                    p.familiar_image_id, p.familiar_class, p.bucket, p.flip))
            elif kind == TestKind.FAMILIARQ_NOVEL:
                episodes.append(_episode(
                    p.episode_index, kind, _query(manifest, p.familiar_class, qrng),
                    p.familiar_class, p.familiar_image_id, p.familiar_class,
                    p.novel_image_id, p.novel_class, p.bucket, p.flip))
            else:  # ME_MISMATCHED: swap the novel image for a different novel class
                if len(nov) < 2:
                    raise EvaluationError("me-mismatched needs at least 2 novel classes")
                others = [c for c in nov if c != p.novel_class
                          and _image_pool(manifest, c, p.bucket)]
                if not others:
                    raise EvaluationError(
                        f"no alternative novel class with images in bucket {p.bucket}")
                swapped = others[int(swaprng.integers(len(others)))]
                episodes.append(_episode(
                    p.episode_index, kind, _query(manifest, p.novel_class, qrng),
                    p.novel_class,
                    _draw(_image_pool(manifest, swapped, p.bucket), swaprng), swapped,
                    p.familiar_image_id, p.familiar_class, p.bucket, p.flip))
    elif kind == TestKind.FAMILIAR_FAMILIAR:
        if len(fam) < 2:
            raise EvaluationError("familiar-familiar needs at least 2 familiar classes")
        rng = _rng_for(seed, "ff")
        for e in range(n_episodes):
            for cls in fam:
                other_cls = cls
                while other_cls == cls:
                    other_cls = fam[int(rng.integers(len(fam)))]
                bucket = _shared_bucket(manifest, cls, other_cls, rng)
                episodes.append(_episode(
                    e, kind, _query(manifest, cls, rng), cls,
                    _draw(_image_pool(manifest, cls, bucket), rng), cls,
                    _draw(_image_pool(manifest, other_cls, bucket), rng), other_cls,
                    bucket, bool(rng.integers(2))))
    elif kind == TestKind.NOVEL_NOVEL:
        if len(nov) < 2:
            raise EvaluationError("novel-novel needs at least 2 novel classes")
        rng = _rng_for(seed, "nn")
        for e in range(n_episodes):
            for cls in nov:
                other_cls = cls
                while other_cls == cls:
                    other_cls = nov[int(rng.integers(len(nov)))]
                bucket = _shared_bucket(manifest, cls, other_cls, rng)
                episodes.append(_episode(
                    e, kind, _query(manifest, cls, rng), cls,
                    _draw(_image_pool(manifest, cls, bucket), rng), cls,
                    _draw(_image_pool(manifest, other_cls, bucket), rng), other_cls,
                    bucket, bool(rng.integers(2))))
    else:
        raise EvaluationError(f"unhandled kind {kind}")

    if queries_per_episode == "all":
        return episodes
    if queries_per_episode == 1 or queries_per_episode == "1":
        picker = _rng_for(seed, "one-query")
        by_ep: dict[int, list[Episode]] = {}
        for ep in episodes:
            by_ep.setdefault(ep.episode_index, []).append(ep)
        return [eps[int(picker.integers(len(eps)))] for _, eps in sorted(by_ep.items())]
    raise EvaluationError(f"queries_per_episode must be 'all' or 1, got {queries_per_episode!r}")


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

class CheckpointScorer:
    """Scores episodes with a trained model, caching embeddings per item id
    so every audio/image is encoded at most once per checkpoint."""

    def __init__(self, params: md.ModelParams, feats: FeatureStore, epoch: int = -1):
        self.params = params
        self.feats = feats
        self.epoch = epoch
        self._audio: dict[str, np.ndarray] = {}
        self._image: dict[str, np.ndarray] = {}

    def prime(self, episodes: list[Episode]) -> None:
        self.feats.load_split("test")
        new_audio = sorted({ep.query_audio_id for ep in episodes} - self._audio.keys())
        new_images = sorted(({ep.image_a.id for ep in episodes}
                             | {ep.image_b.id for ep in episodes}) - self._image.keys())
        from . import autodiff as ad
        with ad.no_grad():
            if new_audio:
                emb = md.encode_audio_batch([self.feats.mel(a) for a in new_audio],
                                            self.params).data
                self._audio.update(zip(new_audio, emb))
            if new_images:
                emb = md.encode_image_batch([self.feats.image(i) for i in new_images],
                                            self.params,
                                            cols=[self.feats.image_col(i) for i in new_images]).data
                self._image.update(zip(new_images, emb))

    def score_episode(self, ep: Episode) -> tuple[float, float]:
        if ep.query_audio_id not in self._audio or ep.image_a.id not in self._image \
                or ep.image_b.id not in self._image:
            self.prime([ep])
        a = self._audio[ep.query_audio_id]
        return (float(np.max(self._image[ep.image_a.id] @ a)),
                float(np.max(self._image[ep.image_b.id] @ a)))


def _trial_jitters(seed: int, ep: Episode) -> dict[str, float]:
    """Two independent uniforms per trial, assigned to images by sorted id so
    flipping image order never changes the outcome."""
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, ep.episode_index, zlib.crc32(ep.kind.value.encode()),
         zlib.crc32(ep.query_audio_id.encode()),
         zlib.crc32(ep.image_a.id.encode()) ^ zlib.crc32(ep.image_b.id.encode())]))
    u = rng.uniform(size=2)
    first, second = sorted((ep.image_a.id, ep.image_b.id))
    return {first: float(u[0]), second: float(u[1])}


class RandomAgent:
    """Uniform-choice baseline; order-invariant by construction."""

    def __init__(self, seed: int):
        self.seed = seed
        self.epoch = -1

    def score_episode(self, ep: Episode) -> tuple[float, float]:
        jit = _trial_jitters(self.seed, ep)
        return jit[ep.image_a.id], jit[ep.image_b.id]


class OracleAgent:
    epoch = -1

    def score_episode(self, ep: Episode) -> tuple[float, float]:
        return (1.0, 0.0) if ep.image_a.is_target else (0.0, 1.0)


class AntiOracleAgent:
    epoch = -1

    def score_episode(self, ep: Episode) -> tuple[float, float]:
        return (0.0, 1.0) if ep.image_a.is_target else (1.0, 0.0)


class PerfectMEAgent:
    """Knows familiar words perfectly and always prefers a novel image for a
    novel query; picks at random between two novel images."""

    def __init__(self, manifest: DatasetManifest, seed: int = 0):
        self.familiar = set(manifest.familiar_classes)
        self.novel = set(manifest.novel_classes)
        self.seed = seed
        self.epoch = -1

    def score_episode(self, ep: Episode) -> tuple[float, float]:
        jit = _trial_jitters(self.seed, ep)

        def score(img: EpisodeImage) -> float:
            if ep.query_class in self.familiar:
                base = 1.0 if img.class_name == ep.query_class else 0.0
            else:
                base = 1.0 if img.class_name in self.novel else 0.0
            # jitter breaks two-novel-image ties at random without ever
            # flipping a decided comparison
            return base + 0.4 * (jit[img.id] - 0.5)

        return score(ep.image_a), score(ep.image_b)


# ---------------------------------------------------------------------------
# Running tests
# ---------------------------------------------------------------------------

def run_test(scorer, episodes: list[Episode]) -> tuple[float, list[TrialRecord]]:
    """Score every episode; accuracy counts ties as incorrect. The chosen
    image is the arg-max score with ties broken to the lexicographically
    smaller image id, so flipping image order never changes the choice."""
    if hasattr(scorer, "prime"):
        scorer.prime(episodes)
    records = []
    for ep in episodes:
        s_a, s_b = scorer.score_episode(ep)
        tie = s_a == s_b
        if tie:
            chosen = min(ep.image_a.id, ep.image_b.id)
        else:
            chosen = ep.image_a.id if s_a > s_b else ep.image_b.id
        correct = (not tie) and chosen == ep.target.id
        s_target, s_other = (s_a, s_b) if ep.image_a.is_target else (s_b, s_a)
        records.append(TrialRecord(
            episode_index=ep.episode_index, kind=ep.kind.value,
            query_audio_id=ep.query_audio_id, query_class=ep.query_class,
            target_class=ep.target.class_name, other_class=ep.other.class_name,
            target_image_id=ep.target.id, other_image_id=ep.other.id,
            s_target=s_target, s_other=s_other, chosen_image_id=chosen,
            correct=correct, tie=tie, checkpoint_epoch=getattr(scorer, "epoch", -1)))
    records.sort(key=lambda r: (r.episode_index, r.query_class, r.target_image_id))
    accuracy = float(np.mean([r.correct for r in records])) if records else 0.0
    return accuracy, records


@dataclass
class BatteryRow:
    kind: str
    n_trials: int
    n_correct: int
    n_ties: int
    accuracy: float
    ci_low: float
    ci_high: float


def full_battery(scorer, manifest: DatasetManifest, n_episodes: int, seed: int,
                 kinds: tuple[TestKind, ...] = ALL_KINDS,
                 ci_level: float = 0.95) -> tuple[list[BatteryRow], list[TrialRecord]]:
    """All requested kinds under one episode seed, so the ME, familiar-query
    and mismatched kinds share matched episodes."""
    rows = []
    all_records: list[TrialRecord] = []
    for kind in kinds:
        episodes = sample_episodes(manifest, kind, n_episodes, seed)
        acc, records = run_test(scorer, episodes)
        lo, hi = binomial_ci(sum(r.correct for r in records), len(records), ci_level)
        rows.append(BatteryRow(kind=kind.value, n_trials=len(records),
                               n_correct=sum(r.correct for r in records),
                               n_ties=sum(r.tie for r in records),
                               accuracy=acc, ci_low=lo, ci_high=hi))
        all_records.extend(records)
    return rows, all_records


def epoch_curve(checkpoints: list[md.Checkpoint], feats: FeatureStore,
                manifest: DatasetManifest, kinds: tuple[TestKind, ...],
                n_episodes: int, seed: int,
                smoothing_window: int = 5) -> list[dict]:
    """Fixed episode set evaluated against every checkpoint, with trailing
    moving-average smoothing (window 1 = raw)."""
    if not checkpoints:
        raise EvaluationError("epoch_curve needs at least one checkpoint")
    if smoothing_window < 1:
        raise EvaluationError("smoothing window must be >= 1")
    episode_sets = {k: sample_episodes(manifest, k, n_episodes, seed) for k in kinds}
    raw: dict[TestKind, list[tuple[int, float]]] = {k: [] for k in kinds}
    for ckpt in checkpoints:
        scorer = CheckpointScorer(ckpt.params, feats, epoch=ckpt.epoch)
        for k in kinds:
            acc, _ = run_test(scorer, episode_sets[k])
            raw[k].append((ckpt.epoch, acc))
    rows = []
    for k in kinds:
        series = raw[k]
        for i, (epoch, acc) in enumerate(series):
            window = [a for _, a in series[max(0, i - smoothing_window + 1):i + 1]]
            rows.append({"epoch": epoch, "kind": k.value, "accuracy": acc,
                         "smoothed": float(np.mean(window))})
    return rows


# ---------------------------------------------------------------------------
# Output formats
# ---------------------------------------------------------------------------

TRIAL_CSV_HEADER = ["episode", "kind", "query_class", "target_class", "other_class",
                    "s_target", "s_other", "chosen", "correct"]


def write_trial_records(path: Path, records: list[TrialRecord], meta: dict) -> None:
    rows = [(r.episode_index, r.kind, r.query_class, r.target_class, r.other_class,
             r.s_target, r.s_other, r.chosen_image_id, r.correct) for r in records]
    mio.write_csv(path, TRIAL_CSV_HEADER, rows, meta=meta)


def write_trial_records_json(path: Path, records: list[TrialRecord], meta: dict) -> None:
    mio.write_json(path, {"meta": meta, "records": [asdict(r) for r in records]})


def write_battery(path: Path, rows: list[BatteryRow], meta: dict) -> None:
    mio.write_csv(path, ["kind", "n_trials", "n_correct", "n_ties", "accuracy",
                         "ci_low", "ci_high"],
                  [(r.kind, r.n_trials, r.n_correct, r.n_ties, r.accuracy,
                    r.ci_low, r.ci_high) for r in rows], meta=meta)
