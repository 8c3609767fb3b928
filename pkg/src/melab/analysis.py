"""Representation-space analyses: the four cross-modal similarity groups
(trained vs untrained), per-novel-word ME rates, the familiar-pick matrix,
audio-embedding cosine similarities, and per-class drilldowns.

Summaries are 5-number (min/quartiles/max) box statistics rather than
density estimates: deterministic and directly testable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as mio
from . import model as md
from .datagen import DatasetManifest
from .evaluation import TrialRecord
from .training import FeatureStore, score_pairs

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityGroupSummary:
    label: str
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    def __post_init__(self):
        if self.count <= 0:
            raise AnalysisError(f"group {self.label!r} is empty")
        if not (self.minimum <= self.q1 <= self.median <= self.q3 <= self.maximum):
            raise AnalysisError(f"group {self.label!r} quartiles out of order")


def _summarize(label: str, values: np.ndarray) -> SimilarityGroupSummary:
    if values.size == 0:
        raise AnalysisError(f"group {label!r} is empty")
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return SimilarityGroupSummary(label=label, count=int(values.size),
                                  minimum=float(q[0]), q1=float(q[1]), median=float(q[2]),
                                  q3=float(q[3]), maximum=float(q[4]))


class EmbeddingCache:
    """Test-split audio/image embeddings plus the full similarity matrix."""

    def __init__(self, params: md.ModelParams, feats: FeatureStore,
                 manifest: DatasetManifest):
        feats.load_split("test")
        self.manifest = manifest
        self.audio_ids = manifest.audio_ids(split="test")
        self.image_ids = manifest.image_ids(split="test")
        self.s = score_pairs(params, feats, self.audio_ids, self.image_ids)
        self.arow = {a: i for i, a in enumerate(self.audio_ids)}
        self.icol = {i: j for j, i in enumerate(self.image_ids)}
        with ad.no_grad():
            emb = md.encode_audio_batch([feats.mel(a) for a in self.audio_ids], params)
        self.audio_emb = {a: emb.data[i] for i, a in enumerate(self.audio_ids)}

    def score(self, audio_id: str, image_id: str) -> float:
        return float(self.s[self.arow[audio_id], self.icol[image_id]])


SIMILARITY_GROUPS = {
    "A": "familiar audio vs same-class familiar image",
    "B": "familiar audio vs other-class familiar image",
    "C": "novel audio vs novel image",
    "D": "novel audio vs familiar image",
}


def similarity_distributions(params: md.ModelParams, feats: FeatureStore,
                             manifest: DatasetManifest, seed: int,
                             pairs_per_group: int = 2000) -> dict[str, SimilarityGroupSummary]:
    """Sampled cross-modal similarity summaries for the four groups; call on
    an untrained init for the before-training comparison."""
    cache = EmbeddingCache(params, feats, manifest)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x73696D73]))
    fam = manifest.familiar_classes
    nov = manifest.novel_classes
    aud = {c: manifest.audio_ids(split="test", class_name=c) for c in fam + nov}
    img = {c: manifest.image_ids(split="test", class_name=c) for c in fam + nov}

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    def sample_group(audio_classes, image_classes, same_class) -> np.ndarray:
        values = np.empty(pairs_per_group)
        for i in range(pairs_per_group):
            ac = pick(audio_classes)
            if same_class is True:
                ic = ac
            elif same_class is False:
                ic = ac
                while ic == ac:
                    ic = pick(image_classes)
            else:
                ic = pick(image_classes)
            values[i] = cache.score(pick(aud[ac]), pick(img[ic]))
        return values

    return {
        "A": _summarize("A", sample_group(fam, fam, True)),
        "B": _summarize("B", sample_group(fam, fam, False)),
        "C": _summarize("C", sample_group(nov, nov, None)),
        "D": _summarize("D", sample_group(nov, fam, None)),
    }


def per_word_me(records: list[TrialRecord]) -> list[dict]:
    """Per-novel-class ME accuracy, ascending; classes below 50% are flagged
    anti-ME. Classes without trials are dropped with a warning."""
    me = [r for r in records if r.kind == "me-familiar-novel"]
    by_class: dict[str, list[TrialRecord]] = {}
    for r in me:
        by_class.setdefault(r.query_class, []).append(r)
    rows = []
    for cls, rs in by_class.items():
        if not rs:
            log.warning("per_word_me: class %s has no trials, skipping", cls)
            continue
        acc = float(np.mean([r.correct for r in rs]))
        rows.append({"class": cls, "accuracy": acc, "n_trials": len(rs),
                     "anti_me": acc < 0.5})
    rows.sort(key=lambda r: (r["accuracy"], r["class"]))
    return rows


def familiar_pick_matrix(records: list[TrialRecord]) -> tuple[list[str], list[str],
                                                              np.ndarray, np.ndarray]:
    """Percentage of ME trials with novel query n and familiar image f where
    the familiar image was chosen. Cells never co-sampled are NaN."""
    me = [r for r in records if r.kind == "me-familiar-novel"]
    novel = sorted({r.query_class for r in me})
    familiar = sorted({r.other_class for r in me})
    counts = np.zeros((len(novel), len(familiar)))
    picks = np.zeros_like(counts)
    ni = {c: i for i, c in enumerate(novel)}
    fi = {c: i for i, c in enumerate(familiar)}
    for r in me:
        i, j = ni[r.query_class], fi[r.other_class]
        counts[i, j] += 1
        if r.chosen_image_id == r.other_image_id:
            picks[i, j] += 1
    with np.errstate(invalid="ignore"):
        matrix = np.where(counts > 0, 100.0 * picks / np.maximum(counts, 1), np.nan)
    return novel, familiar, matrix, counts


def audio_cosine_matrix(params: md.ModelParams, feats: FeatureStore,
                        manifest: DatasetManifest, classes: list[str] | None = None,
                        n_instances: int = 5) -> tuple[list[str], np.ndarray]:
    """Mean pairwise cosine similarity (x100) between audio embeddings of
    each class pair; the diagonal is the within-class mean over distinct
    instance pairs."""
    feats.load_split("test")
    classes = classes or (manifest.novel_classes + manifest.familiar_classes)
    embs: dict[str, np.ndarray] = {}
    for cls in classes:
        ids = manifest.audio_ids(split="test", class_name=cls)[:n_instances]
        if not ids:
            raise AnalysisError(f"no test audio for class {cls!r}")
        with ad.no_grad():
            e = md.encode_audio_batch([feats.mel(a) for a in ids], params).data
        norms = np.linalg.norm(e, axis=1)
        if np.any(norms == 0):
            raise AnalysisError(f"zero-norm audio embedding in class {cls!r}")
        embs[cls] = e / norms[:, None]
    k = len(classes)
    matrix = np.zeros((k, k))
    for i, ci in enumerate(classes):
        for j, cj in enumerate(classes):
            sims = embs[ci] @ embs[cj].T
            if i == j:
                n = sims.shape[0]
                if n < 2:
                    matrix[i, j] = 100.0
                    continue
                off = sims[~np.eye(n, dtype=bool)]
                matrix[i, j] = 100.0 * float(off.mean())
            else:
                matrix[i, j] = 100.0 * float(sims.mean())
    return classes, matrix


DRILLDOWN_GROUPS = {
    "A": "class audio vs class images",
    "B": "class audio vs other novel images",
    "C": "class audio vs familiar images",
}


def class_drilldown(params: md.ModelParams, feats: FeatureStore,
                    manifest: DatasetManifest, novel_class: str,
                    max_pairs: int = 4000, seed: int = 0) -> dict[str, SimilarityGroupSummary]:
    """Three-group similarity summary isolating whether a class's audio or
    images drive its (anti-)ME behavior. Enumerates all pairs up to
    ``max_pairs`` per group, sampling beyond that."""
    if novel_class not in manifest.novel_classes:
        raise AnalysisError(f"{novel_class!r} is not a novel class")
    cache = EmbeddingCache(params, feats, manifest)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x64726C6C]))
    qa = manifest.audio_ids(split="test", class_name=novel_class)
    own = manifest.image_ids(split="test", class_name=novel_class)
    other_novel = [i for c in manifest.novel_classes if c != novel_class
                   for i in manifest.image_ids(split="test", class_name=c)]
    familiar = [i for c in manifest.familiar_classes
                for i in manifest.image_ids(split="test", class_name=c)]

    def group(images) -> np.ndarray:
        pairs = [(a, i) for a in qa for i in images]
        if len(pairs) > max_pairs:
            idx = rng.choice(len(pairs), size=max_pairs, replace=False)
            pairs = [pairs[int(i)] for i in idx]
        return np.array([cache.score(a, i) for a, i in pairs])

    return {
        "A": _summarize("A", group(own)),
        "B": _summarize("B", group(other_novel)),
        "C": _summarize("C", group(familiar)),
    }


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def write_group_summaries(path: Path, groups: dict[str, SimilarityGroupSummary],
                          meta: dict) -> None:
    """Long-format (group, statistic, value) rows, plot-ready."""
    rows = []
    for label in sorted(groups):
        g = groups[label]
        for stat in ("count", "minimum", "q1", "median", "q3", "maximum"):
            rows.append((label, stat, getattr(g, stat)))
    mio.write_csv(path, ["group", "statistic", "value"], rows, meta=meta)


def write_matrix(path: Path, row_labels: list[str], col_labels: list[str],
                 matrix: np.ndarray, meta: dict) -> None:
    rows = []
    for i, rl in enumerate(row_labels):
        rows.append([rl] + [("" if np.isnan(matrix[i, j]) else repr(float(matrix[i, j])))
                            for j in range(len(col_labels))])
    mio.write_csv(path, ["class"] + list(col_labels), rows, meta=meta)


def write_per_word(path: Path, rows: list[dict], meta: dict) -> None:
    mio.write_csv(path, ["class", "accuracy", "n_trials", "anti_me"],
                  [(r["class"], r["accuracy"], r["n_trials"], r["anti_me"]) for r in rows],
                  meta=meta)
