"""Parametric multimodal corpus generator.

Each class pairs a formant-sinusoid "word" recipe with a procedural shape
recipe. Training pairs use full scenes (target shape plus familiar
distractors and clutter); dev/test images are isolated objects on a uniform
background. Novel-class shapes never appear in training scenes unless the
leakage knob is explicitly enabled.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import io as mio
from .features import Waveform

log = logging.getLogger(__name__)

SOURCE_BUCKETS = ("bucket0", "bucket1")
# 16 families so desk-scale vocabularies give every class its own silhouette
SHAPE_FAMILIES = ("circle", "square", "triangle", "star", "ring", "cross",
                  "diamond", "hexagon", "ellipse", "pentagon", "crescent",
                  "arrow", "tee", "bowtie", "chevron", "plus3")

SCHEMA_VERSION = 1


class GenerationError(ValueError):
    """Invalid generation request or configuration."""


# ---------------------------------------------------------------------------
# Class specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhonemeUnit:
    """One steady-state unit: three formant frequencies and a duration range."""

    formants: tuple[float, float, float]
    duration_range: tuple[float, float]


@dataclass(frozen=True)
class VisualRecipe:
    shape: str
    hue: float
    texture_freq: float
    # non-empty: instance hue is drawn from these instead of `hue`
    hue_choices: tuple[float, ...] = ()


@dataclass(frozen=True)
class ClassSpec:
    name: str
    audio_recipe: tuple[PhonemeUnit, ...]
    visual_recipe: VisualRecipe
    split: str  # "familiar" | "novel"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "audio_recipe": [
                {"formants": list(u.formants), "duration_range": list(u.duration_range)}
                for u in self.audio_recipe
            ],
            "visual_recipe": asdict(self.visual_recipe),
        }

    @staticmethod
    def from_json(d: dict) -> "ClassSpec":
        units = tuple(
            PhonemeUnit(formants=tuple(u["formants"]), duration_range=tuple(u["duration_range"]))
            for u in d["audio_recipe"]
        )
        visual = dict(d["visual_recipe"])
        visual["hue_choices"] = tuple(visual.get("hue_choices", ()))
        return ClassSpec(name=d["name"], audio_recipe=units,
                         visual_recipe=VisualRecipe(**visual), split=d["split"])


def _stable_seed(*parts) -> np.random.Generator:
    """Deterministic generator derived from strings/ints only."""
    entropy = [zlib.crc32(str(p).encode("utf-8")) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def generate_vocabulary(n_familiar: int, n_novel: int, onset_overlap_pairs: int = 0,
                        seed: int = 0) -> list[ClassSpec]:
    """Generate mutually distinct class recipes; familiar classes first.

    Every class gets its own cell of a jittered formant grid, so class means
    stay acoustically separated even under per-instance pitch shifts.
    ``onset_overlap_pairs`` novel classes share their first phoneme unit with
    one familiar class each (an acoustic-neighborhood knob for anti-ME
    studies).
    """
    if n_familiar < 2 or n_novel < 2:
        raise GenerationError("need at least 2 familiar and 2 novel classes")
    if onset_overlap_pairs > min(n_familiar, n_novel):
        raise GenerationError("more onset-overlap pairs than available classes")
    rng = _stable_seed("vocabulary", seed)
    total = n_familiar + n_novel

    f1_lo, f1_hi = 300.0, 800.0
    f2_lo, f2_hi = 1000.0, 2400.0

    # all classes share one jittered formant grid: novel words interleave
    # with familiar ones (placing them outside the familiar range makes the
    # audio encoder extrapolate them into out-of-scale super-stimuli)
    gx = int(np.ceil(np.sqrt(total)))
    gy = int(np.ceil(total / gx))
    cells = [(i, j) for i in range(gx) for j in range(gy)]
    order = rng.permutation(len(cells))
    centers: list[tuple[float, float]] = []
    for i in range(total):
        ci, cj = cells[order[i]]
        centers.append((f1_lo + (ci + 0.3 + 0.4 * rng.uniform()) * (f1_hi - f1_lo) / gx,
                        f2_lo + (cj + 0.3 + 0.4 * rng.uniform()) * (f2_hi - f2_lo) / gy))

    specs: list[ClassSpec] = []
    familiar_hues: list[float] = []
    for i in range(total):
        split = "familiar" if i < n_familiar else "novel"
        name = f"fam{i:02d}" if split == "familiar" else f"nov{i - n_familiar:02d}"
        f1c, f2c = centers[i]
        n_units = int(rng.integers(2, 5))
        units = []
        for _ in range(n_units):
            f1 = float(np.clip(f1c + rng.uniform(-50.0, 50.0), 260.0, 840.0))
            f2 = float(np.clip(f2c + rng.uniform(-110.0, 110.0), 960.0, 2440.0))
            f3 = float(rng.uniform(2500.0, 3400.0))
            # short units keep desk-scale words mostly in the 0.3-0.5 s range
            lo = rng.uniform(0.045, 0.07)
            hi = lo + rng.uniform(0.01, 0.03)
            units.append(PhonemeUnit(formants=(f1, f2, f3), duration_range=(lo, hi)))
        shape = SHAPE_FAMILIES[i % len(SHAPE_FAMILIES)]
        texture = float(rng.uniform(2.0, 7.0))
        n_hues = max((n_familiar + 1) // 2, 2)
        if split == "familiar":
            # hues repeat across familiar classes, so color narrows the
            # candidates but silhouettes have to carry the final distinction
            hue = ((i % n_hues) * 0.381966) % 1.0
            familiar_hues.append(hue)
            recipe = VisualRecipe(shape=shape, hue=hue, texture_freq=texture)
        else:
            # novel objects wear familiar colors, drawn per instance: novel
            # images activate trained color detectors strongly, but color
            # never identifies which novel class an image belongs to
            palette = tuple(sorted(set(familiar_hues)))
            recipe = VisualRecipe(shape=shape, hue=palette[0],
                                  texture_freq=texture,
                                  hue_choices=palette)
        specs.append(ClassSpec(name=name, audio_recipe=tuple(units),
                               visual_recipe=recipe, split=split))
    # Overlay onset overlaps: novel class k copies familiar class k's first unit.
    for k in range(onset_overlap_pairs):
        fam = specs[k]
        nov = specs[n_familiar + k]
        new_units = (fam.audio_recipe[0],) + nov.audio_recipe[1:]
        specs[n_familiar + k] = ClassSpec(name=nov.name, audio_recipe=new_units,
                                          visual_recipe=nov.visual_recipe, split=nov.split)
    return specs


# ---------------------------------------------------------------------------
# Audio synthesis
# ---------------------------------------------------------------------------

FORMANT_AMPS = (1.0, 0.6, 0.35)
MIN_WORD_S = 0.3
MAX_WORD_S = 1.0


def synth_word_audio(spec: ClassSpec, instance_seed: int, sample_rate: int = 16000) -> Waveform:
    """Render one word instance: summed formant sinusoids per unit with
    per-instance pitch shift (+-10%), duration jitter (+-20%) and >=20 dB SNR
    noise; peak-normalized into [-1, 1]."""
    rng = _stable_seed("audio", spec.name, instance_seed)
    durations = np.array([rng.uniform(lo, hi) for (lo, hi) in
                          (u.duration_range for u in spec.audio_recipe)])
    durations *= rng.uniform(0.8, 1.2)
    total = durations.sum()
    if total < MIN_WORD_S:
        durations *= MIN_WORD_S / total
    elif total > MAX_WORD_S:
        durations *= MAX_WORD_S / total
    pitch = rng.uniform(0.9, 1.1)

    pieces = []
    for unit, dur in zip(spec.audio_recipe, durations):
        n = max(int(round(dur * sample_rate)), 1)
        t = np.arange(n) / sample_rate
        sig = np.zeros(n)
        for f, amp in zip(unit.formants, FORMANT_AMPS):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            sig += amp * np.sin(2.0 * np.pi * f * pitch * t + phase)
        edge = min(int(0.010 * sample_rate), n // 2)
        if edge > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
            sig[:edge] *= ramp
            sig[-edge:] *= ramp[::-1]
        pieces.append(sig)
    signal = np.concatenate(pieces)

    snr_db = rng.uniform(20.0, 40.0)
    sig_power = float(np.mean(signal ** 2))
    noise = rng.normal(size=signal.size) * np.sqrt(sig_power / (10.0 ** (snr_db / 10.0)))
    signal = signal + noise
    signal = 0.9 * signal / np.max(np.abs(signal))
    return Waveform(samples=signal, sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# Image synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    """Provenance record for one shape composited into an image."""

    class_name: str
    shape: str
    cx: float
    cy: float
    radius: float
    rotation: float


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray          # (3, H, W) in [0, 1]
    placements: tuple[Placement, ...]
    foreground_mask: np.ndarray  # (H, W) bool, union of placed shapes


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _shape_mask(shape: str, size: int, cx: float, cy: float, radius: float,
                rotation: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean mask plus local (u, v) coordinates for texturing."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = (xs - cx) / radius, (ys - cy) / radius
    cos_r, sin_r = np.cos(rotation), np.sin(rotation)
    u = dx * cos_r + dy * sin_r
    v = -dx * sin_r + dy * cos_r
    r = np.hypot(u, v)
    if shape == "circle":
        mask = r <= 1.0
    elif shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= 0.85
    elif shape == "triangle":
        mask = (v >= -0.62) & (np.abs(u) <= (1.0 - (v + 0.62) / 1.62) * 0.95) & (v <= 1.0)
    elif shape == "star":
        ang = np.arctan2(v, u)
        spikes = 0.55 + 0.45 * np.cos(5.0 * ang)
        mask = r <= spikes
    elif shape == "ring":
        mask = (r <= 1.0) & (r >= 0.55)
    elif shape == "cross":
        mask = ((np.abs(u) <= 0.32) | (np.abs(v) <= 0.32)) & (np.maximum(np.abs(u), np.abs(v)) <= 1.0)
    elif shape == "diamond":
        mask = (np.abs(u) + np.abs(v)) <= 1.0
    elif shape == "hexagon":
        mask = (np.abs(u) <= 0.9) & (np.abs(0.5 * u) + np.abs(0.866 * v) <= 0.78)
    elif shape == "ellipse":
        mask = (u ** 2 + (v / 0.55) ** 2) <= 1.0
    elif shape == "pentagon":
        ang = np.arctan2(v, u) + np.pi / 2.0
        sector = np.mod(ang, 2.0 * np.pi / 5.0) - np.pi / 5.0
        mask = r <= 0.95 * np.cos(np.pi / 5.0) / np.cos(sector)
    elif shape == "crescent":
        # thick C: a ring with one side opened, so the tips never pinch off
        mask = (r <= 1.0) & (r >= 0.45) & (u <= 0.35)
    elif shape == "arrow":
        shaft = (np.abs(v) <= 0.22) & (u >= -1.0) & (u <= 0.2)
        head = (u >= 0.2) & (u <= 1.0) & (np.abs(v) <= 0.6 * (1.0 - u) / 0.8)
        mask = shaft | head
    elif shape == "tee":
        bar = (np.abs(u) <= 1.0) & (v >= -1.0) & (v <= -0.5)
        stem = (np.abs(u) <= 0.24) & (v >= -0.5) & (v <= 1.0)
        mask = bar | stem
    elif shape == "bowtie":
        mask = (np.abs(u) <= 1.0) & (np.abs(v) <= np.maximum(0.7 * np.abs(u), 0.12))
    elif shape == "chevron":
        mask = (np.abs(u) <= 1.0) & (v - 0.55 * np.abs(u) >= -0.75) & \
               (v - 0.55 * np.abs(u) <= -0.15)
    elif shape == "plus3":
        mask = ((np.abs(u) <= 0.18) | (np.abs(v) <= 0.18) |
                (np.abs(u - v) * 0.7071 <= 0.18)) & (r <= 1.0)
    else:
        raise GenerationError(f"unknown shape family {shape!r}")
    return mask, u, v


def _paint_shape(pixels: np.ndarray, spec: ClassSpec, cx: float, cy: float,
                 radius: float, rotation: float, rng: np.random.Generator) -> np.ndarray:
    size = pixels.shape[1]
    mask, u, v = _shape_mask(spec.visual_recipe.shape, size, cx, cy, radius, rotation)
    # mild per-instance color jitter: color stays a usable (shared) cue but
    # silhouette carries most of the class identity
    recipe = spec.visual_recipe
    if recipe.hue_choices:
        base_hue = recipe.hue_choices[int(rng.integers(len(recipe.hue_choices)))]
    else:
        base_hue = recipe.hue
    hue = (base_hue + rng.uniform(-0.05, 0.05)) % 1.0
    rgb = _hsv_to_rgb(hue, rng.uniform(0.65, 0.85), rng.uniform(0.75, 0.9))
    theta = rng.uniform(0.0, np.pi)
    freq = spec.visual_recipe.texture_freq * rng.uniform(0.8, 1.2)
    stripes = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) / 2.0)
    shade = 0.8 + 0.2 * stripes
    for c in range(3):
        pixels[c][mask] = np.clip(rgb[c] * shade[mask], 0.0, 1.0)
    return mask


def _bounding_radius(radius: float) -> float:
    return radius * 1.3  # covers every family's farthest vertex


def _place_nonoverlapping(rng: np.random.Generator, size: int, radius: float,
                          existing: list[tuple[float, float, float]]) -> tuple[float, float, float]:
    """Rejection-sample a center; shrink deterministically if crowded."""
    r = radius
    for attempt in range(2000):
        if attempt and attempt % 40 == 0:
            r = max(r * 0.82, 1.5)
        margin = _bounding_radius(r) + 1.0
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        ok = all(np.hypot(cx - ex, cy - ey) >= _bounding_radius(r) + _bounding_radius(er) + 2.0
                 for ex, ey, er in existing)
        if ok:
            return cx, cy, r
    raise GenerationError("could not place shape without overlap")


def synth_image(spec: ClassSpec, mode: str, distractor_pool: list[ClassSpec],
                instance_seed: int, image_size: int = 64,
                n_distractors: int | None = None,
                leakage_pool: list[ClassSpec] | None = None) -> RenderedImage:
    """Render an isolated object or a cluttered scene.

    Scene mode composites the target at a random pose plus 0-3 familiar
    distractors; novel classes are rejected from the distractor pool.
    ``leakage_pool`` deliberately injects one extra (novel) shape and exists
    only for leakage experiments.
    """
    if mode not in ("scene", "isolated"):
        raise GenerationError(f"unknown image mode {mode!r}")
    for d in distractor_pool:
        if d.split != "familiar":
            raise GenerationError(f"distractor pool contains non-familiar class {d.name!r}")
    rng = _stable_seed("image", spec.name, mode, instance_seed)
    # per-instance background level: identical backgrounds would otherwise
    # produce exact similarity ties between isolated images
    pixels = np.full((3, image_size, image_size), rng.uniform(0.42, 0.58))
    placements: list[Placement] = []
    occupied: list[tuple[float, float, float]] = []
    fg = np.zeros((image_size, image_size), dtype=bool)

    if mode == "isolated":
        # scale overlaps the scene-object range so test objects stay
        # in-distribution for features learned on scenes
        radius = image_size * rng.uniform(0.18, 0.28)
        rotation = rng.uniform(0.0, np.pi / 6.0)
        cx = cy = (image_size - 1) / 2.0
        mask = _paint_shape(pixels, spec, cx, cy, radius, rotation, rng)
        placements.append(Placement(spec.name, spec.visual_recipe.shape, cx, cy, radius, rotation))
        fg |= mask
        return RenderedImage(pixels=pixels, placements=tuple(placements), foreground_mask=fg)

    # scene: background clutter first, shapes on top
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    gx, gy = rng.uniform(-0.06, 0.06, size=2)
    base = 0.45 + rng.uniform(0.0, 0.1)
    background = base + gx * (xs / image_size - 0.5) + gy * (ys / image_size - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        bx, by = rng.uniform(0, image_size, size=2)
        sigma = rng.uniform(6.0, 14.0)
        amp = rng.uniform(-0.08, 0.08)
        background += amp * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * sigma ** 2))
    background += rng.normal(0.0, 0.01, size=background.shape)
    tint = rng.uniform(0.92, 1.08, size=3)
    for c in range(3):
        pixels[c] = np.clip(background * tint[c], 0.0, 1.0)

    to_place = [spec]
    k = int(rng.integers(0, 4)) if n_distractors is None else n_distractors
    if distractor_pool:
        pool = [d for d in distractor_pool if d.name != spec.name]
        for _ in range(k):
            if pool:
                to_place.append(pool[int(rng.integers(len(pool)))])
    if leakage_pool:
        to_place.append(leakage_pool[int(rng.integers(len(leakage_pool)))])

    for shape_spec in to_place:
        # objects must span several attention cells or silhouettes are
        # invisible to the conv stack and color shortcuts take over
        radius = image_size * rng.uniform(0.14, 0.22)
        cx, cy, radius = _place_nonoverlapping(rng, image_size, radius, occupied)
        rotation = rng.uniform(0.0, 2.0 * np.pi)
        mask = _paint_shape(pixels, shape_spec, cx, cy, radius, rotation, rng)
        placements.append(Placement(shape_spec.name, shape_spec.visual_recipe.shape,
                                    cx, cy, radius, rotation))
        occupied.append((cx, cy, radius))
        fg |= mask
    return RenderedImage(pixels=pixels, placements=tuple(placements), foreground_mask=fg)


def count_components(mask: np.ndarray) -> int:
    """4-connected component count; test oracle for scene composition."""
    visited = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    count = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not visited[i, j]:
                count += 1
                stack = [(i, j)]
                visited[i, j] = True
                while stack:
                    y, x = stack.pop()
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not visited[ny, nx]:
                            visited[ny, nx] = True
                            stack.append((ny, nx))
    return count


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    n_familiar: int = 8
    n_novel: int = 6
    onset_overlap_pairs: int = 0
    train_pairs_per_class: int = 60
    dev_per_class: int = 2
    test_audio_per_class: int = 10
    test_images_per_class: int = 10
    image_size: int = 64
    sample_rate: int = 16000
    leakage_rate: float = 0.0
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AudioItem:
    id: str
    class_name: str
    split: str
    bucket: str
    path: str


@dataclass(frozen=True)
class ImageItem:
    id: str
    class_name: str
    split: str
    bucket: str
    path: str
    is_isolated: bool
    placements: tuple[str, ...]


@dataclass
class DatasetManifest:
    config: DatasetConfig
    classes: dict[str, ClassSpec]
    audio: dict[str, AudioItem]
    images: dict[str, ImageItem]
    pairs: dict[str, list[tuple[str, str, str]]]  # split -> (audio_id, image_id, class)

    @property
    def familiar_classes(self) -> list[str]:
        return sorted(n for n, s in self.classes.items() if s.split == "familiar")

    @property
    def novel_classes(self) -> list[str]:
        return sorted(n for n, s in self.classes.items() if s.split == "novel")

    def audio_ids(self, split: str | None = None, class_name: str | None = None) -> list[str]:
        return sorted(a.id for a in self.audio.values()
                      if (split is None or a.split == split)
                      and (class_name is None or a.class_name == class_name))

    def image_ids(self, split: str | None = None, class_name: str | None = None,
                  bucket: str | None = None) -> list[str]:
        return sorted(i.id for i in self.images.values()
                      if (split is None or i.split == split)
                      and (class_name is None or i.class_name == class_name)
                      and (bucket is None or i.bucket == bucket))

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.config.seed,
            "config": self.config.to_json(),
            "config_hash": mio.config_hash(self.config.to_json()),
            "classes": [self.classes[n].to_json() for n in sorted(self.classes)],
            "audio": [asdict(self.audio[a]) for a in sorted(self.audio)],
            "images": [{**asdict(self.images[i]), "placements": list(self.images[i].placements)}
                       for i in sorted(self.images)],
            "pairs": {split: [list(p) for p in ps] for split, ps in sorted(self.pairs.items())},
        }

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise GenerationError(f"unsupported manifest schema {d.get('schema_version')!r}")
        config = DatasetConfig(**d["config"])
        classes = {c["name"]: ClassSpec.from_json(c) for c in d["classes"]}
        audio = {a["id"]: AudioItem(**a) for a in d["audio"]}
        images = {}
        for i in d["images"]:
            i = dict(i)
            i["placements"] = tuple(i["placements"])
            images[i["id"]] = ImageItem(**i)
        pairs = {split: [tuple(p) for p in ps] for split, ps in d["pairs"].items()}
        return DatasetManifest(config=config, classes=classes, audio=audio,
                               images=images, pairs=pairs)


def build_dataset(cfg: DatasetConfig, out_dir: Path) -> DatasetManifest:
    """Generate vocabulary, synthesize every instance, and write the dataset
    directory (manifest.json, audio/*.f32 + sidecars, images/*.img)."""
    if cfg.n_novel < 2:
        raise GenerationError("need at least 2 novel classes (ME test impossible without them)")
    if cfg.train_pairs_per_class < 1 or cfg.dev_per_class < 1:
        raise GenerationError("per-class instance counts insufficient")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    vocab = generate_vocabulary(cfg.n_familiar, cfg.n_novel, cfg.onset_overlap_pairs, cfg.seed)
    classes = {s.name: s for s in vocab}
    familiar = [s for s in vocab if s.split == "familiar"]
    bucket_rng = _stable_seed("buckets", cfg.seed)
    leak_rng = _stable_seed("leakage", cfg.seed)
    novel_specs = [s for s in vocab if s.split == "novel"]

    audio: dict[str, AudioItem] = {}
    images: dict[str, ImageItem] = {}
    pairs: dict[str, list[tuple[str, str, str]]] = {"train": [], "dev": [], "test": []}

    def add_audio(spec: ClassSpec, split: str, k: int) -> str:
        aid = f"a-{spec.name}-{split}-{k:03d}"
        wave = synth_word_audio(spec, instance_seed=_instance_seed(cfg.seed, aid),
                                sample_rate=cfg.sample_rate)
        mio.write_waveform(out_dir / "audio" / f"{aid}.f32", wave.samples, wave.sample_rate)
        bucket = SOURCE_BUCKETS[int(bucket_rng.integers(2))]
        audio[aid] = AudioItem(id=aid, class_name=spec.name, split=split, bucket=bucket,
                               path=f"audio/{aid}.f32")
        return aid

    def add_image(spec: ClassSpec, split: str, k: int, mode: str) -> str:
        iid = f"i-{spec.name}-{split}-{k:03d}"
        leakage = None
        if mode == "scene" and cfg.leakage_rate > 0 and leak_rng.uniform() < cfg.leakage_rate:
            leakage = novel_specs
        render = synth_image(spec, mode=mode, distractor_pool=familiar,
                             instance_seed=_instance_seed(cfg.seed, iid),
                             image_size=cfg.image_size, leakage_pool=leakage)
        mio.write_image(out_dir / "images" / f"{iid}.img", render.pixels)
        bucket = SOURCE_BUCKETS[int(bucket_rng.integers(2))]
        images[iid] = ImageItem(id=iid, class_name=spec.name, split=split, bucket=bucket,
                                path=f"images/{iid}.img", is_isolated=(mode == "isolated"),
                                placements=tuple(p.class_name for p in render.placements))
        return iid

    for spec in familiar:
        for k in range(cfg.train_pairs_per_class):
            aid = add_audio(spec, "train", k)
            iid = add_image(spec, "train", k, "scene")
            pairs["train"].append((aid, iid, spec.name))
        for k in range(cfg.dev_per_class):
            aid = add_audio(spec, "dev", k)
            iid = add_image(spec, "dev", k, "isolated")
            pairs["dev"].append((aid, iid, spec.name))
    for spec in vocab:
        n = max(cfg.test_audio_per_class, cfg.test_images_per_class)
        for k in range(n):
            aid = add_audio(spec, "test", k) if k < cfg.test_audio_per_class else None
            iid = add_image(spec, "test", k, "isolated") if k < cfg.test_images_per_class else None
            if aid and iid:
                pairs["test"].append((aid, iid, spec.name))

    manifest = DatasetManifest(config=cfg, classes=classes, audio=audio, images=images, pairs=pairs)
    violations = validate_manifest(manifest)
    if violations:
        raise GenerationError("generated manifest violates invariants: " + "; ".join(violations))
    mio.write_json(out_dir / "manifest.json", manifest.to_json())
    return manifest


def _instance_seed(global_seed: int, item_id: str) -> int:
    return (global_seed * 1_000_003 + zlib.crc32(item_id.encode())) % (2 ** 31)


def load_manifest(dataset_dir: Path) -> DatasetManifest:
    return DatasetManifest.from_json(mio.read_json(Path(dataset_dir) / "manifest.json"))


def validate_manifest(m: DatasetManifest, min_train_per_class: int | None = None) -> list[str]:
    """Returns invariant violations (empty list when the manifest is sound)."""
    problems = []
    novel = set(m.novel_classes)
    for split in ("train", "dev"):
        for item in list(m.audio.values()) + list(m.images.values()):
            if item.split == split and item.class_name in novel:
                problems.append(f"{split} contains novel-class item {item.id}")
    for img in m.images.values():
        if img.split == "test" and not img.is_isolated:
            problems.append(f"test image {img.id} is not isolated")
        if img.split == "train" and img.is_isolated:
            problems.append(f"train image {img.id} is not a scene")
        if img.split == "train" and m.config.leakage_rate == 0:
            leaked = [p for p in img.placements if p in novel]
            if leaked:
                problems.append(f"train scene {img.id} contains novel shapes {leaked}")
    # split disjointness is structural (ids embed the split); verify anyway
    for coll in (m.audio, m.images):
        by_split: dict[str, set[str]] = {}
        for item in coll.values():
            by_split.setdefault(item.split, set()).add(item.id)
        splits = sorted(by_split)
        for i, s1 in enumerate(splits):
            for s2 in splits[i + 1:]:
                overlap = by_split[s1] & by_split[s2]
                if overlap:
                    problems.append(f"ids shared between {s1} and {s2}: {sorted(overlap)[:3]}")
    min_needed = m.config.train_pairs_per_class if min_train_per_class is None else min_train_per_class
    for cls in m.familiar_classes:
        n_audio = len(m.audio_ids(split="train", class_name=cls))
        n_img = len(m.image_ids(split="train", class_name=cls))
        if n_audio < min_needed or n_img < min_needed:
            problems.append(f"class {cls} under-provisioned: {n_audio} audio / {n_img} images")
    return problems
