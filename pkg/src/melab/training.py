"""Training: contrastive batch sampling, the epoch loop with Adam and
validation-based early stopping, per-epoch checkpointing, and the two
self-supervised proxy pretrainers used by the initialization experiments.

An epoch is one pass over every training audio item as anchor, each paired
with a random matching image; ``anchors_per_step`` anchors share one Adam
step (their losses are averaged) so encoder batches stay large enough for
the CPU to be busy with numpy rather than Python.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as mio
from . import losses as ls
from . import model as md
from .datagen import DatasetManifest
from .features import (IMAGENET_MEANS, IMAGENET_STDS, MelConfig, MelSpectrogram,
                       mel_spectrogram, normalize_image, pad_or_truncate, Waveform)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    """Loss went non-finite; training aborted with a diagnostic."""


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mattnet"
    n_pos: int = 5
    n_neg: int = 11
    max_epochs: int = 100
    anchors_per_step: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    patience: int = 10
    seed: int = 0
    margin: float = 1.0
    temperature: float = 100.0
    audio_pretrained: bool = False
    vision_pretrained: bool = False
    target_frames: int = 256

    def __post_init__(self):
        if self.n_pos < 0 or self.n_neg < 1:
            raise ValueError("need n_pos >= 0 and n_neg >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.loss not in ls.LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_acc: float
    ckpt_path: str


@dataclass
class TrainLog:
    """Per-epoch statistics. Wall times are measured but never serialized,
    so identical runs produce byte-identical log files."""

    entries: list[EpochStats] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        return [(e.epoch, e.loss, e.val_acc, e.ckpt_path) for e in self.entries]

    def __eq__(self, other) -> bool:
        return isinstance(other, TrainLog) and self.rows() == other.rows()


@dataclass
class SampledBatch:
    """Item ids drawn for one anchor's contrastive batch."""

    anchor_class: str
    anchor_audio_id: str
    anchor_image_id: str
    pos_audio_ids: list[str]
    pos_image_ids: list[str]
    neg_audio_ids: list[str]
    neg_image_ids: list[str]

    def all_audio_ids(self) -> list[str]:
        return [self.anchor_audio_id] + self.pos_audio_ids + self.neg_audio_ids

    def all_image_ids(self) -> list[str]:
        return [self.anchor_image_id] + self.pos_image_ids + self.neg_image_ids


def sample_contrastive_batch(manifest: DatasetManifest, anchor_audio_id: str,
                             cfg: TrainConfig, rng: np.random.Generator) -> SampledBatch:
    """Draw positives from the anchor class and negatives from other familiar
    classes, train split only; the anchor is excluded from its own positives."""
    anchor = manifest.audio[anchor_audio_id]
    cls = anchor.class_name
    if anchor.class_name not in manifest.familiar_classes:
        raise TrainingError(f"anchor {anchor_audio_id} is not a familiar-class item")
    aud_pool = [a for a in manifest.audio_ids(split="train", class_name=cls)
                if a != anchor_audio_id]
    img_all = manifest.image_ids(split="train", class_name=cls)
    anchor_image_id = img_all[int(rng.integers(len(img_all)))]
    img_pool = [i for i in img_all if i != anchor_image_id]
    if len(aud_pool) < cfg.n_pos or len(img_pool) < cfg.n_pos:
        raise TrainingError(f"class {cls} pool too small for n_pos={cfg.n_pos}")
    familiar = set(manifest.familiar_classes)
    neg_aud_pool = [a for a in manifest.audio_ids(split="train")
                    if manifest.audio[a].class_name != cls
                    and manifest.audio[a].class_name in familiar]
    neg_img_pool = [i for i in manifest.image_ids(split="train")
                    if manifest.images[i].class_name != cls
                    and manifest.images[i].class_name in familiar]
    if len(neg_aud_pool) < cfg.n_neg or len(neg_img_pool) < cfg.n_neg:
        raise TrainingError(f"negative pools too small for n_neg={cfg.n_neg}")

    def draw(pool, k):
        idx = rng.choice(len(pool), size=k, replace=False)
        return [pool[int(i)] for i in idx]

    return SampledBatch(
        anchor_class=cls,
        anchor_audio_id=anchor_audio_id,
        anchor_image_id=anchor_image_id,
        pos_audio_ids=draw(aud_pool, cfg.n_pos),
        pos_image_ids=draw(img_pool, cfg.n_pos),
        neg_audio_ids=draw(neg_aud_pool, cfg.n_neg),
        neg_image_ids=draw(neg_img_pool, cfg.n_neg),
    )


# ---------------------------------------------------------------------------
# Feature store
# ---------------------------------------------------------------------------

class FeatureStore:
    """Featurized items loaded once per split and kept in memory, including
    the first-conv column cache for images."""

    def __init__(self, manifest: DatasetManifest, dataset_dir: Path,
                 mel_cfg: MelConfig = MelConfig(), means=IMAGENET_MEANS, stds=IMAGENET_STDS):
        self.manifest = manifest
        self.dataset_dir = Path(dataset_dir)
        self.mel_cfg = mel_cfg
        self.means = means
        self.stds = stds
        self.mels: dict[str, MelSpectrogram] = {}
        self.images: dict[str, np.ndarray] = {}
        self.cols: dict[str, np.ndarray] = {}
        self._loaded_splits: set[str] = set()

    def load_split(self, split: str) -> None:
        if split in self._loaded_splits:
            return
        for aid in self.manifest.audio_ids(split=split):
            samples, sr = mio.read_waveform(self.dataset_dir / self.manifest.audio[aid].path)
            mel = mel_spectrogram(Waveform(samples=samples, sample_rate=sr), self.mel_cfg)
            self.mels[aid] = pad_or_truncate(mel, self.mel_cfg.target_frames)
        for iid in self.manifest.image_ids(split=split):
            raw = mio.read_image(self.dataset_dir / self.manifest.images[iid].path)
            img = normalize_image(raw, self.means, self.stds)
            self.images[iid] = img
            self.cols[iid] = md.image_cols(img)
        self._loaded_splits.add(split)

    def mel(self, aid: str) -> MelSpectrogram:
        return self.mels[aid]

    def image(self, iid: str) -> np.ndarray:
        return self.images[iid]

    def image_col(self, iid: str) -> np.ndarray:
        return self.cols[iid]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def build_dev_trials(manifest: DatasetManifest) -> list[tuple[str, str, str]]:
    """Exhaustive 2-way familiar trials over the dev split:
    (query audio, same-class image, other-class image)."""
    trials = []
    for aid in manifest.audio_ids(split="dev"):
        cls = manifest.audio[aid].class_name
        for target in manifest.image_ids(split="dev", class_name=cls):
            for other in manifest.image_ids(split="dev"):
                if manifest.images[other].class_name != cls:
                    trials.append((aid, target, other))
    return trials


def score_pairs(params: md.ModelParams, feats: FeatureStore, audio_ids: list[str],
                image_ids: list[str]) -> np.ndarray:
    """(n_audio, n_image) similarity matrix with embeddings computed once."""
    with ad.no_grad():
        a = md.encode_audio_batch([feats.mel(x) for x in audio_ids], params).data
        v = md.encode_image_batch([feats.image(x) for x in image_ids], params,
                                  cols=[feats.image_col(x) for x in image_ids]).data
    # S = max over cells of dot(word, cell)
    return np.einsum("ad,bnd->abn", a, v).max(axis=2)


def validate(params: md.ModelParams, feats: FeatureStore,
             trials: list[tuple[str, str, str]]) -> float:
    """Fraction of 2-way familiar trials won strictly; ties count as wrong."""
    if not trials:
        raise TrainingError("empty validation trial list")
    feats.load_split("dev")
    audio_ids = sorted({t[0] for t in trials})
    image_ids = sorted({t[1] for t in trials} | {t[2] for t in trials})
    s = score_pairs(params, feats, audio_ids, image_ids)
    arow = {a: i for i, a in enumerate(audio_ids)}
    icol = {im: i for i, im in enumerate(image_ids)}
    wins = sum(1 for (a, t, o) in trials if s[arow[a], icol[t]] > s[arow[a], icol[o]])
    return wins / len(trials)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best: md.Checkpoint
    log: TrainLog
    checkpoint_paths: list[str]
    touched_audio_ids: set[str]
    touched_image_ids: set[str]
    config_hash: str


def _encode_group(batches: list[SampledBatch], params: md.ModelParams,
                  feats: FeatureStore, manifest: DatasetManifest,
                  cfg: TrainConfig) -> ad.Tensor:
    """Average loss over a group of anchors, encoded as one batch."""
    audio_ids: list[str] = []
    image_ids: list[str] = []
    for b in batches:
        audio_ids.extend(b.all_audio_ids())
        image_ids.extend(b.all_image_ids())
    a_emb = md.encode_audio_batch([feats.mel(x) for x in audio_ids], params)
    v_emb = md.encode_image_batch([feats.image(x) for x in image_ids], params,
                                  cols=[feats.image_col(x) for x in image_ids])
    novel = frozenset(manifest.novel_classes)
    losses = []
    a_off = 0
    v_off = 0
    for b in batches:
        na, ni = 1 + cfg.n_pos + cfg.n_neg, 1 + cfg.n_pos + cfg.n_neg
        a_slice = [a_emb[a_off + k] for k in range(na)]
        v_slice = [v_emb[v_off + k] for k in range(ni)]
        batch = ls.ContrastiveBatch(
            anchor_audio=a_slice[0], anchor_image=v_slice[0],
            pos_audio=a_slice[1:1 + cfg.n_pos], pos_images=v_slice[1:1 + cfg.n_pos],
            neg_audio=a_slice[1 + cfg.n_pos:], neg_images=v_slice[1 + cfg.n_pos:],
            anchor_class=b.anchor_class,
            pos_audio_classes=[manifest.audio[x].class_name for x in b.pos_audio_ids],
            pos_image_classes=[manifest.images[x].class_name for x in b.pos_image_ids],
            neg_audio_classes=[manifest.audio[x].class_name for x in b.neg_audio_ids],
            neg_image_classes=[manifest.images[x].class_name for x in b.neg_image_ids],
            novel_classes=novel,
        )
        losses.append(ls.compute_loss(cfg.loss, batch, margin=cfg.margin,
                                      temperature=cfg.temperature))
        a_off += na
        v_off += ni
    stacked = ad.concat([ad.reshape(l, (1,)) for l in losses], axis=0)
    return ad.reduce_mean(stacked)


def train(cfg: TrainConfig, manifest: DatasetManifest, dataset_dir: Path,
          run_dir: Path | None = None, model_cfg: md.ModelConfig = md.ModelConfig(),
          mel_cfg: MelConfig | None = None,
          pretrain_artifacts: dict[str, dict[str, np.ndarray]] | None = None,
          resume_from: md.Checkpoint | None = None) -> TrainResult:
    """Full training run; returns the best (earliest on val-accuracy ties)
    checkpoint, the log, and the audited set of touched item ids."""
    mel_cfg = mel_cfg or MelConfig(n_mels=model_cfg.n_mels, target_frames=cfg.target_frames)
    feats = FeatureStore(manifest, dataset_dir, mel_cfg)
    feats.load_split("train")
    feats.load_split("dev")
    cfg_hash = mio.config_hash({"train": cfg.to_json(), "model": model_cfg.to_json(),
                                "dataset": manifest.config.to_json()})

    if resume_from is not None:
        params = resume_from.params
        adam = resume_from.adam or ad.AdamState(learning_rate=cfg.learning_rate,
                                                beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                                epsilon=cfg.adam_epsilon)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        start_epoch = resume_from.epoch + 1
    else:
        strategy = md.InitStrategy(audio_pretrained=cfg.audio_pretrained,
                                   vision_pretrained=cfg.vision_pretrained)
        params = md.init_params(strategy, cfg.seed, model_cfg, pretrain_artifacts)
        adam = ad.AdamState(learning_rate=cfg.learning_rate, beta1=cfg.adam_beta1,
                            beta2=cfg.adam_beta2, epsilon=cfg.adam_epsilon)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261496E]))
        start_epoch = 1

    anchors = manifest.audio_ids(split="train")
    dev_trials = build_dev_trials(manifest)
    tlog = TrainLog()
    touched_audio: set[str] = set()
    touched_images: set[str] = set()
    ckpt_paths: list[str] = []
    best_acc = -1.0
    best_ckpt: md.Checkpoint | None = None
    no_improve = 0

    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(anchors))
        step_losses = []
        for lo in range(0, len(order), cfg.anchors_per_step):
            group_ids = [anchors[int(i)] for i in order[lo:lo + cfg.anchors_per_step]]
            batches = [sample_contrastive_batch(manifest, aid, cfg, rng) for aid in group_ids]
            for b in batches:
                touched_audio.update(b.all_audio_ids())
                touched_images.update(b.all_image_ids())
            try:
                loss = _encode_group(batches, params, feats, manifest, cfg)
                grads = ad.gradient(loss, list(params.tensors.values()))
            except ad.NonFiniteError as err:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {lo // cfg.anchors_per_step}: {err}"
                ) from err
            step_losses.append(float(loss.data))
            named = {name: grads[t] for name, t in params.tensors.items()}
            arrays, adam = ad.adam_update(params.arrays(), named, adam)
            params = params.with_arrays(arrays)

        val_acc = validate(params, feats, dev_trials)
        ckpt = md.Checkpoint(params=params, adam=adam, epoch=epoch,
                             config_fingerprint=cfg_hash,
                             rng_state=rng.bit_generator.state)
        rel_path = f"checkpoints/epoch_{epoch:04d}.ckpt"
        if run_dir is not None:
            md.save_checkpoint(run_dir / rel_path, ckpt)
            ckpt_paths.append(rel_path)
        tlog.entries.append(EpochStats(epoch=epoch, loss=float(np.mean(step_losses)),
                                       val_acc=val_acc, ckpt_path=rel_path))
        tlog.wall_times.append(time.perf_counter() - t0)
        log.info("epoch %d: loss %.3f val_acc %.3f (%.1fs)", epoch,
                 tlog.entries[-1].loss, val_acc, tlog.wall_times[-1])

        if val_acc > best_acc:
            best_acc = val_acc
            best_ckpt = ckpt
            no_improve = 0
        else:
            no_improve += 1
            if no_improve >= max(cfg.patience, 1):
                break

    assert best_ckpt is not None
    return TrainResult(best=best_ckpt, log=tlog, checkpoint_paths=ckpt_paths,
                       touched_audio_ids=touched_audio, touched_image_ids=touched_images,
                       config_hash=cfg_hash)


def write_train_log(run_dir: Path, result: TrainResult, seed: int,
                    config_hash: str | None = None) -> None:
    chash = config_hash or result.config_hash
    meta = {"config_hash": chash, "seed": seed}
    mio.write_csv(Path(run_dir) / "train_log.csv", ["epoch", "loss", "val_acc", "ckpt_path"],
                  result.log.rows(), meta=meta)
    mio.write_json(Path(run_dir) / "train_log.json", {
        "config_hash": chash,
        "seed": seed,
        "best_epoch": result.best.epoch,
        "entries": [asdict(e) for e in result.log.entries],
    })


# ---------------------------------------------------------------------------
# Proxy pretraining: vision (instance discrimination over augmented scenes)
# ---------------------------------------------------------------------------

def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    rc = np.where(delta > 0, (maxc - r) / np.maximum(delta, 1e-12), 0.0)
    gc = np.where(delta > 0, (maxc - g) / np.maximum(delta, 1e-12), 0.0)
    bc = np.where(delta > 0, (maxc - b) / np.maximum(delta, 1e-12), 0.0)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = (h / 6.0) % 1.0
    h = np.where(delta > 0, h, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _augment_image(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop + resize, horizontal flip, hue jitter on a [0,1] image."""
    c, size, _ = raw.shape
    scale = rng.uniform(0.7, 1.0)
    crop = max(int(round(size * scale)), 8)
    y0 = int(rng.integers(0, size - crop + 1))
    x0 = int(rng.integers(0, size - crop + 1))
    patch = raw[:, y0:y0 + crop, x0:x0 + crop]
    idx = np.clip(np.round(np.linspace(0, crop - 1, size)).astype(int), 0, crop - 1)
    out = patch[:, idx][:, :, idx]
    if rng.uniform() < 0.5:
        out = out[:, :, ::-1]
    hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
    hsv[0] = (hsv[0] + rng.uniform(-0.1, 0.1)) % 1.0
    return _hsv_to_rgb(hsv)


@dataclass
class PretrainResult:
    """Branch weight artifact plus training diagnostics. ``heads`` holds the
    throwaway prediction heads some probes need; they are never part of the
    artifact consumed by model initialization."""

    arrays: dict[str, np.ndarray]
    epoch_losses: list[float]
    initial_loss: float = float("nan")
    heads: dict[str, np.ndarray] = field(default_factory=dict)


def _normalized_mean_embedding(v_embs: ad.Tensor) -> ad.Tensor:
    """(B, N, D) pixel embeddings -> L2-normalized (B, D)."""
    pooled = ad.reduce_mean(v_embs, axis=1)
    norm = ad.sqrt(ad.reduce_sum(pooled * pooled, axis=1, keepdims=True) + 1e-12)
    return pooled / norm


def _info_nce_rows(z1: ad.Tensor, z2: ad.Tensor, temperature: float) -> ad.Tensor:
    """Mean cross-entropy with matching rows of z2 as positives."""
    logits = ad.matmul(z1, ad.transpose(z2)) * (1.0 / temperature)
    B = logits.shape[0]
    lse = ad.logsumexp(logits, axis=1)
    diag = ad.concat([ad.reshape(logits[i, i], (1,)) for i in range(B)], axis=0)
    return ad.reduce_mean(lse - diag)


def pretrain_vision(manifest: DatasetManifest, dataset_dir: Path, seed: int,
                    model_cfg: md.ModelConfig = md.ModelConfig(),
                    epochs: int = 4, batch_size: int = 16,
                    learning_rate: float = 1e-3, temperature: float = 0.2,
                    holdout: int = 16) -> PretrainResult:
    """Instance discrimination on training scenes: two augmentations of the
    same scene are positives, other scenes in the batch are negatives."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x76697331]))
    params = md.init_params(md.InitStrategy(), seed, model_cfg)
    vision_names = sorted(n for n in params.tensors if n.startswith(md.VISION_PREFIX))
    ids = manifest.image_ids(split="train")
    train_ids = ids[:-holdout] if holdout and len(ids) > holdout else ids
    raws = {i: mio.read_image(Path(dataset_dir) / manifest.images[i].path) for i in ids}

    adam = ad.AdamState(learning_rate=learning_rate)
    epoch_losses = []
    initial_loss = float("nan")

    def batch_loss(chunk, gen):
        view1 = [normalize_image(_augment_image(raws[i], gen)) for i in chunk]
        view2 = [normalize_image(_augment_image(raws[i], gen)) for i in chunk]
        z1 = _normalized_mean_embedding(md.encode_image_batch(view1, params))
        z2 = _normalized_mean_embedding(md.encode_image_batch(view2, params))
        return _info_nce_rows(z1, z2, temperature) + _info_nce_rows(z2, z1, temperature)

    probe_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x76697330]))
    with ad.no_grad():
        chunk = [train_ids[int(i)] for i in
                 probe_rng.permutation(len(train_ids))[:batch_size]]
        initial_loss = float(batch_loss(chunk, probe_rng).data)

    for _epoch in range(epochs):
        order = rng.permutation(len(train_ids))
        losses = []
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            chunk = [train_ids[int(i)] for i in order[lo:lo + batch_size]]
            loss = batch_loss(chunk, rng)
            tensors = [params.tensors[n] for n in vision_names]
            grads = ad.gradient(loss, tensors)
            named = {n: grads[t] for n, t in zip(vision_names, tensors)}
            current = {n: params.tensors[n].data for n in vision_names}
            updated, adam = ad.adam_update(current, named, adam)
            merged = params.arrays()
            merged.update(updated)
            params = params.with_arrays(merged)
            losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(losses)))
        log.info("vision pretrain epoch %d: loss %.4f", _epoch + 1, epoch_losses[-1])
    arrays = {n: params.tensors[n].data.copy() for n in vision_names}
    return PretrainResult(arrays=arrays, epoch_losses=epoch_losses, initial_loss=initial_loss)


def vision_probe_accuracy(arrays: dict[str, np.ndarray], manifest: DatasetManifest,
                          dataset_dir: Path, seed: int,
                          model_cfg: md.ModelConfig = md.ModelConfig(),
                          n_triples: int = 50, holdout: int = 16) -> float:
    """Fraction of held-out triples where two augmentations of one scene score
    higher than a cross-scene pair."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70726F62]))
    params = md.init_params(md.InitStrategy(vision_pretrained=True), seed, model_cfg,
                            pretrain_artifacts={"vision": arrays})
    ids = manifest.image_ids(split="train")
    probe_ids = ids[-holdout:] if holdout and len(ids) > holdout else ids
    wins = 0
    with ad.no_grad():
        for _ in range(n_triples):
            a, b = rng.choice(len(probe_ids), size=2, replace=False)
            raw_a = mio.read_image(Path(dataset_dir) / manifest.images[probe_ids[int(a)]].path)
            raw_b = mio.read_image(Path(dataset_dir) / manifest.images[probe_ids[int(b)]].path)
            views = [normalize_image(_augment_image(raw_a, rng)),
                     normalize_image(_augment_image(raw_a, rng)),
                     normalize_image(_augment_image(raw_b, rng))]
            z = _normalized_mean_embedding(md.encode_image_batch(views, params)).data
            if float(z[0] @ z[1]) > float(z[0] @ z[2]):
                wins += 1
    return wins / n_triples


# ---------------------------------------------------------------------------
# Proxy pretraining: audio (contrastive future-frame prediction)
# ---------------------------------------------------------------------------

def _audio_context_embedding(windows: np.ndarray, params: md.ModelParams) -> ad.Tensor:
    """Run the recurrent stack over fixed-length mel windows -> (B, 2H) from
    the final timestep."""
    B, T, _ = windows.shape
    mask = np.ones((B, T))
    p = params.tensors
    x_steps = [ad.constant(windows[:, t, :]) for t in range(T)]
    h1 = md._lstm_pass(x_steps, p["audio.lstm.wx"], p["audio.lstm.wh"], p["audio.lstm.b"], mask)
    fwd = md._lstm_pass(h1, p["audio.bilstm.fwd.wx"], p["audio.bilstm.fwd.wh"],
                        p["audio.bilstm.fwd.b"], mask)
    bwd = md._lstm_pass(h1, p["audio.bilstm.bwd.wx"], p["audio.bilstm.bwd.wh"],
                        p["audio.bilstm.bwd.b"], mask, reverse=True)
    return ad.concat([fwd[-1], bwd[-1]], axis=1)


def pretrain_audio(manifest: DatasetManifest, dataset_dir: Path, seed: int,
                   model_cfg: md.ModelConfig = md.ModelConfig(),
                   mel_cfg: MelConfig = MelConfig(),
                   epochs: int = 4, batch_size: int = 16, context_frames: int = 16,
                   future_frames: int = 4, learning_rate: float = 1e-3,
                   temperature: float = 0.2, holdout: int = 16) -> PretrainResult:
    """Contrastive future prediction: the recurrent encoder summarizes a mel
    context window and must pick the true next frames from in-batch
    distractors. The prediction heads are discarded; the artifact holds the
    recurrent weights only."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61756431]))
    params = md.init_params(md.InitStrategy(), seed, model_cfg)
    rec_names = sorted(n for n in params.tensors if n.startswith(md.AUDIO_RECURRENT_PREFIX))
    h2 = 2 * model_cfg.audio_hidden
    proj_dim = 16
    rng_heads = np.random.default_rng(np.random.SeedSequence([seed, 0x68656164]))
    heads = {
        "head.context": ad.parameter(rng_heads.uniform(-1, 1, size=(h2, proj_dim)) / np.sqrt(h2)),
        "head.future": ad.parameter(
            rng_heads.uniform(-1, 1, size=(future_frames * model_cfg.n_mels, proj_dim))
            / np.sqrt(future_frames * model_cfg.n_mels)),
    }

    ids = manifest.audio_ids(split="train")
    train_ids = ids[:-holdout] if holdout and len(ids) > holdout else ids
    feats = {}
    for aid in ids:
        samples, sr = mio.read_waveform(Path(dataset_dir) / manifest.audio[aid].path)
        feats[aid] = mel_spectrogram(Waveform(samples=samples, sample_rate=sr), mel_cfg)

    min_len = context_frames + future_frames
    usable = [a for a in train_ids if feats[a].n_frames >= min_len]
    if len(usable) < batch_size:
        raise TrainingError("not enough long audio items for future-prediction pretraining")

    def sample_windows(pool, gen):
        ctx = np.empty((batch_size, context_frames, model_cfg.n_mels))
        fut = np.empty((batch_size, future_frames * model_cfg.n_mels))
        chosen = gen.choice(len(pool), size=batch_size, replace=False)
        for row, pi in enumerate(chosen):
            mel = feats[pool[int(pi)]]
            t = int(gen.integers(context_frames, mel.n_frames - future_frames + 1))
            ctx[row] = mel.values[:, t - context_frames:t].T
            fut[row] = mel.values[:, t:t + future_frames].T.reshape(-1)
        return ctx, fut

    def batch_loss(ctx, fut):
        c = _audio_context_embedding(ctx, params)
        q = ad.matmul(c, heads["head.context"])
        qn = q / ad.sqrt(ad.reduce_sum(q * q, axis=1, keepdims=True) + 1e-12)
        w = ad.matmul(ad.constant(fut), heads["head.future"])
        wn = w / ad.sqrt(ad.reduce_sum(w * w, axis=1, keepdims=True) + 1e-12)
        return _info_nce_rows(qn, wn, temperature), qn, wn

    adam = ad.AdamState(learning_rate=learning_rate)
    steps_per_epoch = max(len(usable) // batch_size, 1)
    epoch_losses = []
    probe_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61756430]))
    with ad.no_grad():
        ctx0, fut0 = sample_windows(usable, probe_rng)
        initial_loss = float(batch_loss(ctx0, fut0)[0].data)
    for _epoch in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            ctx, fut = sample_windows(usable, rng)
            loss, _, _ = batch_loss(ctx, fut)
            tensors = [params.tensors[n] for n in rec_names] + list(heads.values())
            names = rec_names + list(heads.keys())
            grads = ad.gradient(loss, tensors)
            named = {n: grads[t] for n, t in zip(names, tensors)}
            current = {n: params.tensors[n].data for n in rec_names}
            current.update({n: heads[n].data for n in heads})
            updated, adam = ad.adam_update(current, named, adam)
            merged = params.arrays()
            for n in rec_names:
                merged[n] = updated[n]
            params = params.with_arrays(merged)
            heads = {n: ad.parameter(updated[n]) for n in heads}
            losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(losses)))
        log.info("audio pretrain epoch %d: loss %.4f", _epoch + 1, epoch_losses[-1])
    arrays = {n: params.tensors[n].data.copy() for n in rec_names}
    return PretrainResult(arrays=arrays, epoch_losses=epoch_losses,
                          initial_loss=initial_loss,
                          heads={n: t.data.copy() for n, t in heads.items()})


def audio_probe_accuracy(result: PretrainResult, manifest: DatasetManifest,
                         dataset_dir: Path, seed: int,
                         model_cfg: md.ModelConfig = md.ModelConfig(),
                         mel_cfg: MelConfig = MelConfig(),
                         context_frames: int = 16, future_frames: int = 4,
                         batch_size: int = 16, n_batches: int = 5) -> float:
    """Ranking accuracy of true future windows against in-batch distractors
    on held-out (test-split) audio; chance is 1/batch_size."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61756432]))
    params = md.init_params(md.InitStrategy(audio_pretrained=True), seed, model_cfg,
                            pretrain_artifacts={"audio": result.arrays})
    ids = manifest.audio_ids(split="test")
    feats = {}
    for aid in ids:
        samples, sr = mio.read_waveform(Path(dataset_dir) / manifest.audio[aid].path)
        feats[aid] = mel_spectrogram(Waveform(samples=samples, sample_rate=sr), mel_cfg)
    min_len = context_frames + future_frames
    usable = [a for a in ids if feats[a].n_frames >= min_len]
    hits = total = 0
    with ad.no_grad():
        for _ in range(n_batches):
            ctx = np.empty((batch_size, context_frames, model_cfg.n_mels))
            fut = np.empty((batch_size, future_frames * model_cfg.n_mels))
            chosen = rng.choice(len(usable), size=batch_size, replace=False)
            for row, pi in enumerate(chosen):
                mel = feats[usable[int(pi)]]
                t = int(rng.integers(context_frames, mel.n_frames - future_frames + 1))
                ctx[row] = mel.values[:, t - context_frames:t].T
                fut[row] = mel.values[:, t:t + future_frames].T.reshape(-1)
            c = _audio_context_embedding(ctx, params).data
            q = c @ result.heads["head.context"]
            w = fut @ result.heads["head.future"]
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            w /= np.linalg.norm(w, axis=1, keepdims=True)
            sims = q @ w.T
            hits += int(np.sum(np.argmax(sims, axis=1) == np.arange(batch_size)))
            total += batch_size
    return hits / total
