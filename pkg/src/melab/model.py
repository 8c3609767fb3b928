"""The word--image scorer: an audio branch (LSTM then BiLSTM, attention
pooled to one word embedding) and a vision branch (three-stage conv stack
producing one embedding per spatial cell), joined by dot-product attention
whose maximum is the similarity score S.

Desk-scale defaults (D=32, hidden 64, conv 16->32) keep CPU training in the
minutes range; all sizes are configurable.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as mio
from .features import MelSpectrogram

MASK_NEG = 1e9  # additive logit penalty for padded frames


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 40
    embed_dim: int = 32
    audio_hidden: int = 64
    conv_channels: tuple[int, int] = (16, 32)
    image_size: int = 64

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return ModelConfig(**d)

    @property
    def grid_size(self) -> int:
        # two stride-2 convs then one 2x2 pool
        return self.image_size // 8

    @property
    def n_cells(self) -> int:
        return self.grid_size ** 2


AUDIO_RECURRENT_PREFIX = ("audio.lstm.", "audio.bilstm.")
VISION_PREFIX = "vision."


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, d = cfg.audio_hidden, cfg.embed_dim
    c1, c2 = cfg.conv_channels
    shapes = {
        "audio.lstm.wx": (cfg.n_mels, 4 * h),
        "audio.lstm.wh": (h, 4 * h),
        "audio.lstm.b": (4 * h,),
        "audio.pool.attn_w": (2 * h, 1),
        "audio.pool.attn_b": (1,),
        "audio.pool.proj_w": (2 * h, d),
        "audio.pool.proj_b": (d,),
        "vision.conv1.w": (c1, 3, 3, 3),
        "vision.conv1.b": (c1,),
        "vision.conv2.w": (c2, c1, 3, 3),
        "vision.conv2.b": (c2,),
        "vision.proj.w": (d, c2, 1, 1),
        "vision.proj.b": (d,),
    }
    for direction in ("fwd", "bwd"):
        shapes[f"audio.bilstm.{direction}.wx"] = (h, 4 * h)
        shapes[f"audio.bilstm.{direction}.wh"] = (h, 4 * h)
        shapes[f"audio.bilstm.{direction}.b"] = (4 * h,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".b") or name.endswith("_b"):
        return max(shape[0], 1)
    if "conv" in name or name == "vision.proj.w":
        return int(np.prod(shape[1:]))
    return shape[0]


@dataclass
class ModelParams:
    """All encoder weights as named autodiff leaves."""

    config: ModelConfig
    tensors: dict[str, ad.Tensor]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in sorted(self.tensors.items())}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(config=self.config,
                           tensors={n: ad.parameter(a) for n, a in sorted(arrays.items())})

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.tensors[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]


@dataclass(frozen=True)
class InitStrategy:
    audio_pretrained: bool = False
    vision_pretrained: bool = False

    def label(self) -> str:
        return f"audio={'cpc' if self.audio_pretrained else 'rand'}," \
               f"vision={'ssl' if self.vision_pretrained else 'rand'}"


def init_params(strategy: InitStrategy, seed: int, config: ModelConfig = ModelConfig(),
                pretrain_artifacts: dict[str, dict[str, np.ndarray]] | None = None) -> ModelParams:
    """Scaled-uniform init (bound 1/sqrt(fan_in), zero biases); pretrained
    branches copy their proxy-pretraining artifacts bit-exactly."""
    artifacts = pretrain_artifacts or {}
    if strategy.audio_pretrained and "audio" not in artifacts:
        raise ModelError("audio_pretrained requested but no audio artifact given")
    if strategy.vision_pretrained and "vision" not in artifacts:
        raise ModelError("vision_pretrained requested but no vision artifact given")
    tensors: dict[str, ad.Tensor] = {}
    for name, shape in sorted(param_shapes(config).items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
        # biases included: exactly-zero biases put relu inputs of zero-padded
        # conv windows exactly on the kink, where subgradients and finite
        # differences legitimately disagree
        bound = 1.0 / np.sqrt(_fan_in(name, shape))
        data = rng.uniform(-bound, bound, size=shape)
        if strategy.audio_pretrained and name.startswith(AUDIO_RECURRENT_PREFIX):
            data = artifacts["audio"][name].copy()
        if strategy.vision_pretrained and name.startswith(VISION_PREFIX):
            data = artifacts["vision"][name].copy()
        tensors[name] = ad.parameter(data)
    return ModelParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# Audio branch
# ---------------------------------------------------------------------------

def _lstm_pass(x_steps: list[ad.Tensor], wx: ad.Tensor, wh: ad.Tensor, b: ad.Tensor,
               mask: np.ndarray, reverse: bool = False) -> list[ad.Tensor]:
    """Masked LSTM over per-timestep (B, I) inputs; returns per-step h.

    Padded positions carry the previous state through, so trailing padding
    never contaminates valid positions in either scan direction.
    """
    B = x_steps[0].shape[0]
    T = len(x_steps)
    hdim = wh.shape[0]
    state = ad.constant(np.zeros((B, 2 * hdim)))
    outs: list[ad.Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        state = ad.lstm_step(x_steps[t], state, wx, wh, b, mask[:, t:t + 1])
        outs[t] = state[:, :hdim]
    return outs


def _stack_steps(steps: list[ad.Tensor]) -> ad.Tensor:
    """Stack T tensors of (B, F) into (B, T, F)."""
    B, F = steps[0].shape
    return ad.concat([ad.reshape(s, (B, 1, F)) for s in steps], axis=1)


def encode_audio_batch(mels: list[MelSpectrogram], params: ModelParams,
                       mask_padding: bool = True) -> ad.Tensor:
    """Encode a batch of mel spectrograms into (B, D) word embeddings.

    The recurrence only runs to the longest valid length in the batch; the
    attention pooling masks any remaining padded frames.
    """
    cfg = params.config
    p = params.tensors
    B = len(mels)
    if B == 0:
        raise ModelError("empty audio batch")
    for m in mels:
        if m.n_mels != cfg.n_mels:
            raise ModelError(f"expected {cfg.n_mels} mel bins, got {m.n_mels}")
    lengths = [m.n_valid_frames if mask_padding else m.n_frames for m in mels]
    T = max(lengths)
    X = np.full((B, T, cfg.n_mels), np.log(1e-10))
    mask = np.zeros((B, T))
    for k, m in enumerate(mels):
        take = min(lengths[k], m.n_frames)
        X[k, :take, :] = m.values[:, :take].T
        mask[k, :lengths[k]] = 1.0

    x_steps = [ad.constant(X[:, t, :]) for t in range(T)]
    h1 = _lstm_pass(x_steps, p["audio.lstm.wx"], p["audio.lstm.wh"], p["audio.lstm.b"], mask)
    fwd = _lstm_pass(h1, p["audio.bilstm.fwd.wx"], p["audio.bilstm.fwd.wh"],
                     p["audio.bilstm.fwd.b"], mask)
    bwd = _lstm_pass(h1, p["audio.bilstm.bwd.wx"], p["audio.bilstm.bwd.wh"],
                     p["audio.bilstm.bwd.b"], mask, reverse=True)
    h2 = [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    h2_seq = _stack_steps(h2)  # (B, T, 2H)

    # two-layer feedforward pooling head: frame scores -> masked attention -> projection
    flat = ad.reshape(h2_seq, (B * T, 2 * cfg.audio_hidden))
    logits = ad.reshape(ad.matmul(flat, p["audio.pool.attn_w"]) + p["audio.pool.attn_b"], (B, T))
    logits = logits + ad.constant((mask - 1.0) * MASK_NEG)
    alpha = ad.exp(logits - ad.logsumexp(logits, axis=1, keepdims=True))
    pooled = ad.reduce_sum(h2_seq * ad.reshape(alpha, (B, T, 1)), axis=1)  # (B, 2H)
    return ad.matmul(pooled, p["audio.pool.proj_w"]) + p["audio.pool.proj_b"]


def encode_audio(m: MelSpectrogram, params: ModelParams, mask_padding: bool = True) -> ad.Tensor:
    """Single word embedding (D,)."""
    emb = encode_audio_batch([m], params, mask_padding=mask_padding)
    return ad.reshape(emb, (params.config.embed_dim,))


# ---------------------------------------------------------------------------
# Vision branch
# ---------------------------------------------------------------------------

def image_cols(pixels: np.ndarray) -> np.ndarray:
    """Precomputed first-conv column matrix for one (3, S, S) image; caching
    these avoids re-running im2col for images that recur across steps."""
    return ad.im2col(np.asarray(pixels)[None], 3, 3, stride=2, padding="same")


def encode_image_batch(pixels: list[np.ndarray] | np.ndarray, params: ModelParams,
                       cols: list[np.ndarray] | None = None) -> ad.Tensor:
    """Encode normalized (3, S, S) images into (B, N, D) pixel embeddings.

    ``cols`` optionally carries per-image :func:`image_cols` matrices aligned
    with the batch.
    """
    cfg = params.config
    p = params.tensors
    x = np.stack(pixels) if isinstance(pixels, list) else np.asarray(pixels)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ModelError(f"expected (B, 3, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
    B = x.shape[0]
    batch_cols = np.concatenate(cols, axis=0) if cols is not None else None
    h = ad.relu(ad.conv2d(ad.constant(x), p["vision.conv1.w"], p["vision.conv1.b"],
                          stride=2, padding="same", cols=batch_cols))
    h = ad.relu(ad.conv2d(h, p["vision.conv2.w"], p["vision.conv2.b"],
                          stride=2, padding="same"))
    h = ad.maxpool2d(h, 2)
    cells = ad.conv2d(h, p["vision.proj.w"], p["vision.proj.b"], stride=1, padding="valid")
    n = cfg.n_cells
    return ad.transpose(ad.reshape(cells, (B, cfg.embed_dim, n)), (0, 2, 1))


def encode_image(pixels: np.ndarray, params: ModelParams) -> ad.Tensor:
    """Pixel-embedding sequence (N, D) for one image."""
    out = encode_image_batch([pixels], params)
    return ad.reshape(out, (params.config.n_cells, params.config.embed_dim))


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def similarity(a_emb: ad.Tensor, v_embs: ad.Tensor) -> tuple[ad.Tensor, int]:
    """S = max over cells of dot(word, cell); also returns the arg-max cell
    (lowest index on ties) for attention inspection."""
    if a_emb.shape[-1] != v_embs.shape[-1]:
        raise ModelError(f"embedding dims differ: {a_emb.shape} vs {v_embs.shape}")
    scores = ad.reshape(ad.matmul(v_embs, ad.reshape(a_emb, (a_emb.shape[-1], 1))),
                        (v_embs.shape[0],))
    s = ad.reduce_max(scores, axis=0)
    return s, int(np.argmax(scores.data))


def similarity_matrix(a_embs: ad.Tensor, v_embs: ad.Tensor) -> ad.Tensor:
    """All-pairs scores: (Ba, D) x (Bv, N, D) -> (Ba, Bv)."""
    bv, n, d = v_embs.shape
    vmat = ad.reshape(ad.transpose(v_embs, (2, 0, 1)), (d, bv * n))
    scores = ad.reshape(ad.matmul(a_embs, vmat), (a_embs.shape[0], bv, n))
    return ad.reduce_max(scores, axis=2)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    adam: ad.AdamState | None
    epoch: int
    config_fingerprint: str
    rng_state: dict | None = None


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, t in sorted(ckpt.params.tensors.items()):
        arrays[f"p/{name}"] = t.data
    header = {
        "kind": "checkpoint",
        "epoch": ckpt.epoch,
        "config_fingerprint": ckpt.config_fingerprint,
        "model_config": ckpt.params.config.to_json(),
        "rng_state": _encode_rng(ckpt.rng_state),
        "adam": None,
    }
    if ckpt.adam is not None:
        header["adam"] = {
            "learning_rate": ckpt.adam.learning_rate,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon,
            "step": ckpt.adam.step,
        }
        for name in sorted(ckpt.adam.m):
            arrays[f"m/{name}"] = ckpt.adam.m[name]
        for name in sorted(ckpt.adam.v):
            arrays[f"v/{name}"] = ckpt.adam.v[name]
    mio.write_array_container(path, header, arrays)


def load_checkpoint(path: Path) -> Checkpoint:
    header, arrays = mio.read_array_container(path)
    config = ModelConfig.from_json(header["model_config"])
    tensors = {}
    m, v = {}, {}
    for name, arr in arrays.items():
        section, key = name.split("/", 1)
        if section == "p":
            tensors[key] = ad.parameter(arr)
        elif section == "m":
            m[key] = arr
        elif section == "v":
            v[key] = arr
    params = ModelParams(config=config, tensors=dict(sorted(tensors.items())))
    adam = None
    if header.get("adam"):
        a = header["adam"]
        adam = ad.AdamState(learning_rate=a["learning_rate"], beta1=a["beta1"],
                            beta2=a["beta2"], epsilon=a["epsilon"], step=a["step"],
                            m=m, v=v)
    return Checkpoint(params=params, adam=adam, epoch=header["epoch"],
                      config_fingerprint=header["config_fingerprint"],
                      rng_state=_decode_rng(header.get("rng_state")))


def _encode_rng(state: dict | None):
    if state is None:
        return None
    # numpy PCG64 state contains big ints that exceed JSON number precision
    def enc(v):
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, int):
            return str(v)
        return v
    return enc(state)


def _decode_rng(state):
    if state is None:
        return None

    def dec(v):
        if isinstance(v, dict):
            return {k: dec(x) for k, x in v.items()}
        if isinstance(v, str) and (v.isdigit() or (v.startswith("-") and v[1:].isdigit())):
            return int(v)
        return v
    return dec(state)
