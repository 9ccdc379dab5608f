"""One-dimensional convolutional autoencoder: build, train, encode, score, checkpoint."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .signal_io import Dataset, FormatError, SignalWindow

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CAE1"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


@dataclass(frozen=True)
class CaeConfig:
    window_len: int = 512
    enc_channels: tuple[int, ...] = (32, 64)
    kernel_sizes: tuple[int, ...] = (7, 7)
    strides: tuple[int, ...] = (4, 4)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("enc_channels", "kernel_sizes", "strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not len(self.enc_channels) == len(self.kernel_sizes) == len(self.strides):
            raise ValueError("enc_channels, kernel_sizes and strides must have equal length")
        if not self.enc_channels:
            raise ValueError("at least one encoder layer is required")
        if self.window_len < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("window_len and batch_size must be >= 1, epochs >= 0")
        if min(self.kernel_sizes) < 1 or min(self.strides) < 1 or min(self.enc_channels) < 1:
            raise ValueError("kernel sizes, strides and channel counts must be >= 1")

    @property
    def latent_channels(self) -> int:
        return self.enc_channels[-1]

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CaeConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or key not in types:
                raise FormatError(f"bad config line {line!r}")
            if "tuple" in str(types[key]):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v)
            elif types[key] in (float, "float"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class CaeModel:
    config: CaeConfig
    layers: list[nn.ConvLayer]

    @property
    def n_encoder(self) -> int:
        return len(self.config.enc_channels)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def copy(self) -> "CaeModel":
        return copy.deepcopy(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = dataclasses.field(default_factory=list)
    val_loss: list[float] = dataclasses.field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            rows.append(f"{i},{t!r},{v!r}")
        return "\n".join(rows) + "\n"


def shape_chain(config: CaeConfig) -> list[int]:
    """Time lengths after each encoder layer, starting with the window length."""
    lengths = [config.window_len]
    for k, s in zip(config.kernel_sizes, config.strides):
        lengths.append(nn.conv_output_length(lengths[-1], k, s, 0))
    return lengths


def build_model(config: CaeConfig) -> CaeModel:
    lengths = shape_chain(config)
    if min(lengths) < 1:
        raise ValueError(
            f"window_len={config.window_len} is too short for the encoder: "
            f"time lengths {' -> '.join(map(str, lengths))}"
        )
    rng = np.random.default_rng(config.seed)
    chans = (1,) + config.enc_channels
    n = len(config.enc_channels)

    def init(shape, fan_in):
        a = 1.0 / math.sqrt(fan_in)
        # f32-representable so checkpoints round-trip exactly
        return rng.uniform(-a, a, size=shape).astype(np.float32).astype(np.float64)

    layers = []
    for i in range(n):
        k, s = config.kernel_sizes[i], config.strides[i]
        w = init((chans[i + 1], chans[i], k), chans[i] * k)
        b = init((chans[i + 1],), chans[i] * k)
        layers.append(nn.ConvLayer(w, b, stride=s))
    for i in reversed(range(n)):
        k, s = config.kernel_sizes[i], config.strides[i]
        # mirrored layer must restore the exact pre-conv length
        op = lengths[i] - nn.tconv_output_length(lengths[i + 1], k, s, 0)
        w = init((chans[i + 1], chans[i], k), chans[i + 1] * k)
        b = init((chans[i],), chans[i + 1] * k)
        layers.append(nn.ConvLayer(w, b, stride=s, transposed=True, output_padding=op))

    model = CaeModel(config, layers)
    out_len = config.window_len
    for layer in model.layers:
        out_len = layer.output_length(out_len)
    if out_len != config.window_len:
        raise ValueError(
            f"decoder restores {out_len} samples, expected {config.window_len} "
            f"(encoder chain {' -> '.join(map(str, lengths))})"
        )
    return model


def _forward(model: CaeModel, x: np.ndarray):
    """Run the full autoencoder, returning output and per-layer caches."""
    caches = []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = nn.layer_forward(h, layer)
        caches.append((h, z))
        h = nn.relu(z) if i != last else z
    return h, caches


def _backward(model: CaeModel, caches, grad_out: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = []
    g = grad_out
    last = len(model.layers) - 1
    for i in reversed(range(len(model.layers))):
        h_in, z = caches[i]
        if i != last:
            g = nn.relu_backward(z, g)
        g, gw, gb = nn.layer_backward(h_in, model.layers[i], g)
        grads = [gw, gb] + grads
    return grads


def loss_and_grads(model: CaeModel, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Reconstruction MSE of batch ``x`` (B, 1, W) and its parameter gradients."""
    out, caches = _forward(model, x)
    loss, g = nn.mse_loss(out, x)
    return loss, _backward(model, caches, g)


def _as_batch(model: CaeModel, windows) -> np.ndarray:
    if isinstance(windows, Dataset):
        x = windows.matrix()
    elif isinstance(windows, SignalWindow):
        x = windows.samples[None, :].astype(np.float64)
    else:
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.window_len:
        raise ValueError(f"window length mismatch: got {x.shape[-1]}, model expects {model.config.window_len}")
    return x[:, None, :]


def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _dataset_loss(model: CaeModel, x: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for sl in _batched(x.shape[0], batch_size):
        out, _ = _forward(model, x[sl])
        total += float(np.sum((out - x[sl]) ** 2))
    return total / x.size


def train(
    model: CaeModel,
    train_set: Dataset,
    val_set: Dataset | None,
    config: CaeConfig | None = None,
) -> tuple[CaeModel, TrainHistory]:
    """Mini-batch AdamW on reconstruction MSE.

    The input model is not modified. The returned model holds the
    parameters of the epoch with the lowest validation loss (train loss
    when no validation set is given), rounded to float32.
    """
    config = config or model.config
    model = model.copy()
    x = _as_batch(model, train_set)
    xv = _as_batch(model, val_set) if val_set is not None else x
    rng = np.random.default_rng(config.seed)
    state = nn.AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    params = model.params()
    history = TrainHistory()
    best_val = math.inf
    best_params = [p.copy() for p in params]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for b, sl in enumerate(_batched(x.shape[0], config.batch_size)):
            batch = x[order[sl]]
            loss, grads = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                nn.adamw_step(params, grads, state)
            except nn.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += loss * batch.shape[0]
        train_loss = total / x.shape[0]
        val_loss = _dataset_loss(model, xv, config.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_params = [p.copy() for p in params]
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)

    for p, best in zip(params, best_params):
        p[...] = best.astype(np.float32).astype(np.float64)
    return model, history


def finetune_subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """First ceil(fraction * n) windows after a seeded shuffle."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    count = math.ceil(fraction * n - 1e-9)
    if count < 1:
        raise ValueError("finetuning subset is empty")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(order[:count].tolist())


def finetune(
    model: CaeModel,
    new_train: Dataset,
    fraction: float,
    config: CaeConfig | None = None,
    val_set: Dataset | None = None,
) -> tuple[CaeModel, TrainHistory]:
    """Continue training a pretrained model on a fraction of new clean data.

    The optimizer starts fresh. Without ``val_set`` the subset itself is
    used for model selection.
    """
    config = config or model.config
    subset = finetune_subset(new_train, fraction, config.seed)
    return train(model, subset, val_set if val_set is not None else subset, config)


def encode_batch(model: CaeModel, windows) -> np.ndarray:
    """Time-mean pooled latent codes, shape (n, latent_channels)."""
    x = _as_batch(model, windows)
    feats = []
    for sl in _batched(x.shape[0], 256):
        h = x[sl]
        for layer in model.layers[: model.n_encoder]:
            h = nn.relu(nn.layer_forward(h, layer))
        feats.append(h.mean(axis=2))
    return np.concatenate(feats, axis=0)


def encode(model: CaeModel, window) -> np.ndarray:
    return encode_batch(model, window)[0]


def reconstruct_batch(model: CaeModel, windows) -> np.ndarray:
    x = _as_batch(model, windows)
    outs = [_forward(model, x[sl])[0][:, 0, :] for sl in _batched(x.shape[0], 256)]
    return np.concatenate(outs, axis=0)


def reconstruct(model: CaeModel, window) -> np.ndarray:
    return reconstruct_batch(model, window)[0]


def recon_scores(model: CaeModel, windows) -> np.ndarray:
    """Negated per-window reconstruction MSE; higher means cleaner."""
    x = _as_batch(model, windows)[:, 0, :]
    rec = reconstruct_batch(model, x)
    return -np.mean((rec - x) ** 2, axis=1)


def recon_score(model: CaeModel, window) -> float:
    return float(recon_scores(model, window)[0])


# -- checkpoint I/O -----------------------------------------------------------


def checkpoint_bytes(model: CaeModel) -> bytes:
    cfg = model.config.to_text().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for p in model.params():
        arr = p.astype("<f4").ravel()
        parts.append(struct.pack("<I", arr.size))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(model: CaeModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> CaeModel:
    raw = Path(path).read_bytes()
    return checkpoint_from_bytes(raw, str(path))


def checkpoint_from_bytes(raw: bytes, name: str = "<bytes>") -> CaeModel:
    def need(offset: int, count: int, what: str):
        if offset + count > len(raw):
            raise FormatError(
                f"{name}: truncated checkpoint reading {what}: "
                f"expected at least {offset + count} bytes, got {len(raw)}"
            )

    need(0, 6, "header")
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{name}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    need(6, 4, "config length")
    (cfg_len,) = struct.unpack_from("<I", raw, 6)
    need(10, cfg_len, "config block")
    config = CaeConfig.from_text(raw[10 : 10 + cfg_len].decode("utf-8"))
    model = build_model(config)
    off = 10 + cfg_len
    expected = off + sum(4 + 4 * p.size for p in model.params())
    if len(raw) < expected:
        raise FormatError(
            f"{name}: truncated checkpoint: config implies {expected} bytes, got {len(raw)}"
        )
    for i, p in enumerate(model.params()):
        need(off, 4, f"length of parameter array {i}")
        (count,) = struct.unpack_from("<I", raw, off)
        if count != p.size:
            raise FormatError(f"{name}: parameter array {i} has {count} values, config implies {p.size}")
        off += 4
        need(off, 4 * count, f"parameter array {i}")
        p[...] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(p.shape)
        off += 4 * count
    if off != len(raw):
        raise FormatError(f"{name}: {len(raw) - off} trailing bytes after parameters (expected length {off})")
    return model
