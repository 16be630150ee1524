"""Two-encoder embedding model with cosine similarity and temperature.

Supported encoder architectures per side (text / image):

* ``linear``: y = W x (+ b)
* ``tanh``: y = W2 tanh(W1 x + b1) (+ b2), hidden width ``hidden``

All trainable tensors live in one flat 64-bit parameter vector with a named
slice layout; a trainable log-temperature occupies the final coordinate when
enabled. The similarity is cos(u, v) / tau. Zero-norm embeddings are hard
errors, never clamped: silently flooring a norm would corrupt every gradient
built on top.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import jsonio
from .errors import (
    DimensionMismatchError,
    InvalidConfigError,
    LayoutMismatchError,
    ZeroNormEmbeddingError,
)

ZERO_NORM_TOL = 1e-12

ARCHITECTURES = ("linear", "tanh")
TEMPERATURE_MODES = ("fixed", "trainable")


@dataclass(frozen=True)
class EncoderConfig:
    d_t: int
    d_i: int
    k: int
    architecture: str = "linear"
    hidden: int = 0
    bias: bool = False
    temperature_mode: str = "fixed"
    tau: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise InvalidConfigError("embedding dim k must be >= 2")
        if self.d_t < 1 or self.d_i < 1:
            raise InvalidConfigError("feature dims must be >= 1")
        if self.architecture not in ARCHITECTURES:
            raise InvalidConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "tanh" and self.hidden < 1:
            raise InvalidConfigError("tanh architecture needs hidden >= 1")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise InvalidConfigError(
                f"unknown temperature_mode {self.temperature_mode!r}")
        if not self.tau > 0:
            raise InvalidConfigError("tau must be > 0")

    def to_dict(self) -> dict:
        return {
            "d_t": self.d_t, "d_i": self.d_i, "k": self.k,
            "architecture": self.architecture, "hidden": self.hidden,
            "bias": self.bias, "temperature_mode": self.temperature_mode,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(
            d_t=int(data["d_t"]), d_i=int(data["d_i"]), k=int(data["k"]),
            architecture=str(data.get("architecture", "linear")),
            hidden=int(data.get("hidden", 0)),
            bias=bool(data.get("bias", False)),
            temperature_mode=str(data.get("temperature_mode", "fixed")),
            tau=float(data.get("tau", 1.0)),
        )


@dataclass(frozen=True)
class ParamLayout:
    """Named slices of the flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...], int, int], ...]

    @property
    def size(self) -> int:
        return self.entries[-1][3] if self.entries else 0

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _, _, _ in self.entries)

    def slot(self, name: str) -> tuple[tuple[int, ...], int, int]:
        for entry_name, shape, start, stop in self.entries:
            if entry_name == name:
                return shape, start, stop
        raise LayoutMismatchError(f"no tensor named {name!r}")


def layout_for(cfg: EncoderConfig) -> ParamLayout:
    entries: list[tuple[str, tuple[int, ...], int, int]] = []
    offset = 0

    def add(name: str, shape: tuple[int, ...]):
        nonlocal offset
        size = int(np.prod(shape))
        entries.append((name, shape, offset, offset + size))
        offset += size

    for side, d_in in (("text", cfg.d_t), ("image", cfg.d_i)):
        if cfg.architecture == "linear":
            add(f"{side}.W", (cfg.k, d_in))
            if cfg.bias:
                add(f"{side}.b", (cfg.k,))
        else:
            add(f"{side}.W1", (cfg.hidden, d_in))
            if cfg.bias:
                add(f"{side}.b1", (cfg.hidden,))
            add(f"{side}.W2", (cfg.k, cfg.hidden))
            if cfg.bias:
                add(f"{side}.b2", (cfg.k,))
    if cfg.temperature_mode == "trainable":
        add("log_tau", (1,))
    return ParamLayout(entries=tuple(entries))


def scale_gauge_blocks(cfg: EncoderConfig) -> tuple[tuple[str, ...], ...]:
    """Parameter blocks whose joint rescaling leaves every cosine unchanged.

    For linear encoders, scaling all text-side tensors by c > 0 scales every
    text embedding by c and cancels in the cosine; same for the image side.
    The tanh encoder is not positively homogeneous, so it has no such blocks.
    """
    if cfg.architecture != "linear":
        return ()
    blocks = []
    for side in ("text", "image"):
        names = [f"{side}.W"] + ([f"{side}.b"] if cfg.bias else [])
        blocks.append(tuple(names))
    return tuple(blocks)


class ModelParams:
    """Flat parameter vector bound to an encoder config."""

    def __init__(self, config: EncoderConfig, flat: np.ndarray):
        self.config = config
        self.layout = layout_for(config)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.layout.size,):
            raise LayoutMismatchError(
                f"flat length {flat.shape} != layout size ({self.layout.size},)")
        if not np.all(np.isfinite(flat)):
            raise InvalidConfigError("parameters contain NaN/Inf")
        self.flat = flat.copy()
        self.flat.flags.writeable = False

    @property
    def size(self) -> int:
        return self.layout.size

    def tensor(self, name: str) -> np.ndarray:
        shape, start, stop = self.layout.slot(name)
        return self.flat[start:stop].reshape(shape)

    def tau(self) -> float:
        if self.config.temperature_mode == "trainable":
            return float(np.exp(self.tensor("log_tau")[0]))
        return self.config.tau

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.config, flat)


def flatten(tensors: dict[str, np.ndarray], layout: ParamLayout) -> np.ndarray:
    extra = set(tensors) - set(layout.names)
    if extra:
        raise LayoutMismatchError(f"unexpected tensors: {sorted(extra)}")
    flat = np.zeros(layout.size)
    for name, shape, start, stop in layout.entries:
        if name not in tensors:
            raise LayoutMismatchError(f"missing tensor {name!r}")
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != shape:
            raise LayoutMismatchError(
                f"tensor {name!r}: shape {arr.shape} != {shape}")
        flat[start:stop] = arr.ravel()
    return flat


def unflatten(flat: np.ndarray, layout: ParamLayout) -> dict[str, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (layout.size,):
        raise LayoutMismatchError(
            f"flat length {flat.shape} != layout size ({layout.size},)")
    return {
        name: flat[start:stop].reshape(shape).copy()
        for name, shape, start, stop in layout.entries
    }


def init_params(cfg: EncoderConfig, seed: int, scale: float = 0.1) -> ModelParams:
    """Zero-mean jitter init; trainable log-tau starts exactly at log(tau)."""
    layout = layout_for(cfg)
    rng = np.random.default_rng([int(seed), 3])
    flat = scale * rng.standard_normal(layout.size)
    if cfg.temperature_mode == "trainable":
        _, start, stop = layout.slot("log_tau")
        flat[start:stop] = np.log(cfg.tau)
    return ModelParams(cfg, flat)


# --- forward / backward -------------------------------------------------------


@dataclass
class SideCache:
    x: np.ndarray          # inputs (m, d_in)
    y: np.ndarray          # embeddings (m, k)
    hidden_act: np.ndarray | None = None  # tanh activations (m, h)


@dataclass
class BatchEmbedding:
    u: np.ndarray  # text embeddings (m, k)
    v: np.ndarray  # image embeddings (m, k)


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (m, m)
    tau: float


@dataclass
class BatchCache:
    """Everything needed to push a dS sensitivity back to the parameters."""

    text: SideCache
    image: SideCache
    u_norms: np.ndarray
    v_norms: np.ndarray
    cosines: np.ndarray
    similarities: np.ndarray
    inv_tau: float


def _encode(params: ModelParams, x: np.ndarray, side: str) -> SideCache:
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatchError("inputs must be a 2-d matrix")
    expected = cfg.d_t if side == "text" else cfg.d_i
    if x.shape[1] != expected:
        raise DimensionMismatchError(
            f"{side} inputs have dim {x.shape[1]}, expected {expected}")
    if cfg.architecture == "linear":
        y = x @ params.tensor(f"{side}.W").T
        if cfg.bias:
            y = y + params.tensor(f"{side}.b")
        return SideCache(x=x, y=y)
    pre = x @ params.tensor(f"{side}.W1").T
    if cfg.bias:
        pre = pre + params.tensor(f"{side}.b1")
    act = np.tanh(pre)
    y = act @ params.tensor(f"{side}.W2").T
    if cfg.bias:
        y = y + params.tensor(f"{side}.b2")
    return SideCache(x=x, y=y, hidden_act=act)


def _encode_backward(params: ModelParams, cache: SideCache, dy: np.ndarray,
                     side: str, grad: np.ndarray) -> None:
    cfg = params.config
    layout = params.layout

    def accumulate(name: str, value: np.ndarray):
        _, start, stop = layout.slot(name)
        grad[start:stop] += value.ravel()

    if cfg.architecture == "linear":
        accumulate(f"{side}.W", dy.T @ cache.x)
        if cfg.bias:
            accumulate(f"{side}.b", dy.sum(axis=0))
        return
    act = cache.hidden_act
    accumulate(f"{side}.W2", dy.T @ act)
    if cfg.bias:
        accumulate(f"{side}.b2", dy.sum(axis=0))
    dact = dy @ params.tensor(f"{side}.W2")
    dpre = dact * (1.0 - act * act)
    accumulate(f"{side}.W1", dpre.T @ cache.x)
    if cfg.bias:
        accumulate(f"{side}.b1", dpre.sum(axis=0))


def _row_norms(y: np.ndarray, side: str) -> np.ndarray:
    norms = np.linalg.norm(y, axis=1)
    bad = np.where(norms < ZERO_NORM_TOL)[0]
    if bad.size:
        raise ZeroNormEmbeddingError(
            f"{side} embedding rows {bad.tolist()} have norm < {ZERO_NORM_TOL:g}")
    return norms


def embed(params: ModelParams, x_text: np.ndarray, x_image: np.ndarray) -> BatchEmbedding:
    """Embed a batch of pairs; rejects (near-)zero-norm embedding rows."""
    text = _encode(params, np.atleast_2d(x_text), "text")
    image = _encode(params, np.atleast_2d(x_image), "image")
    _row_norms(text.y, "text")
    _row_norms(image.y, "image")
    return BatchEmbedding(u=text.y, v=image.y)


def similarity(u: np.ndarray, v: np.ndarray, tau: float = 1.0) -> float:
    """Temperature-scaled cosine: (u . v) / (|u| |v|) / tau."""
    if not tau > 0:
        raise InvalidConfigError("tau must be > 0")
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionMismatchError("u and v must have the same length")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < ZERO_NORM_TOL or nv < ZERO_NORM_TOL:
        raise ZeroNormEmbeddingError("cosine undefined for zero-norm vector")
    return float(u @ v) / (nu * nv) / tau


def batch_forward(params: ModelParams, x_text: np.ndarray, x_image: np.ndarray) -> tuple[np.ndarray, BatchCache]:
    """Similarity matrix S plus the cache for batch_backward."""
    text = _encode(params, np.atleast_2d(x_text), "text")
    image = _encode(params, np.atleast_2d(x_image), "image")
    if text.y.shape[0] != image.y.shape[0]:
        raise DimensionMismatchError("text/image batch sizes differ")
    u_norms = _row_norms(text.y, "text")
    v_norms = _row_norms(image.y, "image")
    cosines = (text.y @ image.y.T) / np.outer(u_norms, v_norms)
    inv_tau = 1.0 / params.tau()
    similarities = cosines * inv_tau
    cache = BatchCache(text=text, image=image, u_norms=u_norms, v_norms=v_norms,
                       cosines=cosines, similarities=similarities, inv_tau=inv_tau)
    return similarities, cache


def batch_backward(params: ModelParams, cache: BatchCache, d_s: np.ndarray,
                   grad: np.ndarray | None = None) -> np.ndarray:
    """Accumulate d(loss)/d(theta) given d(loss)/dS for one batch.

    Chain: S = cos(u_i, v_j) / tau, with d cos/du = (v_hat - cos * u_hat)/|u|.
    When the temperature is trainable, dS/d(log tau) = -S contributes to the
    final coordinate.
    """
    if grad is None:
        grad = np.zeros(params.size)
    d_cos = d_s * cache.inv_tau
    u, v = cache.text.y, cache.image.y
    u_hat = u / cache.u_norms[:, None]
    v_hat = v / cache.v_norms[:, None]
    cos = cache.cosines
    row_mix = (d_cos * cos).sum(axis=1)
    col_mix = (d_cos * cos).sum(axis=0)
    du = (d_cos @ v_hat - row_mix[:, None] * u_hat) / cache.u_norms[:, None]
    dv = (d_cos.T @ u_hat - col_mix[:, None] * v_hat) / cache.v_norms[:, None]
    _encode_backward(params, cache.text, du, "text", grad)
    _encode_backward(params, cache.image, dv, "image", grad)
    if params.config.temperature_mode == "trainable":
        _, start, stop = params.layout.slot("log_tau")
        grad[start:stop] += -float((d_s * cache.similarities).sum())
    return grad


def similarity_matrix(params: ModelParams, x_text: np.ndarray, x_image: np.ndarray) -> SimilarityMatrix:
    values, cache = batch_forward(params, x_text, x_image)
    return SimilarityMatrix(values=values, tau=1.0 / cache.inv_tau)


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, seed: int = 0, extra: dict | None = None) -> None:
    payload = {
        "config": params.config.to_dict(),
        "flat": params.flat,
        "seed": int(seed),
        "version": CHECKPOINT_VERSION,
    }
    if extra:
        payload["extra"] = extra
    jsonio.dump_file(payload, path)


def load_checkpoint(path) -> tuple[ModelParams, int]:
    payload = jsonio.load_file(path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfigError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = EncoderConfig.from_dict(payload["config"])
    params = ModelParams(cfg, np.asarray(payload["flat"], dtype=np.float64))
    return params, int(payload.get("seed", 0))
