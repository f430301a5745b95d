"""Frozen forecasting backbone: patch encoder plus linear projection head.

The encoder splits an instance-normalised context into non-overlapping
patches, embeds each one linearly, mean-pools over patches and applies
``tanh``. The head maps an embedding to an L-step forecast in normalised
space. After :func:`pretrain_backbone` returns, every tensor is read-only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .core import TimeSeriesPair, normalized_arrays
from .errors import DimMismatchError, FormatError
from .optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)

MAGIC = b"TSRB"
VERSION = 1
TENSORS = ("patch_W", "patch_b", "head_W", "head_b")


@dataclass(frozen=True)
class BackboneConfig:
    T: int = 512
    L: int = 64
    P: int = 64
    d: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.P < 1 or self.T % self.P:
            raise ValueError(f"T={self.T} must be a positive multiple of P={self.P}")
        if self.d < 8:
            raise ValueError(f"d must be >= 8, got {self.d}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")

    @property
    def n_patches(self) -> int:
        return self.T // self.P


@dataclass
class BackboneParams:
    config: BackboneConfig
    patch_W: np.ndarray
    patch_b: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray
    frozen: bool = False
    loss_curve: list = field(default_factory=list, compare=False, repr=False)

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in TENSORS}

    def freeze(self) -> "BackboneParams":
        for arr in self.tensors().values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def to_bytes(self) -> bytes:
        w = binio.Writer(MAGIC, VERSION)
        c = self.config
        for v in (c.T, c.L, c.P, c.d):
            w.u32(v)
        w.u64(c.seed)
        w.u32(1 if self.frozen else 0)
        for name in TENSORS:
            w.array(getattr(self, name))
        return w.getvalue()

    @property
    def fingerprint(self) -> str:
        return binio.digest(self.to_bytes())


def init_backbone(config: BackboneConfig) -> BackboneParams:
    rng = np.random.default_rng([config.seed, 101])
    a = 1.0 / np.sqrt(config.P)
    b = 1.0 / np.sqrt(config.d)
    return BackboneParams(
        config=config,
        patch_W=rng.uniform(-a, a, size=(config.P, config.d)),
        patch_b=np.zeros(config.d),
        head_W=rng.uniform(-b, b, size=(config.d, config.L)),
        head_b=np.zeros(config.L),
    )


def _check_len(x: np.ndarray, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise DimMismatchError(f"{what} has length {x.shape[-1]}, expected {n}")


def _pre_activation(X: np.ndarray, params: BackboneParams) -> np.ndarray:
    c = params.config
    patches = X.reshape(X.shape[0], c.n_patches, c.P)
    return (patches @ params.patch_W + params.patch_b).mean(axis=1)


def encode(context, params: BackboneParams) -> np.ndarray:
    """Embed one normalised context (length T) or a batch of shape (n, T)."""
    X = np.asarray(context, dtype=np.float64)
    _check_len(X, params.config.T, "context")
    single = X.ndim == 1
    X2 = X[None] if single else X
    out = np.tanh(_pre_activation(X2, params))
    return out[0] if single else out


def project(e, params: BackboneParams) -> np.ndarray:
    """Affine forecast head: embedding(s) of length d -> L normalised steps."""
    e = np.asarray(e, dtype=np.float64)
    _check_len(e, params.config.d, "embedding")
    return e @ params.head_W + params.head_b


def project_grad_W(e, upstream) -> np.ndarray:
    """d(upstream . project(e)) / d head_W for a single embedding."""
    return np.outer(np.asarray(e, dtype=np.float64), np.asarray(upstream, dtype=np.float64))


def pretrain_backbone(
    pairs: list[TimeSeriesPair],
    config: BackboneConfig,
    epochs: int = 30,
    lr: float = 3e-3,
    batch_size: int = 64,
    weight_decay: float = 0.01,
) -> BackboneParams:
    """Fit encoder and head by minimising squared error on normalised horizons.

    Minibatch order is drawn from ``config.seed`` so the result is
    reproducible. The full-corpus loss after each epoch is appended to
    ``params.loss_curve``. The returned params are frozen.
    """
    if not pairs:
        raise ValueError("pretrain_backbone needs at least one pair")
    X, Y = normalized_arrays(pairs)
    _check_len(X, config.T, "context")
    _check_len(Y, config.L, "horizon")
    params = init_backbone(config)
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([config.seed, 202])
    n = X.shape[0]
    # mean-pooling commutes with the patch projection, so the encoder only
    # ever sees the per-window mean patch
    Xbar = X.reshape(n, config.n_patches, config.P).mean(axis=1)
    tensors = params.tensors()

    def full_loss() -> float:
        pred = project(encode(X, params), params)
        return float(np.mean((pred - Y) ** 2))

    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = Xbar[idx], Y[idx]
            E = np.tanh(xb @ params.patch_W + params.patch_b)
            pred = E @ params.head_W + params.head_b
            g = 2.0 * (pred - yb) / pred.size
            dE = g @ params.head_W.T
            dH = dE * (1.0 - E * E)
            grads = {
                "head_W": E.T @ g,
                "head_b": g.sum(axis=0),
                "patch_W": xb.T @ dH,
                "patch_b": dH.sum(axis=0),
            }
            adamw_step(tensors, grads, state)
        params.loss_curve.append(full_loss())
        logger.debug("backbone epoch %d loss %.6f", epoch, params.loss_curve[-1])
    return params.freeze()


def save_backbone(params: BackboneParams, path) -> None:
    binio.write_bytes(path, params.to_bytes())


def backbone_from_bytes(data: bytes, expected: BackboneConfig | None = None) -> BackboneParams:
    r = binio.Reader(data, MAGIC, VERSION, "backbone checkpoint")
    T, L, P, d = (r.u32() for _ in range(4))
    seed = r.u64()
    frozen = bool(r.u32())
    arrays = {name: r.array().copy() for name in TENSORS}
    r.finish()
    try:
        config = BackboneConfig(T=T, L=L, P=P, d=d, seed=seed)
    except ValueError as exc:
        raise FormatError(f"backbone checkpoint: invalid config block ({exc})") from exc
    shapes = {"patch_W": (P, d), "patch_b": (d,), "head_W": (d, L), "head_b": (L,)}
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise FormatError(f"backbone checkpoint: {name} has shape {arrays[name].shape}, expected {shape}")
    if expected is not None:
        for fld in ("T", "L", "P", "d"):
            got, want = getattr(config, fld), getattr(expected, fld)
            if got != want:
                raise DimMismatchError(f"backbone checkpoint {fld}={got} but runtime config {fld}={want}")
    params = BackboneParams(config=config, **arrays)
    return params.freeze() if frozen else params


def load_backbone(path, expected: BackboneConfig | None = None) -> BackboneParams:
    return backbone_from_bytes(binio.read_bytes(path), expected)
