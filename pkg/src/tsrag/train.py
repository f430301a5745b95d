"""Training loop for the mixer: the backbone stays frozen, only ARM tensors move."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import binio
from .arm import ArmParams, fuse_backward, fuse_forward, read_arm, write_arm
from .backbone import BackboneConfig, BackboneParams, encode
from .core import TimeSeriesPair, normalized_arrays
from .errors import DimMismatchError, FormatError, HashMismatchError, NumericError
from .optim import AdamWState, adamw_step
from .retrieval import DistanceMetric, KnowledgeBase, check_encoder, lookback_mask, top_k

logger = logging.getLogger(__name__)

__all__ = [
    "AdamWState", "adamw_step", "TrainConfig", "FULL_PRESET", "TrainResult",
    "retrieve_for_pairs", "train_arm", "dataset_loss", "Checkpoint",
    "save_engine", "load_engine", "write_loss_curve",
]

ENGINE_MAGIC = b"TSRE"
ENGINE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    k: int = 10
    dropout_p: float = 0.2
    eval_every: int = 100
    metric: str = "euclidean"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


FULL_PRESET = TrainConfig(batch_size=256, steps=10_000)


@dataclass
class TrainResult:
    params: ArmParams
    loss_curve: list = field(default_factory=list)   # (step, batch loss)
    eval_curve: list = field(default_factory=list)   # (step, full-set loss, eval mode)

    @property
    def initial_loss(self) -> float:
        return self.eval_curve[0][1]

    @property
    def final_loss(self) -> float:
        return self.eval_curve[-1][1]


def retrieve_for_pairs(
    pairs: list[TimeSeriesPair],
    kb: KnowledgeBase,
    backbone: BackboneParams,
    k: int,
    metric: DistanceMetric,
    exclude_self: bool = True,
) -> np.ndarray:
    """Top-k KB indices for every pair, (n, k_eff).

    With ``exclude_self`` an entry sharing the pair's origin is never
    returned. ``k_eff`` shrinks only when the KB is too small.
    """
    Xn, _ = normalized_arrays(pairs)
    keys = Xn if metric.kind == "dtw" else encode(lookback_mask(Xn, kb.meta.lookback), backbone)
    excluded = [kb.index_of(p.origin) if exclude_self else [] for p in pairs]
    k_eff = min([k] + [len(kb) - len(e) for e in excluded])
    if k_eff < k:
        warnings.warn(f"knowledge base too small for k={k}; retrieving {k_eff}", stacklevel=2)
    out = np.zeros((len(pairs), max(k_eff, 0)), dtype=np.int64)
    if k_eff <= 0:
        return out
    for i in range(len(pairs)):
        out[i] = top_k(kb, keys[i], k_eff, metric, exclude=excluded[i]).indices
    return out


def dataset_loss(e_q, retrieved_horizons, targets, arm: ArmParams, backbone: BackboneParams) -> float:
    """Eval-mode mean squared error of the fused forecast in normalised space."""
    e_final, _ = fuse_forward(e_q, retrieved_horizons, arm, mode="eval")
    pred = e_final @ backbone.head_W + backbone.head_b
    return float(np.mean((pred - targets) ** 2))


def train_arm(
    pairs: list[TimeSeriesPair],
    kb: KnowledgeBase,
    backbone: BackboneParams,
    arm: ArmParams,
    config: TrainConfig = TrainConfig(),
    neighbors: np.ndarray | None = None,
) -> TrainResult:
    """Fit the mixer (or gate) on (context, horizon) pairs with retrieval in the loop.

    Retrieval is computed once up front since the KB and encoder are frozen;
    ``neighbors`` may be passed to reuse a previous computation. ``arm`` is
    not modified; the trained copy is returned in the result.
    """
    if not pairs:
        raise ValueError("train_arm needs at least one pair")
    if not backbone.frozen:
        raise ValueError("the backbone must be frozen before training the mixer")
    check_encoder(kb, backbone)
    if arm.config.d != backbone.config.d or arm.config.L != backbone.config.L:
        raise DimMismatchError(
            f"mixer has d={arm.config.d}, L={arm.config.L}; backbone has d={backbone.config.d}, L={backbone.config.L}"
        )
    metric = DistanceMetric.parse(config.metric)
    params = arm.copy()
    if params.config.dropout_p != config.dropout_p:
        params = ArmParams(replace(params.config, dropout_p=config.dropout_p), params.tensors)

    Xn, Yn = normalized_arrays(pairs)
    E_q = encode(Xn, backbone)
    if neighbors is None:
        neighbors = retrieve_for_pairs(pairs, kb, backbone, config.k, metric)
    H = kb.horizons[neighbors]  # (n, k, L)

    state = AdamWState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng([config.seed, 404])
    n = len(pairs)
    bs = min(config.batch_size, n)
    W, b = backbone.head_W, backbone.head_b
    result = TrainResult(params)
    result.eval_curve.append((0, dataset_loss(E_q, H, Yn, params, backbone)))

    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=bs, replace=False)
        e_final, trace = fuse_forward(E_q[idx], H[idx], params, mode="train", rng=rng)
        pred = e_final @ W + b
        err = pred - Yn[idx]
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            origins = [pairs[i].origin for i in idx[:5]]
            raise NumericError(f"non-finite loss at step {step}; batch starts with {origins}")
        g_pred = 2.0 * err / err.size
        grads, _ = fuse_backward(trace, g_pred @ W.T, params)
        adamw_step(params.tensors, grads, state)
        result.loss_curve.append((step, loss))
        if step % config.eval_every == 0 or step == config.steps:
            result.eval_curve.append((step, dataset_loss(E_q, H, Yn, params, backbone)))
            logger.info("step %d batch loss %.5f full loss %.5f", step, loss, result.eval_curve[-1][1])
    return result


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in curve:
            w.writerow([step, repr(float(loss))])


# ---------------------------------------------------------------------------
# engine checkpoint


@dataclass
class Checkpoint:
    """Trained mixer plus a reference to the frozen backbone it was trained against."""

    arm: ArmParams
    backbone_hash: str
    backbone_config: BackboneConfig
    metric: str = "euclidean"
    k: int = 10

    def to_bytes(self) -> bytes:
        w = binio.Writer(ENGINE_MAGIC, ENGINE_VERSION)
        w.string(self.backbone_hash)
        c = self.backbone_config
        for v in (c.T, c.L, c.P, c.d):
            w.u32(v)
        w.u64(c.seed)
        w.string(self.metric)
        w.u32(self.k)
        write_arm(w, self.arm)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = binio.Reader(data, ENGINE_MAGIC, ENGINE_VERSION, "engine checkpoint")
        bb_hash = r.string()
        T, L, P, d = (r.u32() for _ in range(4))
        seed = r.u64()
        metric = r.string()
        k = r.u32()
        arm = read_arm(r)
        r.finish()
        try:
            bcfg = BackboneConfig(T=T, L=L, P=P, d=d, seed=seed)
            DistanceMetric.parse(metric)
        except ValueError as exc:
            raise FormatError(f"engine checkpoint: {exc}") from exc
        if arm.config.d != d or arm.config.L != L:
            raise DimMismatchError(f"engine checkpoint: mixer d={arm.config.d} vs backbone d={d}")
        return cls(arm, bb_hash, bcfg, metric, k)

    def check_backbone(self, backbone: BackboneParams) -> None:
        c = backbone.config
        if (c.T, c.L, c.d) != (self.backbone_config.T, self.backbone_config.L, self.backbone_config.d):
            raise DimMismatchError(
                f"engine expects backbone d={self.backbone_config.d}, T={self.backbone_config.T}, "
                f"L={self.backbone_config.L}; got d={c.d}, T={c.T}, L={c.L}"
            )
        if backbone.fingerprint != self.backbone_hash:
            raise HashMismatchError(f"engine trained against backbone {self.backbone_hash}, got {backbone.fingerprint}")


def save_engine(ckpt: Checkpoint, path) -> None:
    binio.write_bytes(path, ckpt.to_bytes())


def load_engine(path, backbone: BackboneParams | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(binio.read_bytes(path))
    if backbone is not None:
        ckpt.check_backbone(backbone)
    return ckpt
