"""Adaptive Retrieval Mixer and the gated-fusion baseline, with analytic gradients.

Forward pass for a query embedding ``e_q`` (d) and k retrieved horizons
(k, L)::

    E_ret    = relu(Y W1 + b1) W2 + b2                 (k, d)
    E_concat = [e_q; E_ret]                            (k+1, d)
    E_att    = MHA(E_concat) + E_concat
    E_ffn    = dropout(relu(E_att F1 + c1) F2 + c2) + E_att
    alpha    = softmax(E_ffn w_g + b_g)                over the k+1 rows
    e_final  = e_q + sum_i alpha_i E_ffn[i]

Attention is plain scaled dot-product self-attention without positional
encoding or masking. All arrays carry a leading batch axis internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import DimMismatchError, FormatError

ARM_TENSORS = (
    "proj_W1", "proj_b1", "proj_W2", "proj_b2",
    "attn_Wqkv", "attn_bqkv", "attn_Wo", "attn_bo",
    "ffn_W1", "ffn_b1", "ffn_W2", "ffn_b2",
    "score_w", "score_b",
)
PROJECTOR_TENSORS = ARM_TENSORS[:4]
GATE_TENSORS = PROJECTOR_TENSORS + ("gate",)


@dataclass(frozen=True)
class ArmConfig:
    k: int = 10
    d: int = 64
    L: int = 64
    heads: int = 4
    ffn_hidden: int | None = None
    dropout_p: float = 0.2
    proj_hidden: int | None = None
    seed: int = 0
    fusion: str = "arm"

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.fusion not in ("arm", "gate"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        # defaults follow the usual transformer proportions
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.d)
        if self.proj_hidden is None:
            object.__setattr__(self, "proj_hidden", self.d)

    def shapes(self) -> dict:
        d, L, ph, fh = self.d, self.L, self.proj_hidden, self.ffn_hidden
        s = {
            "proj_W1": (L, ph), "proj_b1": (ph,), "proj_W2": (ph, d), "proj_b2": (d,),
        }
        if self.fusion == "gate":
            s["gate"] = (1,)
            return s
        s.update({
            "attn_Wqkv": (d, 3 * d), "attn_bqkv": (3 * d,), "attn_Wo": (d, d), "attn_bo": (d,),
            "ffn_W1": (d, fh), "ffn_b1": (fh,), "ffn_W2": (fh, d), "ffn_b2": (d,),
            "score_w": (d,), "score_b": (1,),
        })
        return s


@dataclass
class ArmParams:
    config: ArmConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ArmParams":
        return ArmParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def names(self):
        return tuple(self.config.shapes())


def init_arm(config: ArmConfig) -> ArmParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases (and the gate) zero."""
    rng = np.random.default_rng([config.seed, 303])
    tensors = {}
    for name, shape in config.shapes().items():
        if len(shape) == 2:
            a = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-a, a, size=shape)
        elif name == "score_w":
            a = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-a, a, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ArmParams(config, tensors)


def init_gate(config: ArmConfig) -> ArmParams:
    from dataclasses import replace

    return init_arm(replace(config, fusion="gate"))


# ---------------------------------------------------------------------------
# helpers


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _as_batch(e_q, horizons, d, L):
    e_q = np.asarray(e_q, dtype=np.float64)
    Y = np.asarray(horizons, dtype=np.float64)
    single = e_q.ndim == 1
    if Y.size and Y.shape[-1] != L:
        raise DimMismatchError(f"horizon length {Y.shape[-1]}, expected L={L}")
    if single:
        e_q = e_q[None]
        Y = Y.reshape(1, -1, L) if Y.size else np.zeros((1, 0, L))
    elif Y.size == 0:
        Y = np.zeros((e_q.shape[0], 0, L))
    if e_q.shape[-1] != d:
        raise DimMismatchError(f"query embedding has length {e_q.shape[-1]}, expected d={d}")
    if Y.ndim != 3 or Y.shape[-1] != L or Y.shape[0] != e_q.shape[0]:
        raise DimMismatchError(f"horizons of shape {Y.shape} do not match batch {e_q.shape[0]} x k x L={L}")
    return e_q, Y, single


def mix(e_q: np.ndarray, alpha: np.ndarray, E_ffn: np.ndarray) -> np.ndarray:
    """e_q + sum_i alpha_i E_ffn[i], accumulated row by row in index order."""
    acc = np.zeros_like(e_q)
    for i in range(alpha.shape[-1]):
        acc = acc + alpha[..., i, None] * E_ffn[..., i, :]
    return e_q + acc


def project_horizons(horizons, params: ArmParams) -> np.ndarray:
    """Two-layer ReLU projector applied independently to each horizon row."""
    Y = np.asarray(horizons, dtype=np.float64)
    L = params.config.L
    if Y.shape[-1] != L and Y.size:
        raise DimMismatchError(f"horizon length {Y.shape[-1]}, expected L={L}")
    if Y.size == 0:
        return np.zeros(Y.shape[:-1] + (params.config.d,))
    return _relu(Y @ params["proj_W1"] + params["proj_b1"]) @ params["proj_W2"] + params["proj_b2"]


# ---------------------------------------------------------------------------
# ARM


@dataclass
class ArmTrace:
    E_ret: np.ndarray
    E_concat: np.ndarray
    E_att: np.ndarray
    E_ffn: np.ndarray
    alpha: np.ndarray
    e_final: np.ndarray
    dropout_mask: np.ndarray | None
    single: bool = False
    cache: dict = field(default_factory=dict, repr=False)

    def squeezed(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr[0] if self.single else arr


def dropout_mask(shape, p: float, rng) -> np.ndarray | None:
    if p <= 0.0:
        return None
    rng = np.random.default_rng(rng)
    return (rng.random(shape) >= p) / (1.0 - p)


def arm_forward(e_q, horizons, params: ArmParams, mode: str = "eval", rng=None, mask=None):
    """Run the mixer. Returns ``(e_final, trace)``.

    Accepts a single query (``e_q`` of shape (d,), horizons (k, L)) or a
    batch ((B, d), (B, k, L)). Dropout is active only in ``"train"`` mode;
    an explicit ``mask`` overrides the one drawn from ``rng``.
    """
    cfg = params.config
    if cfg.fusion != "arm":
        raise ValueError("arm_forward needs ARM params; use gated_fusion_forward for the gate")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    e_q, Y, single = _as_batch(e_q, horizons, cfg.d, cfg.L)
    B, k = Y.shape[0], Y.shape[1]
    d, h = cfg.d, cfg.heads
    dh = d // h
    n = k + 1

    H1 = Y @ params["proj_W1"] + params["proj_b1"]
    A1 = _relu(H1)
    E_ret = A1 @ params["proj_W2"] + params["proj_b2"]
    X = np.concatenate([e_q[:, None, :], E_ret], axis=1)

    QKV = X @ params["attn_Wqkv"] + params["attn_bqkv"]
    # (B, n, 3d) -> three (B, h, n, dh)
    Q, K, V = (QKV[..., i * d:(i + 1) * d].reshape(B, n, h, dh).transpose(0, 2, 1, 3) for i in range(3))
    scale = 1.0 / np.sqrt(dh)
    S = (Q @ K.transpose(0, 1, 3, 2)) * scale
    A = _softmax(S)
    O = (A @ V).transpose(0, 2, 1, 3).reshape(B, n, d)
    E_att = O @ params["attn_Wo"] + params["attn_bo"] + X

    F1 = E_att @ params["ffn_W1"] + params["ffn_b1"]
    G = _relu(F1)
    F2 = G @ params["ffn_W2"] + params["ffn_b2"]
    if mode == "train":
        if mask is None:
            mask = dropout_mask(F2.shape, cfg.dropout_p, rng)
        elif single and mask.ndim == 2:
            mask = mask[None]
    else:
        mask = None
    E_ffn = (F2 * mask if mask is not None else F2) + E_att

    s = E_ffn @ params["score_w"] + params["score_b"][0]
    alpha = _softmax(s)
    e_final = mix(e_q, alpha, E_ffn)

    trace = ArmTrace(
        E_ret=E_ret, E_concat=X, E_att=E_att, E_ffn=E_ffn, alpha=alpha, e_final=e_final,
        dropout_mask=mask, single=single,
        cache=dict(Y=Y, H1=H1, A1=A1, Q=Q, K=K, V=V, A=A, O=O, F1=F1, G=G, scale=scale),
    )
    return (e_final[0] if single else e_final), trace


def arm_backward(trace: ArmTrace, de_final, params: ArmParams) -> tuple[dict, np.ndarray]:
    """Reverse-mode gradients of ``sum(de_final * e_final)``.

    Returns ``(grads, d_e_q)`` where ``grads`` holds one array per ARM tensor,
    summed over the batch. The dropout mask recorded in the trace is reused.
    """
    cfg = params.config
    g = np.asarray(de_final, dtype=np.float64)
    if trace.single and g.ndim == 1:
        g = g[None]
    c = trace.cache
    X, E_att, E_ffn, alpha = trace.E_concat, trace.E_att, trace.E_ffn, trace.alpha
    if g.shape != trace.e_final.shape:
        raise DimMismatchError(f"upstream gradient shape {g.shape} != e_final shape {trace.e_final.shape}")
    B, n, d = X.shape
    h = cfg.heads
    dh = d // h
    P = params.tensors

    de_q = g.copy()
    # mixing and scorer
    dalpha = np.einsum("bnd,bd->bn", E_ffn, g)
    dE_ffn = alpha[..., None] * g[:, None, :]
    ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    grads = {
        "score_w": np.einsum("bnd,bn->d", E_ffn, ds),
        "score_b": np.array([ds.sum()]),
    }
    dE_ffn = dE_ffn + ds[..., None] * P["score_w"]

    # FFN with dropout and residual
    dF2 = dE_ffn * trace.dropout_mask if trace.dropout_mask is not None else dE_ffn
    grads["ffn_W2"] = np.einsum("bnf,bnd->fd", c["G"], dF2)
    grads["ffn_b2"] = dF2.sum(axis=(0, 1))
    dF1 = (dF2 @ P["ffn_W2"].T) * (c["F1"] > 0)
    grads["ffn_W1"] = np.einsum("bnd,bnf->df", E_att, dF1)
    grads["ffn_b1"] = dF1.sum(axis=(0, 1))
    dE_att = dE_ffn + dF1 @ P["ffn_W1"].T

    # attention with residual
    grads["attn_Wo"] = np.einsum("bni,bnj->ij", c["O"], dE_att)
    grads["attn_bo"] = dE_att.sum(axis=(0, 1))
    dO = (dE_att @ P["attn_Wo"].T).reshape(B, n, h, dh).transpose(0, 2, 1, 3)
    A, Q, K, V, scale = c["A"], c["Q"], c["K"], c["V"], c["scale"]
    dA = dO @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q
    merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, n, d)  # noqa: E731
    dQKV = np.concatenate([merge(dQ), merge(dK), merge(dV)], axis=-1)
    grads["attn_Wqkv"] = np.einsum("bni,bnj->ij", X, dQKV)
    grads["attn_bqkv"] = dQKV.sum(axis=(0, 1))
    dX = dE_att + dQKV @ P["attn_Wqkv"].T

    de_q += dX[:, 0, :]
    _projector_backward(dX[:, 1:, :], c["Y"], c["H1"], c["A1"], P, grads)
    if trace.single:
        de_q = de_q[0]
    return {name: grads[name] for name in ARM_TENSORS}, de_q


def _projector_backward(dE_ret, Y, H1, A1, P, grads) -> None:
    grads["proj_W2"] = np.einsum("bkp,bkd->pd", A1, dE_ret)
    grads["proj_b2"] = dE_ret.sum(axis=(0, 1))
    dH1 = (dE_ret @ P["proj_W2"].T) * (H1 > 0)
    grads["proj_W1"] = np.einsum("bkl,bkp->lp", Y, dH1)
    grads["proj_b1"] = dH1.sum(axis=(0, 1))


# ---------------------------------------------------------------------------
# gated fusion baseline


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gated_fusion_forward(e_q, horizons, params: ArmParams, mode: str = "eval", rng=None, mask=None):
    """sigmoid(g) * e_q + (1 - sigmoid(g)) * mean(E_ret); with k = 0 returns e_q.

    ``mode``, ``rng`` and ``mask`` are accepted for signature parity with
    :func:`arm_forward`; the gate has no dropout.
    """
    cfg = params.config
    if cfg.fusion != "gate":
        raise ValueError("gated_fusion_forward needs gate params")
    e_q, Y, single = _as_batch(e_q, horizons, cfg.d, cfg.L)
    k = Y.shape[1]
    g = params["gate"][0]
    sig = _sigmoid(g)
    H1 = Y @ params["proj_W1"] + params["proj_b1"]
    A1 = _relu(H1)
    E_ret = A1 @ params["proj_W2"] + params["proj_b2"]
    if k == 0:
        e_final = e_q.copy()
        mean_ret = np.zeros_like(e_q)
    else:
        mean_ret = E_ret.mean(axis=1)
        e_final = sig * e_q + (1.0 - sig) * mean_ret
    trace = ArmTrace(
        E_ret=E_ret, E_concat=np.concatenate([e_q[:, None, :], E_ret], axis=1), E_att=None, E_ffn=None,
        alpha=np.tile(np.array([sig] + [(1.0 - sig) / k] * k), (e_q.shape[0], 1)) if k else np.ones((e_q.shape[0], 1)),
        e_final=e_final, dropout_mask=None, single=single,
        cache=dict(Y=Y, H1=H1, A1=A1, mean_ret=mean_ret, e_q=e_q, sig=sig, k=k),
    )
    return (e_final[0] if single else e_final), trace


def gated_fusion_backward(trace: ArmTrace, de_final, params: ArmParams) -> tuple[dict, np.ndarray]:
    c = trace.cache
    g = np.asarray(de_final, dtype=np.float64)
    if trace.single and g.ndim == 1:
        g = g[None]
    k, sig = c["k"], c["sig"]
    grads = {name: np.zeros_like(params[name]) for name in GATE_TENSORS}
    if k == 0:
        de_q = g.copy()
    else:
        de_q = sig * g
        grads["gate"] = np.array([np.sum(g * (c["e_q"] - c["mean_ret"])) * sig * (1.0 - sig)])
        dE_ret = np.repeat(((1.0 - sig) / k * g)[:, None, :], k, axis=1)
        _projector_backward(dE_ret, c["Y"], c["H1"], c["A1"], params.tensors, grads)
    return grads, (de_q[0] if trace.single else de_q)


def fuse_forward(e_q, horizons, params: ArmParams, mode="eval", rng=None, mask=None):
    fn = arm_forward if params.config.fusion == "arm" else gated_fusion_forward
    return fn(e_q, horizons, params, mode=mode, rng=rng, mask=mask)


def fuse_backward(trace, de_final, params: ArmParams):
    fn = arm_backward if params.config.fusion == "arm" else gated_fusion_backward
    return fn(trace, de_final, params)


# ---------------------------------------------------------------------------
# serialisation (embedded in engine checkpoints)


def write_arm(w: binio.Writer, params: ArmParams) -> None:
    c = params.config
    w.string(c.fusion)
    for v in (c.k, c.d, c.L, c.heads, c.ffn_hidden, c.proj_hidden):
        w.u32(v)
    w.f64(c.dropout_p)
    w.u64(c.seed)
    for name in params.names():
        w.array(params[name])


def read_arm(r: binio.Reader) -> ArmParams:
    fusion = r.string()
    k, d, L, heads, fh, ph = (r.u32() for _ in range(6))
    p = r.f64()
    seed = r.u64()
    try:
        cfg = ArmConfig(k=k, d=d, L=L, heads=heads, ffn_hidden=fh, dropout_p=p, proj_hidden=ph, seed=seed, fusion=fusion)
    except ValueError as exc:
        raise FormatError(f"engine checkpoint: invalid ARM config ({exc})") from exc
    tensors = {}
    for name, shape in cfg.shapes().items():
        arr = r.array().copy()
        if arr.shape != shape:
            raise FormatError(f"engine checkpoint: {name} has shape {arr.shape}, expected {shape}")
        tensors[name] = arr
    return ArmParams(cfg, tensors)
