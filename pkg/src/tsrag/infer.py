"""Zero-shot forecasting with retrieval, rolling forecasts and latency probes."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .arm import ArmParams, fuse_forward
from .backbone import BackboneParams, encode, project
from .core import denormalize, window_stats, zscore
from .errors import DimMismatchError
from .retrieval import EUCLIDEAN, DistanceMetric, KnowledgeBase, check_encoder, lookback_mask, top_k


@dataclass
class Engine:
    backbone: BackboneParams
    arm: ArmParams
    kb: KnowledgeBase
    k: int = 10
    metric: DistanceMetric = EUCLIDEAN
    bypass_arm: bool = False

    def __post_init__(self):
        check_encoder(self.kb, self.backbone)
        c = self.backbone.config
        if self.arm.config.d != c.d or self.arm.config.L != c.L:
            raise DimMismatchError(
                f"mixer has d={self.arm.config.d}, L={self.arm.config.L}; backbone has d={c.d}, L={c.L}"
            )

    @property
    def T(self) -> int:
        return self.backbone.config.T

    @property
    def L(self) -> int:
        return self.backbone.config.L


@dataclass
class StepTrace:
    indices: np.ndarray
    distances: np.ndarray
    alpha: np.ndarray
    e_q: np.ndarray
    e_final: np.ndarray


@dataclass
class ForecastResult:
    forecast: np.ndarray
    traces: list = field(default_factory=list)
    retrieval_ms: float = 0.0
    forward_ms: float = 0.0
    fallback: bool = False

    @property
    def timings(self) -> tuple[float, float]:
        return self.retrieval_ms, self.forward_ms


def _check_context(context, T: int) -> np.ndarray:
    x = np.asarray(context, dtype=np.float64)
    if x.ndim != 1 or x.size != T:
        raise DimMismatchError(f"context has length {x.size}, expected {T}")
    return x


def forecast(context, engine: Engine, k: int | None = None, metric: DistanceMetric | None = None,
             bypass_arm: bool | None = None) -> ForecastResult:
    """One L-step forecast for a raw context of length T.

    The context is z-scored by its own statistics, embedded, used as the
    retrieval key, fused with the retrieved horizons and projected by the
    backbone head; the forecast is mapped back with the same statistics.
    With ``k == 0`` or an empty KB the mixer runs on the query row alone and
    ``fallback`` is set. With ``bypass_arm`` the pure backbone forecast is
    returned.
    """
    k = engine.k if k is None else k
    metric = engine.metric if metric is None else metric
    bypass = engine.bypass_arm if bypass_arm is None else bypass_arm
    x = _check_context(context, engine.T)

    t0 = time.perf_counter()
    stats = window_stats(x)
    xn = zscore(x, stats)
    e_q = encode(xn, engine.backbone)
    fallback = bypass or k == 0 or len(engine.kb) == 0
    if fallback:
        idx, dist = np.zeros(0, dtype=np.int64), np.zeros(0)
        horizons = np.zeros((0, engine.L))
    else:
        key = xn if metric.kind == "dtw" else (
            e_q if engine.kb.meta.lookback >= engine.T else encode(lookback_mask(xn, engine.kb.meta.lookback), engine.backbone)
        )
        found = top_k(engine.kb, key, k, metric)
        idx, dist, horizons = found.indices, found.distances, found.horizons
    t1 = time.perf_counter()

    if bypass:
        e_final, alpha = e_q, np.ones(1)
    else:
        e_final, trace = fuse_forward(e_q, horizons, engine.arm, mode="eval")
        alpha = trace.squeezed("alpha")
    pred = denormalize(project(e_final, engine.backbone), stats)
    t2 = time.perf_counter()
    return ForecastResult(
        forecast=pred,
        traces=[StepTrace(idx, dist, alpha, e_q, e_final)],
        retrieval_ms=1e3 * (t1 - t0),
        forward_ms=1e3 * (t2 - t1),
        fallback=fallback,
    )


def rolling_forecast(context, engine: Engine, H: int, **kwargs) -> ForecastResult:
    """Forecast H steps in ceil(H/L) rounds.

    Each round's forecast is appended to the window and the oldest L points
    are dropped, so every round sees a length-T context; retrieval is redone
    every round.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    x = _check_context(context, engine.T)
    L = engine.L
    pieces, traces = [], []
    ret_ms = fwd_ms = 0.0
    fallback = False
    for _ in range(math.ceil(H / L)):
        r = forecast(x, engine, **kwargs)
        pieces.append(r.forecast)
        traces.extend(r.traces)
        ret_ms += r.retrieval_ms
        fwd_ms += r.forward_ms
        fallback = fallback or r.fallback
        x = np.concatenate([x, r.forecast])[-engine.T:]
    if len(pieces) == 1 and H == L:
        out = pieces[0]
    else:
        out = np.concatenate(pieces)[:H]
    return ForecastResult(out, traces, ret_ms, fwd_ms, fallback)


def forecast_batch(contexts, engine: Engine, k: int | None = None, metric: DistanceMetric | None = None,
                   bypass_arm: bool | None = None) -> np.ndarray:
    """Forecasts for many raw contexts, (n, T) -> (n, L).

    Same pipeline as :func:`forecast` with the mixer and head applied to the
    whole batch at once.
    """
    k = engine.k if k is None else k
    metric = engine.metric if metric is None else metric
    bypass = engine.bypass_arm if bypass_arm is None else bypass_arm
    X = np.asarray(contexts, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != engine.T:
        raise DimMismatchError(f"contexts of shape {X.shape}, expected (n, {engine.T})")
    mu = X.mean(axis=1, keepdims=True)
    sd = np.maximum(X.std(axis=1, keepdims=True), 1e-8)
    Xn = (X - mu) / sd
    E_q = encode(Xn, engine.backbone)
    if bypass:
        E = E_q
    else:
        if k == 0 or len(engine.kb) == 0:
            H = np.zeros((X.shape[0], 0, engine.L))
        else:
            if metric.kind == "dtw":
                keys = Xn
            elif engine.kb.meta.lookback >= engine.T:
                keys = E_q
            else:
                keys = encode(lookback_mask(Xn, engine.kb.meta.lookback), engine.backbone)
            idx = np.stack([top_k(engine.kb, keys[i], k, metric).indices for i in range(X.shape[0])])
            H = engine.kb.horizons[idx]
        E, _ = fuse_forward(E_q, H, engine.arm, mode="eval")
    return project(E, engine.backbone) * sd + mu


def rolling_forecast_batch(contexts, engine: Engine, H: int, **kwargs) -> np.ndarray:
    X = np.asarray(contexts, dtype=np.float64)
    pieces = []
    for _ in range(math.ceil(H / engine.L)):
        P = forecast_batch(X, engine, **kwargs)
        pieces.append(P)
        X = np.concatenate([X, P], axis=1)[:, -engine.T:]
    return np.concatenate(pieces, axis=1)[:, :H]


@dataclass
class LatencyReport:
    retrieval_ms: float
    forward_ms: float
    total_ms: float
    n_measured: int
    kb_size: int

    def __str__(self) -> str:
        return (f"kb={self.kb_size} retrieval={self.retrieval_ms:.3f} ms/iter "
                f"forward={self.forward_ms:.3f} ms/iter total={self.total_ms:.3f} ms/iter")


def measure_latency(engine: Engine, queries, k: int | None = None, repetitions: int = 3, warmup: int = 1) -> LatencyReport:
    """Mean wall-clock cost per query of the retrieval and forward stages.

    The first ``warmup`` passes over ``queries`` are discarded.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[0] < 1:
        raise ValueError("measure_latency needs at least one query")
    ret, fwd = [], []
    for rep in range(warmup + repetitions):
        for q in Q:
            r = forecast(q, engine, k=k)
            if rep >= warmup:
                ret.append(r.retrieval_ms)
                fwd.append(r.forward_ms)
    r_ms, f_ms = float(np.mean(ret)), float(np.mean(fwd))
    return LatencyReport(r_ms, f_ms, r_ms + f_ms, len(ret), len(engine.kb))
