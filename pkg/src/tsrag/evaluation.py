"""Metrics, evaluation runs, ablation tables and dataset characteristics."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .arm import ArmConfig, init_arm, init_gate
from .backbone import BackboneConfig, BackboneParams, pretrain_backbone
from .core import (
    GlobalScaler,
    MotifBank,
    Series,
    SplitSpec,
    TimeSeriesPair,
    generate_motif_corpus,
    make_motif_bank,
    make_pairs,
    split,
    stack_pairs,
)
from .errors import DimMismatchError, LeakageError, NumericError
from .infer import Engine, forecast_batch, rolling_forecast_batch
from .retrieval import LOOKBACKS, REGIMES, DistanceMetric, KnowledgeBase, build_kb, leakage_check
from .train import TrainConfig, TrainResult, retrieve_for_pairs, train_arm

logger = logging.getLogger(__name__)

CHAR_EPS = 1e-8
AXES = ("kb_regime", "top_k", "lookback", "metric", "fusion")


# ---------------------------------------------------------------------------
# metrics


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 1:
        raise DimMismatchError(f"metric inputs must have equal non-zero length, got {y.shape} and {yhat.shape}")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def pearson_corr(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DimMismatchError("pearson_corr needs two equal-length vectors of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise NumericError("pearson_corr is undefined for zero-variance input")
    return float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# characteristics


@dataclass
class Characteristics:
    autocorr_lag1: float
    noise_ratio: float
    volatility: float
    stationarity: float
    degenerate: bool = False


def characteristics(series) -> Characteristics:
    """Lag-1 autocorrelation, var(diff)/var(x), std/mean and var(diff) of one sequence."""
    x = np.asarray(series.values if isinstance(series, Series) else series, dtype=np.float64)
    if x.size < 3:
        raise ValueError("characteristics need a series of length >= 3")
    dx = np.diff(x)
    var_x = float(np.var(x))
    var_dx = float(np.var(dx))
    a, b = x[:-1], x[1:]
    degenerate = np.std(a) == 0 or np.std(b) == 0
    ac = 0.0 if degenerate else pearson_corr(a, b)
    mean = float(np.mean(x))
    std = float(np.std(x))
    if std == 0:
        vol = 0.0
    else:
        guard = mean if abs(mean) >= CHAR_EPS else (CHAR_EPS if mean >= 0 else -CHAR_EPS)
        vol = std / guard
    return Characteristics(ac, var_dx / max(var_x, CHAR_EPS), vol, var_dx, bool(degenerate))


def dataset_characteristics(sequences: Sequence) -> Characteristics:
    """Per-sequence characteristics averaged over a dataset."""
    rows = [characteristics(s) for s in sequences]
    if not rows:
        raise ValueError("no sequences")
    return Characteristics(
        float(np.mean([r.autocorr_lag1 for r in rows])),
        float(np.mean([r.noise_ratio for r in rows])),
        float(np.mean([r.volatility for r in rows])),
        float(np.mean([r.stationarity for r in rows])),
        any(r.degenerate for r in rows),
    )


# ---------------------------------------------------------------------------
# reports


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalRow:
    name: str
    mse: float
    mae: float
    n_windows: int
    config: dict
    baseline_mse: float | None = None
    baseline_mae: float | None = None

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    @property
    def delta_mse(self) -> float | None:
        return None if self.baseline_mse is None else self.mse - self.baseline_mse

    @property
    def rel_delta_mse(self) -> float | None:
        if self.baseline_mse in (None, 0):
            return None
        return self.mse / self.baseline_mse - 1.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    baseline_name: str = "backbone-only"

    def __getitem__(self, name) -> EvalRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def columns(self):
        return ["name", "mse", "mae", "n_windows", "baseline_mse", "delta_mse", "rel_delta_mse", "fingerprint"]

    def records(self):
        for r in self.rows:
            yield [r.name, r.mse, r.mae, r.n_windows, r.baseline_mse, r.delta_mse, r.rel_delta_mse, r.fingerprint]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for rec in self.records():
                w.writerow(["" if v is None else v for v in rec])

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "-"
            if isinstance(v, float):
                return f"{v:.6f}"
            return str(v)

        table = [self.columns()] + [[fmt(v) for v in rec] for rec in self.records()]
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)


def score(targets: np.ndarray, preds: np.ndarray, scaler: GlobalScaler) -> tuple[float, float]:
    """Mean per-window MSE and MAE after global standardisation, summed in window order."""
    Yt = scaler.transform(targets)
    Yp = scaler.transform(preds)
    m_se = m_ae = 0.0
    for yt, yp in zip(Yt, Yp):
        a, b = mse(yt, yp), mae(yt, yp)
        if b * b > a * (1 + 1e-12) + 1e-300:
            raise NumericError("mae^2 exceeded mse; metric computation is inconsistent")
        m_se += a
        m_ae += b
    n = len(Yt)
    return m_se / n, m_ae / n


def evaluate(
    test_pairs: list[TimeSeriesPair],
    engine: Engine,
    scaler: GlobalScaler,
    config: dict | None = None,
    allow_leakage: bool = False,
    predict: Callable[[np.ndarray], np.ndarray] | None = None,
    name: str = "retrieval",
) -> EvalReport:
    """Forecast every test window and score it under the global scaler.

    Windows whose horizon is longer than L are forecast by rolling. The
    backbone-only path (mixer bypassed) is scored alongside for the delta
    columns. ``predict`` replaces the engine's forecaster (test hook).
    """
    if not test_pairs:
        raise ValueError("no test windows")
    report = leakage_check(engine.kb, test_pairs)
    if not report.clean and not allow_leakage:
        first = report.overlaps[0]
        raise LeakageError(f"{len(report)} overlaps between knowledge-base entries and test windows (first: kb {first[1]} vs test {first[2]})")
    X, Y = stack_pairs(test_pairs)
    H = Y.shape[1]

    def run(bypass: bool) -> np.ndarray:
        if H == engine.L:
            return forecast_batch(X, engine, bypass_arm=bypass)
        return rolling_forecast_batch(X, engine, H, bypass_arm=bypass)

    preds = predict(X) if predict is not None else run(engine.bypass_arm)
    base = run(True)
    m_se, m_ae = score(Y, preds, scaler)
    b_se, b_ae = score(Y, base, scaler)
    cfg = dict(config or {})
    cfg.setdefault("kb_regime", engine.kb.meta.regime)
    cfg.setdefault("k", engine.k)
    cfg.setdefault("metric", str(engine.metric))
    cfg.setdefault("lookback", engine.kb.meta.lookback)
    cfg.setdefault("backbone", engine.backbone.fingerprint)
    cfg.setdefault("horizon", H)
    out = EvalReport()
    out.rows.append(EvalRow(name, m_se, m_ae, len(test_pairs), cfg, b_se, b_ae))
    return out


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    n_series: int = 60
    length: int = 4000
    motif_bank_size: int = 8
    noise_std: float = 0.1
    T: int = 512
    L: int = 64
    P: int = 64
    d: int = 64
    heads: int = 4
    kb_stride: int = 64
    test_stride: int = 1
    backbone_stride: int = 16
    backbone_epochs: int = 20
    backbone_lr: float = 3e-3
    train: TrainConfig = TrainConfig()
    split: SplitSpec = SplitSpec(0.6, 0.2, 0.2)
    # domain siblings for the regime ablation
    shift_period_scale: float = 1.3
    shift_amplitude_scale: float = 1.5
    n_regime_series: int = 60

    def as_dict(self) -> dict:
        return asdict(self)


def _train_split_pairs(series: list[Series], cfg: BenchmarkConfig, stride: int) -> list[TimeSeriesPair]:
    out = []
    for s in series:
        train, _, _ = split(s, cfg.split)
        if train is not None and len(train) >= cfg.T + cfg.L:
            out.extend(make_pairs(train, cfg.T, cfg.L, stride))
    return out


def _test_pairs(series: list[Series], cfg: BenchmarkConfig, horizon: int, stride: int) -> list[TimeSeriesPair]:
    out = []
    for s in series:
        _, _, test = split(s, cfg.split)
        if test is not None and len(test) >= cfg.T + horizon:
            out.extend(make_pairs(test, cfg.T, horizon, stride))
    return out


def regime_banks(cfg: BenchmarkConfig) -> dict:
    """Motif banks per knowledge-base regime.

    The shifted bank keeps the in-domain draws with stretched periods and
    larger amplitudes; the cross-domain bank is disjoint from both; the
    multi-domain bank is their union.
    """
    base = make_motif_bank(cfg.seed, cfg.motif_bank_size, name="motif")
    shift = make_motif_bank(
        cfg.seed, cfg.motif_bank_size, period_scale=cfg.shift_period_scale,
        amplitude_scale=cfg.shift_amplitude_scale, name="shift",
    )
    cross = make_motif_bank(cfg.seed + 1000, cfg.motif_bank_size, exclude=base + shift, name="cross")
    return {
        "in-domain": base,
        "distribution-shift": shift,
        "cross-domain": cross,
        "multi-domain": base + shift + cross,
    }


def regime_corpus(cfg: BenchmarkConfig, regime: str) -> list[Series]:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    bank = regime_banks(cfg)[regime]
    if regime == "in-domain":
        return generate_motif_corpus(cfg.seed, cfg.n_series, cfg.length, cfg.motif_bank_size, cfg.noise_std, bank=bank)
    offset = REGIMES.index(regime)
    return generate_motif_corpus(
        cfg.seed + 7919 * offset, cfg.n_regime_series, cfg.length, cfg.motif_bank_size,
        cfg.noise_std, bank=bank, tag=regime,
    )


@dataclass
class Benchmark:
    """Everything a synthetic evaluation needs, built once and shared by all runs."""

    config: BenchmarkConfig
    bank: MotifBank
    series: list
    scaler: GlobalScaler
    backbone: BackboneParams
    train_pairs: list
    kb: KnowledgeBase
    arm: TrainResult
    _cache: dict = field(default_factory=dict, repr=False)

    def test_pairs(self, horizon: int | None = None, stride: int | None = None) -> list[TimeSeriesPair]:
        cfg = self.config
        key = ("test", horizon or cfg.L, stride or cfg.test_stride)
        if key not in self._cache:
            self._cache[key] = _test_pairs(self.series, cfg, horizon or cfg.L, stride or cfg.test_stride)
        return self._cache[key]

    def regime_series(self, regime: str) -> list[Series]:
        if regime == "in-domain":
            return self.series
        key = ("series", regime)
        if key not in self._cache:
            self._cache[key] = regime_corpus(self.config, regime)
        return self._cache[key]

    def regime_kb(self, regime: str, lookback: int | None = None) -> KnowledgeBase:
        lookback = lookback or self.config.T
        if regime == "in-domain" and lookback == self.config.T:
            return self.kb
        key = ("kb", regime, lookback)
        if key not in self._cache:
            pairs = _train_split_pairs(self.regime_series(regime), self.config, self.config.kb_stride)
            self._cache[key] = build_kb(pairs, self.backbone, regime, lookback)
        return self._cache[key]

    def gate(self) -> TrainResult:
        if "gate" not in self._cache:
            cfg = self.config
            params = init_gate(arm_config(cfg))
            self._cache["gate"] = train_arm(self.train_pairs, self.kb, self.backbone, params, cfg.train,
                                            neighbors=self._neighbors())
        return self._cache["gate"]

    def _neighbors(self):
        if "neighbors" not in self._cache:
            t = self.config.train
            self._cache["neighbors"] = retrieve_for_pairs(
                self.train_pairs, self.kb, self.backbone, t.k, DistanceMetric.parse(t.metric))
        return self._cache["neighbors"]

    def engine(self, regime: str = "in-domain", k: int | None = None, metric: str | None = None,
               lookback: int | None = None, fusion: str = "arm") -> Engine:
        arm = self.arm.params if fusion == "arm" else self.gate().params
        return Engine(
            self.backbone, arm, self.regime_kb(regime, lookback),
            k=self.config.train.k if k is None else k,
            metric=DistanceMetric.parse(metric or self.config.train.metric),
        )

    def run_config(self, **overrides) -> dict:
        base = {
            "benchmark": fingerprint(self.config.as_dict()),
            "kb_regime": "in-domain",
            "k": self.config.train.k,
            "metric": self.config.train.metric,
            "lookback": self.config.T,
            "fusion": "arm",
            "backbone": self.backbone.fingerprint,
        }
        base.update(overrides)
        return base


def arm_config(cfg: BenchmarkConfig) -> ArmConfig:
    return ArmConfig(k=cfg.train.k, d=cfg.d, L=cfg.L, heads=cfg.heads, dropout_p=cfg.train.dropout_p, seed=cfg.seed)


def build_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), series: list[Series] | None = None) -> Benchmark:
    """Generate (or accept) series, pretrain the backbone, build the in-domain KB, train the mixer."""
    bank = regime_banks(cfg)["in-domain"]
    if series is None:
        series = regime_corpus(cfg, "in-domain")
    trains = [split(s, cfg.split)[0] for s in series]
    scaler = GlobalScaler.fit([t for t in trains if t is not None])
    bcfg = BackboneConfig(T=cfg.T, L=cfg.L, P=cfg.P, d=cfg.d, seed=cfg.seed)
    backbone = pretrain_backbone(
        _train_split_pairs(series, cfg, cfg.backbone_stride), bcfg, epochs=cfg.backbone_epochs, lr=cfg.backbone_lr,
    )
    train_pairs = _train_split_pairs(series, cfg, cfg.kb_stride)
    kb = build_kb(train_pairs, backbone, "in-domain")
    logger.info("benchmark: %d series, %d train pairs, backbone loss %.4f", len(series), len(train_pairs),
                backbone.loss_curve[-1])
    result = train_arm(train_pairs, kb, backbone, init_arm(arm_config(cfg)), cfg.train)
    return Benchmark(cfg, bank, series, scaler, backbone, train_pairs, kb, result)


def run(bench: Benchmark, horizon: int | None = None, allow_leakage: bool = False, name: str = "retrieval",
        **engine_kwargs) -> EvalRow:
    engine = bench.engine(**engine_kwargs)
    pairs = bench.test_pairs(horizon)
    overrides = {k: v for k, v in engine_kwargs.items() if v is not None}
    if "regime" in overrides:
        overrides["kb_regime"] = overrides.pop("regime")
    cfg = bench.run_config(horizon=horizon or bench.config.L, **overrides)
    return evaluate(pairs, engine, bench.scaler, cfg, allow_leakage=allow_leakage, name=name).rows[0]


def ablate(bench: Benchmark, axis: str, grid: Sequence, horizon: int | None = None) -> EvalReport:
    """One evaluation row per grid value; everything else is held fixed."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    if not grid:
        raise ValueError("ablation grid is empty")
    kw = {"kb_regime": "regime", "top_k": "k", "lookback": "lookback", "metric": "metric", "fusion": "fusion"}[axis]
    for v in grid:
        if axis == "kb_regime" and v not in REGIMES:
            raise ValueError(f"invalid regime {v!r}")
        if axis == "top_k" and (not isinstance(v, (int, np.integer)) or v < 0):
            raise ValueError(f"invalid k {v!r}")
        if axis == "lookback" and v not in LOOKBACKS:
            raise ValueError(f"invalid lookback {v!r}; expected one of {LOOKBACKS}")
        if axis == "metric":
            DistanceMetric.parse(str(v))
        if axis == "fusion" and v not in ("arm", "gate"):
            raise ValueError(f"invalid fusion {v!r}")
    report = EvalReport()
    for v in grid:
        row = run(bench, horizon=horizon, name=f"{axis}={v}", **{kw: v})
        report.rows.append(row)
    return report
