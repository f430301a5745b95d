"""Batch command-line front end.

Usage::

    tsrag generate --out corpus.tsrs
    tsrag pretrain-backbone --store corpus.tsrs --out backbone.tsrb
    tsrag build-kb --store corpus.tsrs --backbone backbone.tsrb --out kb.tskb
    tsrag train-arm --store corpus.tsrs --kb kb.tskb --backbone backbone.tsrb --out engine.tsre
    tsrag evaluate --engine engine.tsre --kb kb.tskb --backbone backbone.tsrb --store corpus.tsrs

Every command prints ``config_fingerprint=<hex>``. Failures print one line
``error category=<CATEGORY> message=<text>`` on stderr and exit non-zero.
"""

from __future__ import annotations

import os

# must happen before numpy is imported so BLAS picks it up
if os.environ.get("TSRAG_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["TSRAG_THREADS"])

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .arm import ArmConfig, init_arm, init_gate
from .backbone import BackboneConfig, load_backbone, pretrain_backbone, save_backbone
from .core import GlobalScaler, SplitSpec, load_csv, load_csv_channels, load_store, make_pairs, save_store, split
from .errors import EXIT_CODES, FormatError, IOFailure, TSRAGError
from .evaluation import (
    AXES,
    BenchmarkConfig,
    ablate,
    build_benchmark,
    characteristics,
    dataset_characteristics,
    evaluate,
    fingerprint,
    regime_corpus,
)
from .infer import Engine, rolling_forecast
from .retrieval import LOOKBACKS, REGIMES, DistanceMetric, build_kb, load_kb, save_kb
from .train import Checkpoint, TrainConfig, load_engine, save_engine, train_arm, write_loss_curve

logger = logging.getLogger("tsrag")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class DataSection:
    T: int = 512
    L: int = 64
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    kb_stride: int = 64
    test_stride: int = 1
    backbone_stride: int = 16


@dataclass
class BackboneSection:
    P: int = 64
    d: int = 64
    epochs: int = 20
    lr: float = 3e-3


@dataclass
class ArmSection:
    heads: int = 4
    ffn_hidden: int | None = None
    proj_hidden: int | None = None
    dropout_p: float = 0.2
    fusion: str = "arm"


@dataclass
class TrainSection:
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    eval_every: int = 100


@dataclass
class RetrievalSection:
    k: int = 10
    metric: str = "euclidean"
    lookback: int = 512
    regime: str = "in-domain"


@dataclass
class SyntheticSection:
    n_series: int = 60
    length: int = 4000
    motif_bank_size: int = 8
    noise_std: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    arm: ArmSection = field(default_factory=ArmSection)
    train: TrainSection = field(default_factory=TrainSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise FormatError(f"config: unknown key {key!r}")
            if key == "seed":
                cfg.seed = int(value)
                continue
            if not isinstance(value, dict):
                raise FormatError(f"config: section {key!r} must be an object")
            section = getattr(cfg, key)
            names = {f.name for f in fields(section)}
            for sub, v in value.items():
                if sub not in names:
                    raise FormatError(f"config: unknown key {key}.{sub!r}")
                setattr(section, sub, v)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise FormatError(f"config {path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    # assembled module configs

    def split_spec(self) -> SplitSpec:
        d = self.data
        return SplitSpec(d.train_frac, d.val_frac, d.test_frac)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(T=self.data.T, L=self.data.L, P=self.backbone.P, d=self.backbone.d, seed=self.seed)

    def arm_config(self) -> ArmConfig:
        a = self.arm
        return ArmConfig(k=self.retrieval.k, d=self.backbone.d, L=self.data.L, heads=a.heads, ffn_hidden=a.ffn_hidden,
                         dropout_p=a.dropout_p, proj_hidden=a.proj_hidden, seed=self.seed, fusion=a.fusion)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, weight_decay=t.weight_decay, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                           batch_size=t.batch_size, steps=t.steps, seed=self.seed, k=self.retrieval.k,
                           dropout_p=self.arm.dropout_p, eval_every=t.eval_every, metric=self.retrieval.metric)

    def benchmark_config(self) -> BenchmarkConfig:
        s, d, b = self.synthetic, self.data, self.backbone
        return BenchmarkConfig(
            seed=self.seed, n_series=s.n_series, length=s.length, motif_bank_size=s.motif_bank_size,
            noise_std=s.noise_std, T=d.T, L=d.L, P=b.P, d=b.d, heads=self.arm.heads, kb_stride=d.kb_stride,
            test_stride=d.test_stride, backbone_stride=d.backbone_stride, backbone_epochs=b.epochs,
            backbone_lr=b.lr, train=self.train_config(), split=self.split_spec(), n_regime_series=s.n_series,
        )


PRESETS = {
    "desk": {},
    # batch size and step count used for the published runs
    "full": {"train": {"batch_size": 256, "steps": 10_000}},
}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    preset = PRESETS[getattr(args, "preset", "desk") or "desk"]
    for section, values in preset.items():
        for k, v in values.items():
            setattr(getattr(cfg, section), k, v)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "k", None) is not None:
        cfg.retrieval.k = args.k
    if getattr(args, "metric", None) is not None:
        cfg.retrieval.metric = args.metric
    if getattr(args, "lookback", None) is not None:
        cfg.retrieval.lookback = args.lookback
    if getattr(args, "regime", None) is not None:
        cfg.retrieval.regime = args.regime
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _pairs(series, cfg: RunConfig, which: str, stride: int, horizon: int | None = None):
    spec = cfg.split_spec()
    pos = {"train": 0, "val": 1, "test": 2}[which]
    horizon = horizon or cfg.data.L
    out = []
    for s in series:
        seg = split(s, spec)[pos]
        if seg is not None and len(seg) >= cfg.data.T + horizon:
            out.extend(make_pairs(seg, cfg.data.T, horizon, stride))
    return out


def _engine(args, cfg: RunConfig, bypass: bool = False) -> Engine:
    backbone = load_backbone(args.backbone, cfg.backbone_config())
    ckpt = load_engine(args.engine, backbone)
    kb = load_kb(args.kb, backbone)
    if args.lookback is not None and kb.meta.lookback != args.lookback:
        raise TSRAGError(f"--lookback {args.lookback} differs from the knowledge base's lookback {kb.meta.lookback}")
    k = args.k if args.k is not None else ckpt.k
    metric = DistanceMetric.parse(args.metric or ckpt.metric)
    return Engine(backbone, ckpt.arm, kb, k=k, metric=metric, bypass_arm=bypass)


def _write_csv(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: RunConfig) -> None:
    series = regime_corpus(cfg.benchmark_config(), args.regime or "in-domain")
    save_store(series, args.out)
    print(f"wrote {len(series)} series to {args.out}")


def cmd_ingest(args, cfg: RunConfig) -> None:
    series = []
    for path in args.csv:
        series.extend([load_csv(path, args.column)] if args.column else load_csv_channels(path))
    save_store(series, args.out)
    print(f"wrote {len(series)} series to {args.out}")


def cmd_pretrain_backbone(args, cfg: RunConfig) -> None:
    pairs = _pairs(load_store(args.store), cfg, "train", cfg.data.backbone_stride)
    params = pretrain_backbone(pairs, cfg.backbone_config(), epochs=cfg.backbone.epochs, lr=cfg.backbone.lr)
    save_backbone(params, args.out)
    print(f"pretrained backbone on {len(pairs)} pairs; final loss {params.loss_curve[-1]:.6f}")
    print(f"backbone_hash={params.fingerprint}")


def cmd_build_kb(args, cfg: RunConfig) -> None:
    backbone = load_backbone(args.backbone, cfg.backbone_config())
    series = load_store(args.store)
    if args.split == "all":
        pairs = [p for s in series if len(s) >= cfg.data.T + cfg.data.L
                 for p in make_pairs(s, cfg.data.T, cfg.data.L, cfg.data.kb_stride)]
    else:
        pairs = _pairs(series, cfg, "train", cfg.data.kb_stride)
    kb = build_kb(pairs, backbone, cfg.retrieval.regime, cfg.retrieval.lookback)
    save_kb(kb, args.out)
    print(f"knowledge base: {len(kb)} entries, regime={kb.meta.regime}, lookback={kb.meta.lookback}")


def cmd_train_arm(args, cfg: RunConfig) -> None:
    backbone = load_backbone(args.backbone, cfg.backbone_config())
    kb = load_kb(args.kb, backbone)
    pairs = _pairs(load_store(args.store), cfg, "train", cfg.data.kb_stride)
    arm_cfg = cfg.arm_config()
    params = init_arm(arm_cfg) if arm_cfg.fusion == "arm" else init_gate(arm_cfg)
    result = train_arm(pairs, kb, backbone, params, cfg.train_config())
    save_engine(Checkpoint(result.params, backbone.fingerprint, backbone.config, cfg.retrieval.metric, cfg.retrieval.k), args.out)
    if args.loss_csv:
        write_loss_curve(args.loss_csv, result.loss_curve)
    print(f"trained {arm_cfg.fusion} for {cfg.train.steps} steps; full-set loss {result.initial_loss:.6f} -> {result.final_loss:.6f}")


def cmd_forecast(args, cfg: RunConfig) -> None:
    engine = _engine(args, cfg, bypass=args.bypass_arm)
    series = load_csv(args.query, args.column) if args.column else load_csv_channels(args.query)[0]
    if len(series) < engine.T:
        raise TSRAGError(f"query has {len(series)} points, need at least T={engine.T}")
    H = args.horizon or engine.L
    result = rolling_forecast(series.values[-engine.T:], engine, H)
    _write_csv(args.out, ["step", "value"], [[i + 1, repr(float(v))] for i, v in enumerate(result.forecast)])
    if args.trace:
        rounds = [
            {"indices": t.indices.tolist(), "distances": t.distances.tolist(), "alpha": np.asarray(t.alpha).tolist()}
            for t in result.traces
        ]
        try:
            Path(args.trace).write_text(json.dumps({"rounds": rounds}, indent=1))
        except OSError as exc:
            raise IOFailure(f"cannot write {args.trace}: {exc}") from exc
    if result.fallback:
        print("fallback=backbone-only")
    print(f"forecast {H} steps in {len(result.traces)} round(s); retrieval {result.retrieval_ms:.3f} ms, forward {result.forward_ms:.3f} ms")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    engine = _engine(args, cfg, bypass=args.bypass_arm)
    series = load_store(args.store)
    horizon = args.horizon or engine.L
    pairs = _pairs(series, cfg, "test", cfg.data.test_stride, horizon)
    trains = [split(s, cfg.split_spec())[0] for s in series]
    scaler = GlobalScaler.fit([t for t in trains if t is not None])
    run_cfg = {"run": cfg.fingerprint, "engine": Path(args.engine).name, "kb": Path(args.kb).name}
    report = evaluate(pairs, engine, scaler, run_cfg, allow_leakage=args.allow_leakage)
    print(report.to_text())
    if args.out:
        report.to_csv(args.out)


def _parse_grid(axis: str, text: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if axis in ("top_k", "lookback"):
        try:
            return [int(t) for t in items]
        except ValueError as exc:
            raise TSRAGError(f"grid for {axis} must be integers: {text!r}") from exc
    return items


def cmd_ablate(args, cfg: RunConfig) -> None:
    bcfg = cfg.benchmark_config()
    series = load_store(args.store) if args.store else None
    bench = build_benchmark(bcfg, series)
    report = ablate(bench, args.axis, _parse_grid(args.axis, args.grid), horizon=args.horizon)
    print(report.to_text())
    if args.out:
        report.to_csv(args.out)


def cmd_analyze(args, cfg: RunConfig) -> None:
    series = load_store(args.store)
    rows = []
    for s in series:
        c = characteristics(s)
        rows.append([s.id, c.autocorr_lag1, c.noise_ratio, c.volatility, c.stationarity, int(c.degenerate)])
    avg = dataset_characteristics(series)
    rows.append(["<average>", avg.autocorr_lag1, avg.noise_ratio, avg.volatility, avg.stationarity, int(avg.degenerate)])
    header = ["series", "autocorr_lag1", "noise_ratio", "volatility", "stationarity", "degenerate"]
    if args.out:
        _write_csv(args.out, header, [[r[0]] + [repr(float(v)) for v in r[1:5]] + [r[5]] for r in rows])
    width = max(len(r[0]) for r in rows)
    print("  ".join([header[0].ljust(width)] + [h.rjust(13) for h in header[1:5]]))
    for r in rows:
        print("  ".join([r[0].ljust(width)] + [f"{v:13.6f}" for v in r[1:5]]))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int)
    common.add_argument("--metric", help="euclidean | cosine | dtw | dtw:<band>")
    common.add_argument("--lookback", type=int, choices=LOOKBACKS)
    common.add_argument("--horizon", type=int)
    common.add_argument("--regime", choices=REGIMES)
    common.add_argument("--allow-leakage", action="store_true")
    common.add_argument("--bypass-arm", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tsrag", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic motif corpus store")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", parents=[common], help="CSV files -> series store")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain-backbone", parents=[common])
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_backbone)

    p = sub.add_parser("build-kb", parents=[common])
    p.add_argument("--store", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--split", choices=("train", "all"), default="train",
                   help="'all' indexes whole series, which overlaps any test split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_kb)

    p = sub.add_parser("train-arm", parents=[common])
    p.add_argument("--store", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train_arm)

    p = sub.add_parser("forecast", parents=[common])
    p.add_argument("--engine", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--query", required=True, help="CSV file; the last T values are the context")
    p.add_argument("--column")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="JSON sidecar with indices, distances and alpha per round")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--engine", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--store", help="use these series instead of the synthetic corpus")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", parents=[common])
    p.add_argument("--store", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)
    return parser


def _set_threads() -> None:
    value = os.environ.get("TSRAG_THREADS")
    if not value:
        return
    import numba

    numba.set_num_threads(max(1, min(int(value), numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        _set_threads()
        cfg = resolve_config(args)
        print(f"config_fingerprint={cfg.fingerprint}")
        args.func(args, cfg)
    except TSRAGError as exc:
        print(f"error category={exc.category} message={exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except ValueError as exc:
        print(f"error category=FORMAT message={exc}", file=sys.stderr)
        return EXIT_CODES["FORMAT"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
