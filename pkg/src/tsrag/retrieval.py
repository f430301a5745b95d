"""Knowledge base of (context, embedding, horizon) triplets and exact top-k search."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from . import binio
from .backbone import BackboneParams, encode
from .core import TimeSeriesPair, WindowStats, normalized_arrays, window_stats, zscore
from .errors import DimMismatchError, FormatError, HashMismatchError

logger = logging.getLogger(__name__)

MAGIC = b"TSKB"
VERSION = 1
REGIMES = ("in-domain", "distribution-shift", "cross-domain", "multi-domain")
LOOKBACKS = (64, 128, 256, 512)


@dataclass(frozen=True)
class DistanceMetric:
    kind: str = "euclidean"
    band: int | None = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "cosine", "dtw"):
            raise ValueError(f"unknown metric {self.kind!r}")
        if self.band is not None:
            if self.kind != "dtw":
                raise ValueError("a band only applies to dtw")
            if self.band < 1:
                raise ValueError(f"dtw band must be >= 1, got {self.band}")

    @classmethod
    def parse(cls, text: str) -> "DistanceMetric":
        """'euclidean', 'cosine', 'dtw' or 'dtw:<band>'."""
        kind, _, band = text.strip().lower().partition(":")
        return cls(kind, int(band) if band else None)

    def __str__(self) -> str:
        return f"dtw:{self.band}" if self.band else self.kind


EUCLIDEAN = DistanceMetric("euclidean")
COSINE = DistanceMetric("cosine")
DTW = DistanceMetric("dtw")


@dataclass
class KBMeta:
    T: int
    L: int
    d: int
    encoder_hash: str
    regime: str = "in-domain"
    lookback: int = 512


@dataclass
class KnowledgeBase:
    contexts: np.ndarray    # (n, T), instance-normalised
    embeddings: np.ndarray  # (n, d), contiguous search matrix
    horizons: np.ndarray    # (n, L), normalised by their context's stats
    origins: list
    meta: KBMeta
    _origin_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def embedding_matrix(self) -> np.ndarray:
        return self.embeddings

    def entries(self):
        for i in range(len(self)):
            yield self.contexts[i], self.embeddings[i], self.horizons[i], self.origins[i]

    def index_of(self, origin) -> list[int]:
        if self._origin_index is None:
            idx: dict = {}
            for i, o in enumerate(self.origins):
                idx.setdefault(tuple(o), []).append(i)
            self._origin_index = idx
        return self._origin_index.get(tuple(origin), [])


@dataclass
class RetrievedSet:
    indices: np.ndarray
    distances: np.ndarray
    horizons: np.ndarray
    metric: DistanceMetric
    k: int

    def __len__(self):
        return self.indices.size

    @property
    def items(self):
        return list(zip(self.indices.tolist(), self.distances.tolist(), self.horizons))


# ---------------------------------------------------------------------------
# distances


@numba.njit(cache=True)
def _dtw_sq(a, b, band):
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    curr = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        curr[:] = inf
        if band < 0:
            lo, hi = 1, m
        else:
            lo, hi = max(1, i - band), min(m, i + band)
        for j in range(lo, hi + 1):
            diff = a[i - 1] - b[j - 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if curr[j - 1] < best:
                best = curr[j - 1]
            curr[j] = diff * diff + best
        prev, curr = curr, prev
    return prev[m]


@numba.njit(cache=True)
def _dtw_rows(q, M, band):
    out = np.empty(M.shape[0])
    for r in range(M.shape[0]):
        out[r] = np.sqrt(_dtw_sq(q, M[r], band))
    return out


def dtw(a, b, band: int | None = None) -> float:
    """DTW with squared pointwise cost; returns the root of the accumulated cost."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if band is not None and band < abs(a.size - b.size):
        raise ValueError("band narrower than the length difference admits no warping path")
    return float(np.sqrt(_dtw_sq(a, b, -1 if band is None else int(band))))


def distances_to(query, matrix: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    """Distance from one query to every row of ``matrix``.

    Every row is reduced independently, so a row's distance does not depend
    on which other rows are present.
    """
    q = np.asarray(query, dtype=np.float64)
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or q.ndim != 1 or M.shape[1] != q.size:
        raise DimMismatchError(f"query of length {q.size} vs rows of length {M.shape[-1]}")
    if metric.kind == "euclidean":
        return np.sqrt(np.sum((M - q) ** 2, axis=1))
    if metric.kind == "cosine":
        qn = np.sqrt(np.sum(q * q))
        rn = np.sqrt(np.sum(M * M, axis=1))
        dots = np.sum(M * q, axis=1)
        denom = qn * rn
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(denom > 0, dots / denom, 0.0)
        out = 1.0 - sim
        # two zero vectors count as identical
        out[(rn == 0) & (qn == 0)] = 0.0
        return out
    band = -1 if metric.band is None else int(metric.band)
    return _dtw_rows(np.ascontiguousarray(q), np.ascontiguousarray(M), band)


def distance(a, b, metric: DistanceMetric = EUCLIDEAN) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatchError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(distances_to(a, b[None, :], metric)[0])


# ---------------------------------------------------------------------------
# embedding and knowledge-base construction


def lookback_mask(norm_context: np.ndarray, lookback: int | None) -> np.ndarray:
    """Keep only the last ``lookback`` steps, zero-padding on the left."""
    if lookback is None or lookback >= norm_context.shape[-1]:
        return norm_context
    if lookback < 1:
        raise ValueError("lookback must be positive")
    out = np.zeros_like(norm_context)
    out[..., -lookback:] = norm_context[..., -lookback:]
    return out


def embed_query(context, encoder: BackboneParams, lookback: int | None = None) -> tuple[np.ndarray, WindowStats]:
    """Normalise a raw window by its own stats and embed it as a retrieval key."""
    x = np.asarray(context, dtype=np.float64)
    if x.ndim != 1 or x.size != encoder.config.T:
        raise DimMismatchError(f"query context has length {x.size}, expected {encoder.config.T}")
    stats = window_stats(x)
    return encode(lookback_mask(zscore(x, stats), lookback), encoder), stats


def build_kb(
    pairs: list[TimeSeriesPair],
    encoder: BackboneParams,
    regime: str = "in-domain",
    lookback: int | None = None,
) -> KnowledgeBase:
    c = encoder.config
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if not encoder.frozen:
        raise ValueError("knowledge bases must be built with a frozen encoder")
    lookback = c.T if lookback is None else int(lookback)
    meta = KBMeta(c.T, c.L, c.d, encoder.fingerprint, regime, lookback)
    if not pairs:
        warnings.warn("building an empty knowledge base", stacklevel=2)
        return KnowledgeBase(np.zeros((0, c.T)), np.zeros((0, c.d)), np.zeros((0, c.L)), [], meta)
    for p in pairs:
        if p.context.size != c.T or p.horizon.size != c.L:
            raise DimMismatchError(
                f"pair {p.origin} has T={p.context.size}, L={p.horizon.size}; encoder expects T={c.T}, L={c.L}"
            )
    X, Y = normalized_arrays(pairs)
    E = np.ascontiguousarray(encode(lookback_mask(X, lookback), encoder))
    return KnowledgeBase(X, E, Y, [tuple(p.origin) for p in pairs], meta)


# ---------------------------------------------------------------------------
# search


def _select(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest distances, ties resolved by lower index."""
    n = dist.size
    if k >= n:
        return np.argsort(dist, kind="stable")
    thr = np.partition(dist, k - 1)[k - 1]
    cand = np.flatnonzero(dist <= thr)
    order = np.argsort(dist[cand], kind="stable")
    return cand[order[:k]]


def top_k(
    kb: KnowledgeBase,
    query,
    k: int,
    metric: DistanceMetric = EUCLIDEAN,
    exclude: np.ndarray | list | None = None,
) -> RetrievedSet:
    """Exact k-nearest search.

    ``query`` is an embedding for euclidean/cosine and a normalised context
    for dtw. ``exclude`` lists entry indices that may not be returned.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    L = kb.meta.L
    if k == 0 or len(kb) == 0:
        return RetrievedSet(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, L)), metric, k)
    keys = kb.contexts if metric.kind == "dtw" else kb.embeddings
    dist = distances_to(query, keys, metric)
    if exclude is not None and len(exclude):
        allowed = np.ones(dist.size, dtype=bool)
        allowed[np.asarray(exclude, dtype=np.int64)] = False
        pool = np.flatnonzero(allowed)
        idx = pool[_select(dist[pool], k)]
    else:
        idx = _select(dist, k)
    idx = idx.astype(np.int64)
    return RetrievedSet(idx, dist[idx], kb.horizons[idx], metric, k)


def retrieval_key(kb_or_meta, norm_context: np.ndarray, encoder: BackboneParams, metric: DistanceMetric) -> np.ndarray:
    """The search key for a normalised context: an embedding, or the context itself for dtw."""
    meta = kb_or_meta.meta if isinstance(kb_or_meta, KnowledgeBase) else kb_or_meta
    if metric.kind == "dtw":
        return norm_context
    return encode(lookback_mask(norm_context, meta.lookback), encoder)


# ---------------------------------------------------------------------------
# persistence


def kb_to_bytes(kb: KnowledgeBase) -> bytes:
    m = kb.meta
    w = binio.Writer(MAGIC, VERSION)
    w.u32(m.T)
    w.u32(m.L)
    w.u32(m.d)
    w.u32(m.lookback)
    w.string(m.regime)
    w.string(m.encoder_hash)
    w.u64(len(kb))
    for i in range(len(kb)):
        sid, start = kb.origins[i]
        w.string(str(sid))
        w.u64(start)
        w.array(kb.contexts[i])
        w.array(kb.embeddings[i])
        w.array(kb.horizons[i])
    return w.getvalue()


def kb_from_bytes(data: bytes, encoder: BackboneParams | None = None, allow_hash_mismatch: bool = False) -> KnowledgeBase:
    r = binio.Reader(data, MAGIC, VERSION, "knowledge base")
    T, L, d, lookback = r.u32(), r.u32(), r.u32(), r.u32()
    regime = r.string()
    enc_hash = r.string()
    n = r.u64()
    if regime not in REGIMES:
        raise FormatError(f"knowledge base: unknown regime tag {regime!r}")
    # each entry needs at least its three f64 blocks; reject absurd counts early
    if n * 8 * (T + d + L) > r.remaining:
        raise FormatError(f"knowledge base: header claims {n} entries but the file is truncated")
    X = np.empty((n, T))
    E = np.empty((n, d))
    Y = np.empty((n, L))
    origins = []
    for i in range(n):
        sid = r.string()
        start = r.u64()
        for dst, width in ((X, T), (E, d), (Y, L)):
            a = r.array()
            if a.shape != (width,):
                raise FormatError(f"knowledge base: entry {i} block of shape {a.shape}, expected ({width},)")
            dst[i] = a
        origins.append((sid, int(start)))
    r.finish()
    kb = KnowledgeBase(X, E, Y, origins, KBMeta(T, L, d, enc_hash, regime, lookback))
    if encoder is not None:
        check_encoder(kb, encoder, allow_hash_mismatch)
    return kb


def check_encoder(kb: KnowledgeBase, encoder: BackboneParams, allow_hash_mismatch: bool = False) -> None:
    c = encoder.config
    if (kb.meta.T, kb.meta.L, kb.meta.d) != (c.T, c.L, c.d):
        raise DimMismatchError(
            f"knowledge base has T={kb.meta.T}, L={kb.meta.L}, d={kb.meta.d}; encoder has T={c.T}, L={c.L}, d={c.d}"
        )
    active = encoder.fingerprint
    if kb.meta.encoder_hash != active and not allow_hash_mismatch:
        raise HashMismatchError(f"knowledge base built with encoder {kb.meta.encoder_hash}, active encoder is {active}")


def save_kb(kb: KnowledgeBase, path) -> None:
    binio.write_bytes(path, kb_to_bytes(kb))


def load_kb(path, encoder: BackboneParams | None = None, allow_hash_mismatch: bool = False) -> KnowledgeBase:
    return kb_from_bytes(binio.read_bytes(path), encoder, allow_hash_mismatch)


# ---------------------------------------------------------------------------
# leakage


@dataclass
class LeakageReport:
    overlaps: list = field(default_factory=list)  # (kb index, kb origin, test origin)

    @property
    def clean(self) -> bool:
        return not self.overlaps

    def __len__(self):
        return len(self.overlaps)


def leakage_check(kb: KnowledgeBase, test_pairs: list[TimeSeriesPair]) -> LeakageReport:
    """Report KB entries whose index span shares any index with a test window.

    Spans cover context and horizon: [start, start + T + L).
    """
    span_kb = kb.meta.T + kb.meta.L
    by_series: dict = {}
    for i, (sid, start) in enumerate(kb.origins):
        by_series.setdefault(sid, ([], []))
        by_series[sid][0].append(i)
        by_series[sid][1].append(start)
    arrays = {sid: (np.array(ix), np.array(st)) for sid, (ix, st) in by_series.items()}
    report = LeakageReport()
    for p in test_pairs:
        sid, start = p.origin
        if sid not in arrays:
            continue
        ix, st = arrays[sid]
        end = start + p.context.size + p.horizon.size
        hit = (st < end) & (st + span_kb > start)
        for j in ix[hit]:
            report.overlaps.append((int(j), kb.origins[j], (sid, start)))
    return report
