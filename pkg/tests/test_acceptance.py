"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``PASS n: ...`` or ``FAIL n: ...`` line that the terminal
summary prints in criterion order.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

import conftest
from gradcheck import check_all
from tsrag.arm import ARM_TENSORS, ArmConfig, arm_backward, arm_forward, gated_fusion_backward, gated_fusion_forward
from tsrag.arm import init_arm, init_gate
from tsrag.backbone import BackboneConfig, backbone_from_bytes
from tsrag.errors import DimMismatchError, FormatError, TSRAGError
from tsrag.evaluation import ablate, characteristics, mae, mse, pearson_corr, run
from tsrag.infer import Engine, forecast, measure_latency, rolling_forecast
from tsrag.retrieval import COSINE, DTW, EUCLIDEAN, REGIMES, KBMeta, KnowledgeBase, kb_from_bytes, kb_to_bytes, top_k
from tsrag.train import Checkpoint, TrainConfig, train_arm


class Criterion:
    """Records the outcome of one criterion whether the body passes or raises."""

    def __init__(self, number, title):
        self.number, self.title, self.notes = number, title, []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        secs = time.perf_counter() - self.t0
        line = f"{status} {self.number}: {self.title} ({secs:.1f}s)"
        conftest.ACCEPTANCE_LINES.append(line + (f" | {detail}" if detail else ""))
        return False


# --- 1 ------------------------------------------------------------------------


def oracle_distances(q, rows, kind):
    """Brute-force distances, written without the library's kernels."""
    if kind == "euclidean":
        return [math.sqrt(sum((a - b) ** 2 for a, b in zip(q, r))) for r in rows]
    if kind == "cosine":
        out = []
        nq = math.sqrt(sum(a * a for a in q))
        for r in rows:
            nr = math.sqrt(sum(b * b for b in r))
            if nq == 0 and nr == 0:
                out.append(0.0)
            elif nq == 0 or nr == 0:
                out.append(1.0)
            else:
                out.append(1.0 - sum(a * b for a, b in zip(q, r)) / (nq * nr))
        return out
    # dtw: the textbook recurrence, vectorised across rows only
    T = len(q)
    D = np.full((T + 1, T + 1, len(rows)), np.inf)
    D[0, 0] = 0.0
    for i in range(1, T + 1):
        for j in range(1, T + 1):
            cost = (q[i - 1] - rows[:, j - 1]) ** 2
            D[i, j] = cost + np.minimum(np.minimum(D[i - 1, j], D[i, j - 1]), D[i - 1, j - 1])
    return list(np.sqrt(D[T, T]))


def tied_kb(rng, n=1000, T=16, L=4, d=8):
    E, C = rng.normal(size=(n, d)), rng.normal(size=(n, T))
    # blocks of exact duplicates spread through the index range
    for src, dups in [(5, [100, 101, 500, 999]), (42, [43, 700]), (300, [7, 8, 9])]:
        E[dups], C[dups] = E[src], C[src]
    E[250] = 0.0
    E[251] = 0.0
    return KnowledgeBase(C, E, rng.normal(size=(n, L)), [("r", i) for i in range(n)], KBMeta(T, L, d, "x"))


def test_1_retrieval_oracle_equivalence():
    with Criterion(1, "retrieval matches full-sort oracle") as c:
        rng = np.random.default_rng(2024)
        kb = tied_kb(rng)
        n = len(kb)
        checked = 0
        for kind, metric, keys in [("euclidean", EUCLIDEAN, kb.embeddings), ("cosine", COSINE, kb.embeddings),
                                   ("dtw", DTW, kb.contexts)]:
            queries = rng.normal(size=(100, keys.shape[1]))
            # a quarter of the queries sit exactly on a duplicated entry
            queries[::4] = keys[np.resize([5, 42, 300, 101, 250], 25)]
            for q in queries:
                full = oracle_distances(list(q), keys if kind == "dtw" else keys.tolist(), kind)
                full = np.asarray(full)
                for k in (1, 5, 10, 1000):
                    res = top_k(kb, q, k, metric)
                    idx = res.indices.tolist()
                    order = sorted(range(n), key=lambda i: (full[i], i))[:k]
                    # the oracle ranks by its own distances; values must agree to rounding
                    assert idx == order, (kind, k)
                    assert np.allclose(res.distances, full[idx], rtol=1e-12, atol=1e-12), (kind, k)
                    assert np.all(np.diff(res.distances) >= 0)
                    checked += 1
        # ties resolve to the lower index
        res = top_k(kb, kb.embeddings[5], 5, EUCLIDEAN)
        assert res.indices.tolist() == [5, 100, 101, 500, 999]
        assert top_k(kb, np.zeros(8), 2, COSINE).indices.tolist() == [250, 251]
        elapsed = time.perf_counter() - c.t0
        c.note(f"{checked} (query, k, metric) cases in {elapsed:.1f}s")
        assert elapsed < 60


# --- 2 ------------------------------------------------------------------------

GRAD_CFG = ArmConfig(k=3, d=8, L=8, heads=2, ffn_hidden=16, proj_hidden=8, dropout_p=0.0)


def perturbed(params, rng):
    p = params.copy()
    for t in p.tensors.values():
        t += 0.3 * rng.normal(size=t.shape)
    return p


def test_2_gradient_suite():
    with Criterion(2, "analytic gradients match central differences") as c:
        worst = {}
        for seed in range(5):
            for label, init, fwd, bwd in [("arm", init_arm, arm_forward, arm_backward),
                                          ("gate", init_gate, gated_fusion_forward, gated_fusion_backward)]:
                rng = np.random.default_rng(seed)
                p = perturbed(init(replace(GRAD_CFG, seed=seed)), rng)
                e_q, H = rng.normal(size=8) * 0.5, rng.normal(size=(3, 8))
                errs = check_all(fwd, bwd, p, e_q, H, seed)
                if label == "gate":
                    assert "gate" in errs
                else:
                    assert set(errs) == set(ARM_TENSORS) | {"e_q"}
                for name, e in errs.items():
                    worst[f"{label}.{name}"] = max(worst.get(f"{label}.{name}", 0.0), e)
        name = max(worst, key=worst.get)
        c.note(f"max rel err {worst[name]:.2e} ({name})")
        assert worst[name] < 1e-4
        assert time.perf_counter() - c.t0 < 30


# --- 3 ------------------------------------------------------------------------


def random_config(rng):
    heads = int(rng.choice([1, 2, 4]))
    return ArmConfig(
        k=int(rng.integers(0, 13)), d=heads * 2 * int(rng.integers(1, 5)), L=int(rng.integers(1, 11)), heads=heads,
        ffn_hidden=int(rng.integers(1, 21)), proj_hidden=int(rng.integers(1, 13)), dropout_p=0.0,
        seed=int(rng.integers(0, 1000)),
    )


def test_3_arm_invariants():
    with Criterion(3, "ARM invariants over 100 random configurations") as c:
        rng = np.random.default_rng(77)
        worst_sum = worst_perm = 0.0
        for _ in range(100):
            cfg = random_config(rng)
            p = perturbed(init_arm(cfg), rng)
            e_q, H = rng.normal(size=cfg.d) * 0.5, rng.normal(size=(cfg.k, cfg.L))
            out, tr = arm_forward(e_q, H, p)
            alpha, E_ffn = tr.squeezed("alpha"), tr.squeezed("E_ffn")
            worst_sum = max(worst_sum, abs(alpha.sum() - 1))
            assert np.all(alpha >= 0)
            acc = np.zeros_like(e_q)
            for i in range(alpha.size):
                acc = acc + alpha[i] * E_ffn[i]
            assert (e_q + acc).tobytes() == out.tobytes()
            perm = rng.permutation(cfg.k)
            worst_perm = max(worst_perm, float(np.max(np.abs(arm_forward(e_q, H[perm], p)[0] - out), initial=0)))
            assert arm_forward(e_q, H, p, mode="train", rng=1)[0].tobytes() == out.tobytes()
        c.note(f"max |sum(alpha)-1| {worst_sum:.1e}, max permutation drift {worst_perm:.1e}")
        assert worst_sum <= 1e-9 and worst_perm <= 1e-9


# --- 4 ------------------------------------------------------------------------


def test_4_freeze_contract(small_pairs, small_kb, small_backbone, small_arm_config):
    with Criterion(4, "training touches only the mixer") as c:
        before = small_backbone.to_bytes()
        kb_before = kb_to_bytes(small_kb)
        arm = init_arm(small_arm_config)
        res = train_arm(small_pairs, small_kb, small_backbone, arm, TrainConfig(steps=200, batch_size=16, k=4))
        assert small_backbone.to_bytes() == before and kb_to_bytes(small_kb) == kb_before
        changed = {n for n in arm.names() if not np.array_equal(arm[n], res.params[n])}
        c.note(f"{len(changed)}/{len(ARM_TENSORS)} mixer tensors changed, backbone bytes identical")
        assert changed == set(ARM_TENSORS)


# --- 5-7: the synthetic benchmark --------------------------------------------------


def test_5_directional_improvement(benchmark):
    with Criterion(5, "retrieval beats the bare backbone on held-out motif windows") as c:
        row = run(benchmark)
        ratio = row.mse / row.baseline_mse
        c.note(f"mse {row.mse:.5f} vs backbone {row.baseline_mse:.5f} (ratio {ratio:.3f}, "
               f"{row.n_windows} windows, build {conftest.BENCHMARK_SECONDS:.0f}s)")
        assert ratio <= 0.98
        assert conftest.BENCHMARK_SECONDS + (time.perf_counter() - c.t0) < 600


def test_6_regime_ordering(benchmark):
    with Criterion(6, "in-domain knowledge base gives the lowest error") as c:
        rep = ablate(benchmark, "kb_regime", list(REGIMES))
        by = {r.config["kb_regime"]: r for r in rep.rows}
        base = by["in-domain"].baseline_mse
        c.note("backbone {:.4f}; ".format(base) + ", ".join(f"{g} {by[g].mse:.4f}" for g in REGIMES))
        soft = [g for g in REGIMES if by[g].mse > base]
        if soft:
            c.note("soft check, worse than backbone: " + ", ".join(soft))
        assert all(by["in-domain"].mse <= by[g].mse + 1e-6 for g in REGIMES)


def test_7_rolling(benchmark):
    with Criterion(7, "rolling forecasts") as c:
        engine = benchmark.engine()
        for p in benchmark.test_pairs()[:20]:
            single = forecast(p.context, engine).forecast
            assert rolling_forecast(p.context, engine, engine.L).forecast.tobytes() == single.tobytes()
        row = run(benchmark, horizon=4 * benchmark.config.L)
        c.note(f"H=L bitwise on 20 windows; H=4L mse {row.mse:.4f} vs backbone {row.baseline_mse:.4f}")
        assert row.mse < row.baseline_mse


# --- 8 ------------------------------------------------------------------------

PUBLISHED = {
    #          autocorr, noise ratio, volatility, stationarity, mse diff
    "ETTh1": (0.7799, 0.4391, 3.1655, 0.1752, 0.0059),
    "ETTh2": (0.6070, 0.7217, -0.5386, 0.0843, 0.0066),
    "ETTm1": (0.8437, 0.2915, -0.9014, 0.0536, 0.0203),
    "ETTm2": (0.6848, 0.4480, 17.9827, 0.0348, 0.0021),
}


def test_8_metric_and_characteristics_oracles(benchmark):
    with Criterion(8, "metric and characteristic oracles") as c:
        assert (mse([1.0, 2.0], [1.0, 2.0]), mae([1.0, 2.0], [1.0, 2.0])) == (0.0, 0.0)
        assert (mse([0.0, 0.0], [1.0, 1.0]), mae([0.0, 0.0], [1.0, 1.0])) == (1.0, 1.0)
        assert (mse([0.0, 2.0], [1.0, 1.0]), mae([0.0, 2.0], [1.0, 1.0])) == (1.0, 1.0)
        rows = ablate(benchmark, "top_k", [0, 1, 5, 10]).rows
        assert all(r.mae ** 2 <= r.mse and r.baseline_mae ** 2 <= r.baseline_mse for r in rows)
        wn = characteristics(np.random.default_rng(0).normal(size=10_000))
        assert abs(wn.autocorr_lag1) < 0.05 and abs(wn.noise_ratio - 2) < 0.1
        cols = np.array(list(PUBLISHED.values())).T
        r = [pearson_corr(cols[j], cols[4]) for j in range(4)]
        c.note("white noise ac {:.3f} nr {:.3f}; table correlations ".format(wn.autocorr_lag1, wn.noise_ratio)
               + " ".join(f"{v:+.3f}" for v in r))
        assert np.allclose(r, [0.70, -0.55, -0.65, -0.19], atol=0.01)


# --- 9 ------------------------------------------------------------------------


def expect(category, fn, *args):
    with pytest.raises(TSRAGError) as exc:
        fn(*args)
    assert exc.value.category == category, (exc.value.category, exc.value)


def test_9_persistence(small_kb, small_backbone, small_trained):
    with Criterion(9, "artifacts round-trip and corruption is categorised") as c:
        bb = small_backbone.to_bytes()
        kb = kb_to_bytes(small_kb)
        ck = Checkpoint(small_trained.params, small_backbone.fingerprint, small_backbone.config, "euclidean", 4)
        eng = ck.to_bytes()
        assert backbone_from_bytes(bb).to_bytes() == bb
        assert kb_to_bytes(kb_from_bytes(kb, small_backbone)) == kb
        assert Checkpoint.from_bytes(eng).to_bytes() == eng
        cases = 0
        for blob, reader in [(bb, backbone_from_bytes), (kb, kb_from_bytes), (eng, Checkpoint.from_bytes)]:
            expect("FORMAT", reader, blob[: len(blob) // 2])
            expect("FORMAT", reader, blob[:-1])
            expect("FORMAT", reader, b"ZZZZ" + blob[4:])
            expect("FORMAT", reader, blob[:4] + (77).to_bytes(4, "little") + blob[8:])
            cases += 4
        wide = BackboneConfig(T=64, L=16, P=16, d=32)
        expect("DIM_MISMATCH", backbone_from_bytes, bb, wide)
        from tsrag.backbone import init_backbone

        expect("DIM_MISMATCH", kb_from_bytes, kb, init_backbone(wide).freeze())
        expect("DIM_MISMATCH", Checkpoint.from_bytes, Checkpoint(small_trained.params, "h", wide).to_bytes())
        cases += 3
        c.note(f"3 round-trips byte-identical, {cases} corruption cases categorised")
        assert issubclass(FormatError, TSRAGError) and issubclass(DimMismatchError, TSRAGError)


# --- 10 -----------------------------------------------------------------------


def test_10_latency_report(benchmark):
    with Criterion(10, "latency on a 100k-entry knowledge base (reported only)") as c:
        bb = benchmark.backbone
        m = benchmark.kb.meta
        rng = np.random.default_rng(10)
        n = 100_000
        kb = KnowledgeBase(
            np.zeros((n, m.T)), np.tanh(rng.normal(size=(n, m.d))), rng.normal(size=(n, m.L)),
            [("syn", i) for i in range(n)], KBMeta(m.T, m.L, m.d, m.encoder_hash),
        )
        engine = Engine(bb, benchmark.arm.params, kb, k=10)
        queries = np.stack([p.context for p in benchmark.test_pairs()[:5]])
        rep = measure_latency(engine, queries, repetitions=3)
        c.note(str(rep))
        assert rep.kb_size == n and rep.n_measured > 0
        assert min(rep.retrieval_ms, rep.forward_ms, rep.total_ms) > 0
