"""Acceptance gate: one test per release criterion.

Each test prints a single ``criterion N PASS`` line with the measured
numbers so the suite output doubles as the release report. The heavy
artifacts (full catalogue reduction, training corpus, surrogate bundle,
benchmark day) are built once in module fixtures and shared.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import scipy.integrate
import scipy.linalg

from ccrc_sched import dataforge as df
from ccrc_sched import estimators
from ccrc_sched import reduction as red
from ccrc_sched import scheduler as sch
from ccrc_sched import smallsignal as sm
from ccrc_sched import surrogate as sg
from ccrc_sched.grid import (CCRC, default_topology, enumerate_all_ccrcs,
                             feasible_ccrcs)

TOPO = default_topology()
RANGES = TOPO.operating_ranges
BY_ID = {c.id: c for c in feasible_ccrcs(TOPO)}

TABLE_OPS_SEED = 1
REDUCTION_SEED = 0
CORPUS_SEED = 21
SPLIT_SEED = 13
BENCH_SEED = 42


# ---------------------------------------------------------------------------
# shared artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_reduction():
    ops = df.lhs_sample(RANGES, 60, seed=TABLE_OPS_SEED)
    ccrcs = feasible_ccrcs(TOPO)
    t0 = time.perf_counter()
    table = red.evaluate_indicator_table(TOPO, ccrcs, ops)
    result, maps, sub = red.reduce_ccrc_set(
        TOPO, ccrcs, ops, n_regions=20, seed=REDUCTION_SEED, table=table)
    return {"result": result, "maps": maps, "table": table,
            "t": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def reduced_ccrcs(full_reduction):
    return [BY_ID[i] for i in full_reduction["result"].reduced]


@pytest.fixture(scope="module")
def corpus(reduced_ccrcs):
    budget = max(729, math.ceil(5000 / len(reduced_ccrcs)))
    t0 = time.perf_counter()
    pool, per = sch.generate_training_data(TOPO, reduced_ccrcs, budget,
                                           CORPUS_SEED)
    return {"pool": pool, "per": per, "t": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def classifier_eval(corpus):
    t0 = time.perf_counter()
    eng = df.engineer_features(corpus["pool"])
    tr_frame, va_frame = df.train_validation_split(eng, 0.2, seed=SPLIT_SEED)
    tr_ds, _ = df.clean_features(replace(eng, frame=tr_frame))
    model = sg.train_classifier(tr_ds, sch.DEFAULT_CLASSIFIER_SPEC, seed=101)
    labels, _ = sg.predict_stability(model, va_frame)
    beta = sg.choose_beta(corpus["pool"].meta["class_balance"])
    fb = sg.f_beta(labels, va_frame["upsilon"].to_numpy(), beta)
    return {"model": model, "f_beta": fb, "beta": beta,
            "n_train": len(tr_frame), "n_val": len(va_frame),
            "t": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def regressor_eval(corpus):
    t0 = time.perf_counter()
    models: dict[tuple[int, str], sg.TrainedModel] = {}
    rows = []
    for key in sorted(corpus["per"]):
        cid, col = key
        eng = df.engineer_features(corpus["per"][key])
        tr_frame, va_frame = df.train_validation_split(eng, 0.2,
                                                       seed=SPLIT_SEED)
        tr_ds, _ = df.clean_features(replace(eng, frame=tr_frame))
        model = sg.train_regressor(tr_ds, sch.DEFAULT_REGRESSOR_SPEC, seed=7)
        models[key] = model
        pred = sg.predict_indicator(model, va_frame)
        y = va_frame[col].to_numpy()
        cap = model.metadata["winsor_bounds"][col]
        mask = y <= cap
        rows.append({"ccrc_id": cid, "col": col,
                     "r2": sg.r2_score(pred, y),
                     "r2_wins": sg.r2_score(pred[mask], y[mask])})
    scores = pd.DataFrame(rows)
    return {"models": models, "scores": scores,
            "t": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def benchmark(classifier_eval, regressor_eval, reduced_ccrcs):
    bundle = sch.SurrogateBundle(TOPO, classifier_eval["model"],
                                 regressor_eval["models"])
    t0 = time.perf_counter()
    records, report = sch.benchmark_day(TOPO, reduced_ccrcs, bundle,
                                        BENCH_SEED, slots=96)
    elapsed = time.perf_counter() - t0
    _, actual = sch.day_ahead_scenario(TOPO, BENCH_SEED, 96)
    return {"records": records, "report": report, "actual": actual,
            "t": elapsed}


# ---------------------------------------------------------------------------
# random state-space helpers
# ---------------------------------------------------------------------------

def _random_system(rng, abscissa=None, n=None, m=None, p=None):
    n = n or int(rng.integers(2, 9))
    m = m or int(rng.integers(1, 4))
    p = p or int(rng.integers(1, 4))
    A = rng.normal(size=(n, n))
    target = -float(rng.uniform(0.5, 2.0)) if abscissa is None else abscissa
    A -= (np.max(np.linalg.eigvals(A).real) - target) * np.eye(n)
    outs = tuple(f"y{i}" for i in range(p))
    return sm.StateSpaceModel(
        A=A, B=rng.normal(size=(n, m)), C=rng.normal(size=(p, n)),
        D=np.zeros((p, m)), states=tuple(f"s{i}" for i in range(n)),
        inputs=tuple(f"u{i}" for i in range(m)), outputs=outs,
        output_sets={"all": outs})


def _h2_by_quadrature(ss):
    I = np.eye(ss.n_states)

    def density(w):
        G = ss.C @ np.linalg.solve(1j * w * I - ss.A, ss.B)
        return float(np.sum(np.abs(G) ** 2))

    total, _ = scipy.integrate.quad(density, 0.0, np.inf, limit=400)
    return math.sqrt(total / math.pi)


def _step_asymptote(ss, horizon=60.0):
    # simulate the step responses: expm of the augmented system gives the
    # exact integral of e^{As}B without touching A^{-1}
    n, m = ss.n_states, len(ss.inputs)
    M = np.zeros((n + m, n + m))
    M[:n, :n] = ss.A * horizon
    M[:n, n:] = ss.B * horizon
    phi = scipy.linalg.expm(M)[:n, n:]
    return ss.C @ phi + ss.D


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_criterion_01_feasibility_count():
    t0 = time.perf_counter()
    total = len(enumerate_all_ccrcs(TOPO))
    feasible = len(feasible_ccrcs(TOPO))
    elapsed = time.perf_counter() - t0
    assert total == 729
    assert feasible == 95
    assert elapsed < 1.0
    print(f"criterion 1 PASS: 729 total / 95 feasible in {elapsed:.3f}s")


def test_criterion_02_h2_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        ss = _random_system(rng)
        exact = sm.h2_norm(ss, "all")
        ref = _h2_by_quadrature(ss)
        worst = max(worst, abs(exact - ref) / ref)
    assert worst <= 5e-3
    for a in (0.5, 1.0, 3.7, 12.0):
        ss = _random_system(rng, abscissa=-a, n=1, m=1, p=1)
        ss = replace(ss, B=np.array([[1.0]]), C=np.array([[1.0]]))
        assert abs(sm.h2_norm(ss, "all") - 1.0 / math.sqrt(2 * a)) <= 1e-10
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"criterion 2 PASS: max rel err {worst:.2e} over 200 systems, "
          f"analytic cases exact, {elapsed:.1f}s")


def test_criterion_03_dc_gain_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        ss = _random_system(rng)
        K = sm.dc_gain_matrix(ss, "all")
        worst = max(worst, float(np.max(np.abs(K - _step_asymptote(ss)))))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-4
    assert elapsed < 60.0
    print(f"criterion 3 PASS: max deviation {worst:.2e} from simulated "
          f"step asymptote over 200 systems, {elapsed:.1f}s")


def test_criterion_04_stability_label_oracle():
    rng = np.random.default_rng(4)
    agree = 0
    for _ in range(100):
        target = float(rng.uniform(1e-2, 0.5)) * float(rng.choice([-1, 1]))
        ss = _random_system(rng, abscissa=target)
        label = sm.assess_stability(ss)
        horizon = 30.0 / abs(target)
        growth = np.linalg.norm(scipy.linalg.expm(ss.A * horizon), 2)
        agree += int(bool(label) == (growth < 1.0))
    assert agree == 100
    print("criterion 4 PASS: label agrees with free-response energy growth "
          "on 100/100 systems")


def test_criterion_05_lhs_and_refinement():
    for n in (10, 100):
        ops = df.lhs_sample(RANGES, n, seed=5)
        U = np.array([df.op_unit_vector(op, RANGES) for op in ops])
        strata = np.clip((U * n).astype(int), 0, n - 1)
        for j in range(U.shape[1]):
            assert sorted(strata[:, j]) == list(range(n))

    mixed = BY_ID[75]
    dims = [f"op_{d}" for d in RANGES.dimension_names()]
    ref_rows = [df.labeled_row(TOPO, op, mixed, "ref", 0)
                for op in df.lhs_sample(RANGES, 250, seed=999)]
    ok = [r for r in ref_rows if r["diverged"] == 0]
    Z = np.array([[r[c] for c in dims] for r in ok])
    y = np.array([r["upsilon"] for r in ok])
    stab, unst = Z[y == 1.0], Z[y == 0.0]
    mids = np.array([(p + unst[np.argmin(np.linalg.norm(unst - p, axis=1))])
                     / 2 for p in stab])

    ds = df.entropy_guided_generate(TOPO, mixed, budget=160, seed=1)
    usable = ds.frame[ds.frame["diverged"] == 0]
    pts = usable[dims].to_numpy()
    phase = usable["phase"].to_numpy()

    def dist(P):
        return np.array([np.min(np.linalg.norm(mids - p, axis=1))
                         for p in P])

    d_lhs = dist(pts[phase == "lhs"])
    d_ent = dist(pts[phase == "entropy"])
    share = float((d_ent < np.median(d_lhs)).mean())
    assert share >= 0.6
    print(f"criterion 5 PASS: strict LHS strata at n=10,100; "
          f"{share:.0%} of refinement points beat the phase-1 median "
          "boundary distance")


def test_criterion_06_classifier_f_beta(corpus, classifier_eval):
    rows = len(corpus["pool"].frame)
    fb = classifier_eval["f_beta"]
    runtime = corpus["t"] + classifier_eval["t"]
    assert rows >= 5000
    assert fb >= 0.90
    assert runtime < 600.0
    print(f"criterion 6 PASS: F_beta(beta={classifier_eval['beta']})="
          f"{fb:.4f} on {classifier_eval['n_val']} held-out rows "
          f"({rows} corpus rows, {runtime:.0f}s)")


def test_criterion_07_regressor_r2(regressor_eval):
    scores = regressor_eval["scores"]
    k_scores = scores[scores["col"].str.startswith("k_")]
    h2_scores = scores[scores["col"].str.startswith("h2_")]
    assert (k_scores["r2"] >= 0.95).all()
    assert (h2_scores["r2"] >= 0.60).all()
    assert (h2_scores["r2_wins"] > h2_scores["r2"]).all()
    print(f"criterion 7 PASS: K r2 min {k_scores['r2'].min():.4f}; "
          f"H2 r2 min {h2_scores['r2'].min():.4f} rising to "
          f"{h2_scores['r2_wins'].min():.4f} on the winsorized range "
          f"({len(scores)} models)")


def test_criterion_08_mcdm_correctness(benchmark, reduced_ccrcs):
    rng = np.random.default_rng(8)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        ids = sorted(int(i) for i in rng.choice(81, size=k, replace=False))
        ccrcs = tuple(CCRC.from_id(i, 4) for i in ids)
        gammas = tuple(int(g) for g in rng.integers(0, 5, size=k))
        entries = rng.normal(size=(k, 4))
        if k >= 3 and rng.random() < 0.3:
            entries[1] = entries[0]  # force score ties
        weights = tuple(float(w) for w in rng.uniform(0.1, 1.0, size=4))
        matrix = sch.PerformanceMatrix(ccrcs=ccrcs, gammas=gammas,
                                       entries=entries, weights=weights)
        ranked = sch.solve(matrix)
        scores = entries @ np.asarray(weights)
        brute = sorted(range(k),
                       key=lambda i: (scores[i], gammas[i], ids[i]))
        assert [r.ccrc.id for r in ranked] == [ids[i] for i in brute]

    class Perfect:
        def __init__(self, topology):
            self._oracle = sch.ExactOracle(topology)

        def stable(self, op, ccrc):
            return self._oracle.evaluate(op, ccrc)[0]

        def indicator_values(self, op, ccrc):
            return self._oracle.evaluate(op, ccrc)[1]

    mirrored = sch.run_schedule(TOPO, benchmark["actual"], "data-driven",
                                reduced_ccrcs, surrogate=Perfect(TOPO))
    exact = benchmark["records"]["exact"]
    assert [r.ccrc_id for r in mirrored] == [r.ccrc_id for r in exact]
    assert [r.gamma for r in mirrored] == [r.gamma for r in exact]
    print("criterion 8 PASS: solve()==exhaustive on 1000 matrices; "
          "perfect-surrogate schedule identical to exact over 96 slots")


def test_criterion_09_transition_safety(benchmark):
    oracle = sch.ExactOracle(TOPO)
    actual = benchmark["actual"]
    checked = 0
    for mode, records in benchmark["records"].items():
        for r in records:
            ccrc = BY_ID[r.ccrc_id]
            ok = oracle.evaluate(actual[r.slot], ccrc)[0]
            if r.slot > 0:
                ok = ok and oracle.evaluate(actual[r.slot - 1], ccrc)[0]
            assert ok, f"{mode} slot {r.slot}: CCRC {r.ccrc_id} unstable"
            limit = r.gamma_star_used
            assert limit is not None and r.gamma <= limit, \
                f"{mode} slot {r.slot}: gamma {r.gamma} over {limit}"
            checked += 1
    print(f"criterion 9 PASS: {checked} assignments exact-stable at both "
          "endpoints with gamma within the relaxed budget")


def test_criterion_10_benchmark_directionality(benchmark):
    report = benchmark["report"]
    dd = report.summaries["data-driven"]
    nm = report.summaries["no-mcdm"]
    assert dd.agreement >= 0.70
    for col in sch.INDICATOR_COLS:
        assert dd.indicator_means[col] < nm.indicator_means[col], col
    speedup = report.speedup["data-driven"]
    assert speedup > 0.0
    assert dd.mean_t_verify > 0.0  # verification cost reported on its own
    assert benchmark["t"] < 900.0
    means = ", ".join(f"{c} {dd.indicator_means[c]:.3g}<"
                      f"{nm.indicator_means[c]:.3g}"
                      for c in sch.INDICATOR_COLS)
    print(f"criterion 10 PASS: agreement {dd.agreement:.1%}, speedup "
          f"{speedup:.1%} (solve {dd.mean_t_solve * 1e3:.1f}ms, verify "
          f"{dd.mean_t_verify * 1e3:.1f}ms apart), {means}, "
          f"{benchmark['t']:.0f}s end-to-end")


def test_criterion_11_reduction_coverage(full_reduction):
    result = full_reduction["result"]
    maps = full_reduction["maps"]
    stack = np.stack([maps[c].levels for c in red.INDICATOR_COLS])
    ids = list(maps[red.INDICATOR_COLS[0]].ccrc_ids)
    idx = [ids.index(c) for c in result.reduced]
    reduced_levels = stack[:, idx, :]
    n_level5 = int((reduced_levels == 5).sum())
    gap = int((reduced_levels.min(axis=1) - stack.min(axis=1)).max())
    assert n_level5 == 0
    assert gap <= 1
    print(f"criterion 11 PASS: |R|={len(result.reduced)} with zero level-5 "
          f"cells and worst quartile gap {gap} "
          f"({full_reduction['t']:.0f}s)")


def test_criterion_12_mlp_gradient_check():
    worst = max(estimators.mlp_gradient_check(seed) for seed in range(5))
    assert worst <= 1e-4
    print(f"criterion 12 PASS: max gradient deviation {worst:.2e} over 5 "
          "random networks")
