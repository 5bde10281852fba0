"""Role-schedule decisions over sequences of operating points.

A transition from the applied configuration at the current operating point
to the next one is decided in four steps: filter the reduced set down to
configurations stable at both endpoints and within the switch budget,
score each survivor by its predicted indicator improvement, rank by the
weighted sum, and walk the ranking through the exact pipeline until a
verified-stable assignment is found.  The same machinery drives the
benchmark harness that compares exact, surrogate-driven, day-ahead-replay,
and hold-until-unstable scheduling over a day of 15-minute slots.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import dataforge as df
from . import plotting
from . import surrogate as sg
from .grid import CCRC, GridTopology, OperatingPoint, ccr_distance
from .powerflow import PowerFlowError, solve_power_flow
from .smallsignal import assemble_state_space, indicators

INDICATOR_COLS = ("h2_f", "h2_vdc", "k_f", "k_vdc")
DEFAULT_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
MODES = ("exact", "data-driven", "day-ahead", "no-mcdm")


class NoStableAlternativeError(RuntimeError):
    """No reduced-set configuration survives the stability filter."""


def _op_key(op: OperatingPoint) -> tuple:
    return (tuple(sorted(op.gen_p_mw.items())),
            tuple(sorted(op.gen_cosphi.items())),
            op.p_demand_mw,
            tuple(sorted(op.load_shares.items())),
            tuple(sorted(op.ipc_schedules.items())))


# ---------------------------------------------------------------------------
# indicator sources
# ---------------------------------------------------------------------------

class ExactOracle:
    """Full pipeline (power flow, assembly, assessment) with memoization.

    evaluate() returns (stable, indicator dict or None); divergence counts
    as unstable.  Calls are cached per (configuration, operating point), so
    repeated filter/verify lookups within a schedule are free.
    """

    def __init__(self, topology: GridTopology):
        self.topology = topology
        self._cache: dict = {}
        self.calls = 0

    def evaluate(self, op: OperatingPoint, ccrc: CCRC
                 ) -> tuple[bool, dict | None]:
        key = (ccrc.id, _op_key(op))
        if key in self._cache:
            return self._cache[key]
        self.calls += 1
        try:
            pf = solve_power_flow(self.topology, op, ccrc)
            ind = indicators(assemble_state_space(self.topology, ccrc, pf))
        except PowerFlowError:
            out = (False, None)
        else:
            if ind.upsilon:
                out = (True, dict(zip(INDICATOR_COLS, ind.values())))
            else:
                out = (False, None)
        self._cache[key] = out
        return out

    def stable(self, op: OperatingPoint, ccrc: CCRC) -> bool:
        return self.evaluate(op, ccrc)[0]

    def indicator_values(self, op: OperatingPoint, ccrc: CCRC) -> dict | None:
        return self.evaluate(op, ccrc)[1]


class SurrogateBundle:
    """Trained stability classifier plus per-configuration regressors.

    Predictions run the power flow only; the small-signal stage is skipped,
    which is where the scheduling speedup comes from.  Regressors are keyed
    by (ccrc id, indicator); a configuration without regressors still gets
    a stability answer but no indicator estimate.
    """

    def __init__(self, topology: GridTopology, classifier: sg.TrainedModel,
                 regressors: Mapping[tuple[int, str], sg.TrainedModel]):
        self.topology = topology
        self.classifier = classifier
        self.regressors = dict(regressors)
        self._cache: dict = {}

    @staticmethod
    def _vector(row: dict, model: sg.TrainedModel) -> np.ndarray:
        missing = [c for c in model.columns if c not in row]
        if missing:
            raise sg.ManifestError(f"rows lack manifest columns: {missing}")
        return np.array([row[c] for c in model.columns], dtype=float)[None, :]

    def _entry(self, op: OperatingPoint, ccrc: CCRC) -> dict:
        key = (ccrc.id, _op_key(op))
        entry = self._cache.get(key)
        if entry is None:
            try:
                row = df.prediction_row(self.topology, op, ccrc)
            except PowerFlowError:
                entry = {"row": None, "stable": False}
            else:
                score = self.classifier.decision(
                    self._vector(row, self.classifier))[0]
                entry = {"row": row, "stable": bool(score >= 0.5)}
            self._cache[key] = entry
        return entry

    def stable(self, op: OperatingPoint, ccrc: CCRC) -> bool:
        return self._entry(op, ccrc)["stable"]

    def indicator_values(self, op: OperatingPoint, ccrc: CCRC) -> dict | None:
        # regressions run lazily: the stability filter rejects most
        # candidates with the classifier alone
        entry = self._entry(op, ccrc)
        if not entry["stable"]:
            return None
        if "ind" not in entry:
            if (ccrc.id, INDICATOR_COLS[0]) not in self.regressors:
                entry["ind"] = None
            else:
                entry["ind"] = {
                    c: float(self.regressors[(ccrc.id, c)].predict(
                        self._vector(entry["row"],
                                     self.regressors[(ccrc.id, c)]))[0])
                    for c in INDICATOR_COLS}
        return entry["ind"]

    def evaluate(self, op: OperatingPoint, ccrc: CCRC
                 ) -> tuple[bool, dict | None]:
        if not self.stable(op, ccrc):
            return (False, None)
        return (True, self.indicator_values(op, ccrc))

    def save(self, dirpath: str | Path) -> Path:
        dirpath = Path(dirpath)
        dirpath.mkdir(parents=True, exist_ok=True)
        sg.save_model(self.classifier, dirpath / "classifier")
        entries = []
        for (cid, col), model in sorted(self.regressors.items()):
            sub = f"regressor_{cid}_{col}"
            sg.save_model(model, dirpath / sub)
            entries.append({"ccrc_id": cid, "indicator": col, "path": sub})
        (dirpath / "bundle.json").write_text(json.dumps(
            {"regressors": entries}, indent=2, sort_keys=True))
        return dirpath


def load_bundle(topology: GridTopology, dirpath: str | Path) -> SurrogateBundle:
    dirpath = Path(dirpath)
    doc = json.loads((dirpath / "bundle.json").read_text())
    classifier = sg.load_model(dirpath / "classifier")
    regressors = {(e["ccrc_id"], e["indicator"]):
                  sg.load_model(dirpath / e["path"])
                  for e in doc["regressors"]}
    return SurrogateBundle(topology, classifier, regressors)


DEFAULT_CLASSIFIER_SPEC = sg.ModelSpec.make(
    "gradient-boosted-trees", "classification",
    n_estimators=150, learning_rate=0.1, max_depth=6)
DEFAULT_REGRESSOR_SPEC = sg.ModelSpec.make(
    "gradient-boosted-trees", "regression",
    n_estimators=200, learning_rate=0.1, max_depth=4)


def generate_training_data(topology: GridTopology, reduced: Sequence[CCRC],
                           budget_per_ccrc: int, seed
                           ) -> tuple[df.Dataset, dict[tuple[int, str],
                                                       df.Dataset]]:
    """Raw stability pool plus per-configuration indicator corpora.

    Configurations without enough stable rows get a warning and no
    indicator datasets; the classifier still covers them.
    """
    root = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    s_pool, s_reg = root.spawn(2)
    pool = df.build_stability_dataset(topology, reduced, budget_per_ccrc,
                                      s_pool)
    per_ccrc: dict[tuple[int, str], df.Dataset] = {}
    for ccrc, child in zip(reduced, s_reg.spawn(len(reduced))):
        try:
            per_col = df.build_indicator_datasets(topology, ccrc,
                                                  budget_per_ccrc, child)
        except df.InsufficientDataError as exc:
            warnings.warn(f"no indicator models for CCRC {ccrc.id}: {exc}")
            continue
        for col, ds in per_col.items():
            per_ccrc[(ccrc.id, col)] = ds
    return pool, per_ccrc


def fit_surrogate_bundle(topology: GridTopology, pool: df.Dataset,
                         indicator_datasets: Mapping[tuple[int, str],
                                                     df.Dataset],
                         seed,
                         classifier_spec: sg.ModelSpec | None = None,
                         regressor_spec: sg.ModelSpec | None = None
                         ) -> SurrogateBundle:
    """Fit the bundle from raw datasets.

    Tree models are used end to end, so features stay unscaled; cleaning
    decides each manifest, and the prediction row always carries a
    superset of it.
    """
    root = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    s_cls, s_reg = root.spawn(2)
    pool, _ = df.clean_features(df.engineer_features(pool))
    classifier = sg.train_classifier(
        pool, classifier_spec or DEFAULT_CLASSIFIER_SPEC,
        seed=int(s_cls.generate_state(1)[0] % 2**31))
    regressors: dict[tuple[int, str], sg.TrainedModel] = {}
    keys = sorted(indicator_datasets)
    for key, child in zip(keys, s_reg.spawn(max(len(keys), 1))):
        ds, _ = df.clean_features(df.engineer_features(
            indicator_datasets[key]))
        regressors[key] = sg.train_regressor(
            ds, regressor_spec or DEFAULT_REGRESSOR_SPEC,
            seed=int(child.generate_state(1)[0] % 2**31))
    return SurrogateBundle(topology, classifier, regressors)


def train_surrogate_bundle(topology: GridTopology, reduced: Sequence[CCRC],
                           budget_per_ccrc: int, seed,
                           classifier_spec: sg.ModelSpec | None = None,
                           regressor_spec: sg.ModelSpec | None = None
                           ) -> SurrogateBundle:
    """Generate corpora over the reduced set and fit the bundle."""
    root = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    s_gen, s_fit = root.spawn(2)
    pool, per_ccrc = generate_training_data(topology, reduced,
                                            budget_per_ccrc, s_gen)
    return fit_surrogate_bundle(topology, pool, per_ccrc, s_fit,
                                classifier_spec=classifier_spec,
                                regressor_spec=regressor_spec)


# ---------------------------------------------------------------------------
# transition decision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionContext:
    """Everything the decision for one slot transition depends on.

    current_indicators are the exact values at the current operating point
    under the applied configuration; they are only meaningful when that
    pairing is stable.
    """

    current_op: OperatingPoint
    current_ccrc: CCRC
    next_op: OperatingPoint
    current_indicators: Mapping[str, float] | None
    gamma_star: int = 1
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS

    def __post_init__(self):
        if len(self.weights) != len(INDICATOR_COLS):
            raise ValueError("one weight per criterion required")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        if not 0 <= self.gamma_star <= len(self.current_ccrc.roles):
            raise ValueError("gamma_star outside [0, converter count]")


@dataclass(frozen=True)
class AlternativeSet:
    ccrcs: tuple[CCRC, ...]
    gammas: tuple[int, ...]
    gamma_star_used: int
    relaxations: int


def compute_alternatives(ctx: TransitionContext, reduced_set: Sequence[CCRC],
                         stability_oracle: Callable[[OperatingPoint, CCRC], bool]
                         ) -> AlternativeSet:
    """Configurations stable at both endpoints within the switch budget.

    The budget is relaxed one switch at a time when the filter comes back
    empty; hitting the converter count with nothing stable raises.
    """
    n_ipcs = len(ctx.current_ccrc.roles)
    gamma_star = ctx.gamma_star
    relaxations = 0
    while True:
        kept, gammas = [], []
        for cand in reduced_set:
            gamma = ccr_distance(cand, ctx.current_ccrc)
            if gamma > gamma_star:
                continue
            if (stability_oracle(ctx.current_op, cand)
                    and stability_oracle(ctx.next_op, cand)):
                kept.append(cand)
                gammas.append(gamma)
        if kept:
            return AlternativeSet(tuple(kept), tuple(gammas), gamma_star,
                                  relaxations)
        if gamma_star >= n_ipcs:
            raise NoStableAlternativeError(
                "no configuration in the reduced set is stable at both "
                "endpoints even with the switch budget fully relaxed")
        gamma_star += 1
        relaxations += 1


@dataclass(frozen=True)
class PerformanceMatrix:
    """Alternatives x criteria matrix of indicator changes (negative = better)."""

    ccrcs: tuple[CCRC, ...]
    gammas: tuple[int, ...]
    entries: np.ndarray
    weights: np.ndarray
    criteria: tuple[str, ...] = INDICATOR_COLS

    def __post_init__(self):
        if self.entries.shape != (len(self.ccrcs), len(self.criteria)):
            raise ValueError("matrix shape does not match alternatives")
        if len(self.ccrcs) and not np.isfinite(self.entries).all():
            raise ValueError("performance entries must be finite")

    @property
    def ccrc_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.ccrcs)


def performance_matrix(ctx: TransitionContext, alternatives: AlternativeSet,
                       indicator_source: Callable[[OperatingPoint, CCRC],
                                                  Mapping[str, float] | None]
                       ) -> PerformanceMatrix:
    """Entry (i, j): indicator j at the next point under alternative i,
    minus the exact value at the current point."""
    if ctx.current_indicators is None:
        raise ValueError("context lacks exact current indicators")
    base = [ctx.current_indicators[c] for c in INDICATOR_COLS]
    kept, gammas, rows = [], [], []
    for ccrc, gamma in zip(alternatives.ccrcs, alternatives.gammas):
        try:
            vals = indicator_source(ctx.next_op, ccrc)
        except Exception as exc:  # noqa: BLE001 - degrade to fewer rows
            warnings.warn(f"indicator source failed for CCRC {ccrc.id}: {exc}")
            continue
        if vals is None:
            warnings.warn(f"no indicator estimate for CCRC {ccrc.id}; dropped")
            continue
        row = [vals[c] - b for c, b in zip(INDICATOR_COLS, base)]
        if not all(np.isfinite(row)):
            warnings.warn(f"non-finite estimate for CCRC {ccrc.id}; dropped")
            continue
        kept.append(ccrc)
        gammas.append(gamma)
        rows.append(row)
    return PerformanceMatrix(
        ccrcs=tuple(kept), gammas=tuple(gammas),
        entries=np.array(rows, dtype=float).reshape(len(kept),
                                                    len(INDICATOR_COLS)),
        weights=np.asarray(ctx.weights, dtype=float))


@dataclass(frozen=True)
class RankedAlternative:
    ccrc: CCRC
    score: float
    gamma: int

    @property
    def ccrc_id(self) -> int:
        return self.ccrc.id


def solve(matrix: PerformanceMatrix) -> tuple[RankedAlternative, ...]:
    """Ascending weighted-sum ranking; ties prefer fewer switches, lower id."""
    if len(matrix.ccrcs) == 0:
        raise ValueError("performance matrix has no rows")
    scores = matrix.entries @ matrix.weights
    order = np.lexsort((matrix.ccrc_ids, matrix.gammas, scores))
    return tuple(RankedAlternative(matrix.ccrcs[i], float(scores[i]),
                                   matrix.gammas[i]) for i in order)


@dataclass(frozen=True)
class Assignment:
    ccrc: CCRC
    indicators: dict
    n_verifications: int
    fell_back: bool = False
    gamma_star_used: int | None = None
    relaxations: int | None = None


def verify_and_assign(ranked: Sequence[RankedAlternative],
                      ctx: TransitionContext, oracle: ExactOracle,
                      reduced_set: Sequence[CCRC] | None = None) -> Assignment:
    """Walk the ranking through the exact pipeline; assign the first stable.

    If every ranked candidate fails (or the ranking is empty), the filter is
    re-run with the exact oracle and the exact-ranked best is assigned.
    """
    calls = 0
    for cand in ranked:
        calls += 1
        stable, vals = oracle.evaluate(ctx.next_op, cand.ccrc)
        if stable:
            return Assignment(cand.ccrc, vals, calls)
    if reduced_set is None:
        raise NoStableAlternativeError(
            "every ranked alternative failed exact verification")
    alts = compute_alternatives(ctx, reduced_set, oracle.stable)
    matrix = performance_matrix(ctx, alts, oracle.indicator_values)
    best = solve(matrix)[0]
    calls += len(alts.ccrcs)
    _, vals = oracle.evaluate(ctx.next_op, best.ccrc)
    return Assignment(best.ccrc, vals, calls, fell_back=True,
                      gamma_star_used=alts.gamma_star_used,
                      relaxations=alts.relaxations)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass
class ScheduleRecord:
    slot: int
    ccrc_id: int
    mode: str
    gamma: int
    gamma_star_used: int
    relaxations: int
    n_alternatives: int
    n_verifications: int
    verified: bool
    indicators: dict | None
    t_solve: float
    t_verify: float
    plan_failed: bool = False
    planned_ccrc_id: int | None = None
    error: str | None = None


def _warm_start(oracle: ExactOracle, op0: OperatingPoint,
                reduced_set: Sequence[CCRC],
                initial_ccrc: CCRC | None) -> tuple[CCRC, dict, int, bool]:
    candidates = list(reduced_set) if initial_ccrc is None else \
        [initial_ccrc] + [c for c in reduced_set if c.id != initial_ccrc.id]
    tried = 0
    for cand in candidates:
        tried += 1
        stable, vals = oracle.evaluate(op0, cand)
        if stable:
            if initial_ccrc is not None and cand.id != initial_ccrc.id:
                warnings.warn("initial configuration unstable at the first "
                              f"slot; starting from CCRC {cand.id}")
            return cand, vals, tried, cand is not candidates[0]
    raise NoStableAlternativeError(
        "no reduced-set configuration is stable at the first slot")


def _mcdm_transition(ctx: TransitionContext, reduced_set: Sequence[CCRC],
                     source, oracle: ExactOracle
                     ) -> tuple[AlternativeSet, Assignment, float, float]:
    t0 = time.perf_counter()
    try:
        alts = compute_alternatives(ctx, reduced_set, source.stable)
        matrix = performance_matrix(ctx, alts, source.indicator_values)
        ranked = solve(matrix) if len(matrix.ccrcs) else ()
    except NoStableAlternativeError:
        if source is oracle:
            raise
        # the source lied about everything; let exact verification decide
        warnings.warn("surrogate filter left no alternative; exact fallback")
        n = len(ctx.current_ccrc.roles)
        alts = AlternativeSet((), (), n, n - ctx.gamma_star)
        ranked = ()
    t_solve = time.perf_counter() - t0
    t0 = time.perf_counter()
    assignment = verify_and_assign(ranked, ctx, oracle, reduced_set)
    t_verify = time.perf_counter() - t0
    return alts, assignment, t_solve, t_verify


def run_schedule(topology: GridTopology, op_sequence: Sequence[OperatingPoint],
                 mode: str, reduced_set: Sequence[CCRC], *,
                 surrogate: SurrogateBundle | None = None,
                 forecast_sequence: Sequence[OperatingPoint] | None = None,
                 gamma_star: int = 1,
                 weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS,
                 initial_ccrc: CCRC | None = None,
                 fallback_pair: tuple[int, int] | None = None
                 ) -> list[ScheduleRecord]:
    """One record per slot; the applied configuration chains through.

    Modes: "exact" scores alternatives with the exact pipeline;
    "data-driven" scores with the surrogate bundle and verifies exactly;
    "day-ahead" replays the exact plan for forecast_sequence on the actual
    sequence, flagging and repairing slots where the plan turns out
    unstable; "no-mcdm" holds the applied configuration and switches to a
    fixed fallback pair only on exact instability.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not op_sequence:
        raise ValueError("operating-point sequence is empty")
    if mode == "data-driven" and surrogate is None:
        raise ValueError("data-driven mode requires a surrogate bundle")
    if mode == "day-ahead" and forecast_sequence is None:
        raise ValueError("day-ahead mode requires a forecast sequence")
    if mode == "no-mcdm" and fallback_pair is None:
        raise ValueError("no-mcdm mode requires a fallback pair")

    oracle = ExactOracle(topology)
    by_id = {c.id: c for c in reduced_set}
    n_ipcs = len(next(iter(reduced_set)).roles)

    plan: list[int] = []
    if mode == "day-ahead":
        plan = [r.ccrc_id for r in run_schedule(
            topology, forecast_sequence, "exact", reduced_set,
            gamma_star=gamma_star, weights=weights,
            initial_ccrc=initial_ccrc)]
        if len(plan) != len(op_sequence):
            raise ValueError("forecast and actual sequences differ in length")
        initial_ccrc = by_id[plan[0]]
    if mode == "no-mcdm":
        missing = [cid for cid in fallback_pair if cid not in by_id]
        if missing:
            raise ValueError(f"fallback pair {missing} not in the reduced set")

    records: list[ScheduleRecord] = []
    t0 = time.perf_counter()
    cur, cur_ind, tried, deviated = _warm_start(oracle, op_sequence[0],
                                                reduced_set, initial_ccrc)
    records.append(ScheduleRecord(
        slot=0, ccrc_id=cur.id, mode=mode, gamma=0, gamma_star_used=gamma_star,
        relaxations=0, n_alternatives=len(reduced_set),
        n_verifications=tried, verified=True, indicators=cur_ind,
        t_solve=0.0, t_verify=time.perf_counter() - t0,
        plan_failed=(mode == "day-ahead" and deviated),
        planned_ccrc_id=plan[0] if plan else None,
        error="planned start unstable; fell back"
              if (mode == "day-ahead" and deviated) else None))

    for slot in range(1, len(op_sequence)):
        ctx = TransitionContext(
            current_op=op_sequence[slot - 1], current_ccrc=cur,
            next_op=op_sequence[slot], current_indicators=cur_ind,
            gamma_star=gamma_star, weights=weights)

        if mode in ("exact", "data-driven"):
            source = oracle if mode == "exact" else surrogate
            alts, assignment, t_solve, t_verify = _mcdm_transition(
                ctx, reduced_set, source, oracle)
            rec = ScheduleRecord(
                slot=slot, ccrc_id=assignment.ccrc.id, mode=mode,
                gamma=ccr_distance(assignment.ccrc, cur),
                gamma_star_used=(assignment.gamma_star_used
                                 if assignment.fell_back
                                 else alts.gamma_star_used),
                relaxations=(assignment.relaxations if assignment.fell_back
                             else alts.relaxations),
                n_alternatives=len(alts.ccrcs),
                n_verifications=assignment.n_verifications, verified=True,
                indicators=assignment.indicators,
                t_solve=t_solve, t_verify=t_verify)

        elif mode == "day-ahead":
            planned = by_id[plan[slot]]
            t0 = time.perf_counter()
            plan_ok = (oracle.stable(ctx.current_op, planned)
                       and oracle.stable(ctx.next_op, planned))
            if plan_ok:
                _, vals = oracle.evaluate(ctx.next_op, planned)
                rec = ScheduleRecord(
                    slot=slot, ccrc_id=planned.id, mode=mode,
                    gamma=ccr_distance(planned, cur),
                    gamma_star_used=n_ipcs, relaxations=0,
                    n_alternatives=1, n_verifications=1, verified=True,
                    indicators=vals, t_solve=0.0,
                    t_verify=time.perf_counter() - t0,
                    planned_ccrc_id=planned.id)
            else:
                t_verify = time.perf_counter() - t0
                t0 = time.perf_counter()
                alts = compute_alternatives(ctx, reduced_set, oracle.stable)
                best = solve(performance_matrix(ctx, alts,
                                                oracle.indicator_values))[0]
                _, vals = oracle.evaluate(ctx.next_op, best.ccrc)
                rec = ScheduleRecord(
                    slot=slot, ccrc_id=best.ccrc.id, mode=mode,
                    gamma=ccr_distance(best.ccrc, cur),
                    gamma_star_used=alts.gamma_star_used,
                    relaxations=alts.relaxations,
                    n_alternatives=len(alts.ccrcs),
                    n_verifications=1 + len(alts.ccrcs), verified=True,
                    indicators=vals, t_solve=0.0,
                    t_verify=t_verify + time.perf_counter() - t0,
                    plan_failed=True, planned_ccrc_id=planned.id,
                    error=f"planned CCRC {planned.id} unstable; reassigned")

        else:  # no-mcdm
            candidates = [cur] + [by_id[cid] for cid in fallback_pair
                                  if cid != cur.id]
            t0 = time.perf_counter()
            assignment = None
            tried = 0
            for cand in candidates:
                tried += 1
                if (oracle.stable(ctx.current_op, cand)
                        and oracle.stable(ctx.next_op, cand)):
                    assignment = cand
                    break
            if assignment is not None:
                _, vals = oracle.evaluate(ctx.next_op, assignment)
                rec = ScheduleRecord(
                    slot=slot, ccrc_id=assignment.id, mode=mode,
                    gamma=ccr_distance(assignment, cur),
                    gamma_star_used=n_ipcs, relaxations=0,
                    n_alternatives=len(candidates), n_verifications=tried,
                    verified=True, indicators=vals, t_solve=0.0,
                    t_verify=time.perf_counter() - t0,
                    plan_failed=(assignment.id != cur.id))
            else:
                alts = compute_alternatives(ctx, reduced_set, oracle.stable)
                best = solve(performance_matrix(ctx, alts,
                                                oracle.indicator_values))[0]
                _, vals = oracle.evaluate(ctx.next_op, best.ccrc)
                rec = ScheduleRecord(
                    slot=slot, ccrc_id=best.ccrc.id, mode=mode,
                    gamma=ccr_distance(best.ccrc, cur),
                    gamma_star_used=alts.gamma_star_used,
                    relaxations=alts.relaxations,
                    n_alternatives=len(alts.ccrcs),
                    n_verifications=tried + len(alts.ccrcs), verified=True,
                    indicators=vals, t_solve=0.0,
                    t_verify=time.perf_counter() - t0,
                    plan_failed=True,
                    error="hold and fallback pair unstable; reassigned")

        records.append(rec)
        cur = by_id[rec.ccrc_id]
        cur_ind = rec.indicators

    return records


# ---------------------------------------------------------------------------
# day scenario
# ---------------------------------------------------------------------------

def day_ahead_scenario(topology: GridTopology, seed, slots: int = 96,
                       gen_sigma: float = 0.08, demand_sigma: float = 0.04
                       ) -> tuple[list[OperatingPoint], list[OperatingPoint]]:
    """Smooth seeded day profiles plus noisy intra-day actuals.

    The forecast stays well inside the operating box; actual values apply
    multiplicative Gaussian noise to generation and demand and are clipped
    back into range.  Power factors and load shares are held at their
    forecast values.
    """
    ranges = topology.operating_ranges
    root = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    ss_profile, ss_noise = root.spawn(2)
    rng = np.random.default_rng(ss_profile)
    noise_rng = np.random.default_rng(ss_noise)
    t = np.arange(slots) / slots

    def profile(amp1_lo, amp1_hi):
        a1 = rng.uniform(amp1_lo, amp1_hi)
        a2 = rng.uniform(0.05, 0.12)
        p1, p2 = rng.uniform(0.0, 1.0, size=2)
        return 0.5 + a1 * np.sin(2 * np.pi * (t + p1)) \
            + a2 * np.sin(4 * np.pi * (t + p2))

    gen_units = {g: profile(0.12, 0.22) for g in sorted(ranges.gen_p_mw)}
    demand_unit = profile(0.15, 0.25)
    cosphi = {g: 0.5 * (lo + hi)
              for g, (lo, hi) in sorted(ranges.gen_cosphi.items())}
    shares = dict(ranges.load_share_base)

    forecast, actual = [], []
    for k in range(slots):
        gen_f = {}
        gen_a = {}
        for g, unit in gen_units.items():
            lo, hi = ranges.gen_p_mw[g]
            p = lo + unit[k] * (hi - lo)
            gen_f[g] = p
            gen_a[g] = float(np.clip(
                p * (1.0 + gen_sigma * noise_rng.standard_normal()), lo, hi))
        lo, hi = ranges.p_demand_mw
        d = lo + demand_unit[k] * (hi - lo)
        d_act = float(np.clip(
            d * (1.0 + demand_sigma * noise_rng.standard_normal()), lo, hi))
        forecast.append(OperatingPoint(gen_p_mw=gen_f, gen_cosphi=dict(cosphi),
                                       p_demand_mw=d, load_shares=shares))
        actual.append(OperatingPoint(gen_p_mw=gen_a, gen_cosphi=dict(cosphi),
                                     p_demand_mw=d_act, load_shares=shares))
    return forecast, actual


# ---------------------------------------------------------------------------
# benchmark comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeSummary:
    mode: str
    n_slots: int
    agreement: float
    instability_rate: float
    indicator_means: dict[str, float]
    indicator_quartiles: dict[str, tuple[float, float, float, float, float]]
    mean_t_solve: float
    mean_t_verify: float


@dataclass(frozen=True)
class BenchmarkReport:
    reference: str
    summaries: dict[str, ModeSummary]
    speedup: dict[str, float]
    role_sequences: pd.DataFrame
    timings: pd.DataFrame


def compare_schedules(records_by_mode: Mapping[str, Sequence[ScheduleRecord]],
                      topology: GridTopology,
                      reference: str = "exact") -> BenchmarkReport:
    """Agreement, instability, indicator distributions, timings per mode.

    Indicator statistics cover slots whose plan held (repaired slots are
    excluded, since the planned configuration has no defined indicators);
    timing means skip the warm-start slot.
    """
    if reference not in records_by_mode:
        raise ValueError(f"reference mode {reference!r} missing")
    if len(records_by_mode) < 2:
        raise ValueError("need at least two modes to compare")
    lengths = {len(v) for v in records_by_mode.values()}
    if len(lengths) != 1:
        raise ValueError("modes cover different slot counts")

    ref_ids = [r.ccrc_id for r in records_by_mode[reference]]
    ipc_names = [c.name for c in topology.ipcs]
    summaries: dict[str, ModeSummary] = {}
    role_rows, timing_rows = [], []
    for mode, recs in records_by_mode.items():
        agreement = float(np.mean([r.ccrc_id == i
                                   for r, i in zip(recs, ref_ids)]))
        instability = float(np.mean([r.plan_failed for r in recs]))
        ok = [r for r in recs if not r.plan_failed and r.indicators]
        means, quarts = {}, {}
        for col in INDICATOR_COLS:
            vals = np.array([r.indicators[col] for r in ok])
            means[col] = float(vals.mean()) if len(vals) else float("nan")
            quarts[col] = tuple(np.percentile(vals, [0, 25, 50, 75, 100])) \
                if len(vals) else (float("nan"),) * 5
        body = recs[1:] or recs
        summaries[mode] = ModeSummary(
            mode=mode, n_slots=len(recs), agreement=agreement,
            instability_rate=instability, indicator_means=means,
            indicator_quartiles=quarts,
            mean_t_solve=float(np.mean([r.t_solve for r in body])),
            mean_t_verify=float(np.mean([r.t_verify for r in body])))
        for r in recs:
            roles = CCRC.from_id(r.ccrc_id, len(ipc_names)).roles
            role_rows.append({"slot": r.slot, "mode": mode,
                              **{n: int(v) for n, v in zip(ipc_names, roles)}})
            if r.slot > 0:
                timing_rows.append({
                    "slot": r.slot, "mode": mode,
                    "n_alternatives": r.n_alternatives,
                    "t_solve": r.t_solve, "t_verify": r.t_verify})

    ref_solve = summaries[reference].mean_t_solve
    speedup = {m: 1.0 - s.mean_t_solve / ref_solve
               for m, s in summaries.items() if m != reference and ref_solve > 0}
    return BenchmarkReport(
        reference=reference, summaries=summaries, speedup=speedup,
        role_sequences=pd.DataFrame(role_rows),
        timings=pd.DataFrame(timing_rows))


def render_benchmark(report: BenchmarkReport, outdir: str | Path) -> list[Path]:
    """Benchmark artifacts: summary, distributions, role traces, timings."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    modes = list(report.summaries)

    path = outdir / "benchmark_summary.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "agreement", "instability_rate", "mean_t_solve",
                    "mean_t_verify", "speedup_vs_reference"])
        for m in modes:
            s = report.summaries[m]
            w.writerow([m, f"{s.agreement:.6g}", f"{s.instability_rate:.6g}",
                        f"{s.mean_t_solve:.6g}", f"{s.mean_t_verify:.6g}",
                        f"{report.speedup.get(m, 0.0):.6g}"])
    written.append(path)
    fig = plotting.bar_groups(
        modes, {"agreement": [report.summaries[m].agreement for m in modes],
                "instability": [report.summaries[m].instability_rate
                                for m in modes]},
        "fraction of slots", "schedule agreement and instability")
    written.append(plotting.save_svg(fig, outdir / "benchmark_summary.svg"))

    path = outdir / "indicator_distributions.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["indicator", "mode", "mean", "min", "q1", "median",
                    "q3", "max"])
        for col in INDICATOR_COLS:
            for m in modes:
                s = report.summaries[m]
                w.writerow([col, m, f"{s.indicator_means[col]:.6g}",
                            *(f"{v:.6g}"
                              for v in s.indicator_quartiles[col])])
    written.append(path)
    stats = {col: {m: report.summaries[m].indicator_quartiles[col]
                   for m in modes} for col in INDICATOR_COLS}
    fig = plotting.box_summary_plot(stats, "indicator distributions by mode")
    written.append(plotting.save_svg(fig,
                                     outdir / "indicator_distributions.svg"))

    path = outdir / "role_sequences.csv"
    report.role_sequences.to_csv(path, index=False)
    written.append(path)
    ipc_names = [c for c in report.role_sequences.columns
                 if c not in ("slot", "mode")]
    panels = {}
    for name in ipc_names:
        panels[name] = {
            m: report.role_sequences.query("mode == @m")
            .sort_values("slot")[name].to_numpy()
            for m in modes}
    slots = np.arange(report.summaries[modes[0]].n_slots)
    fig = plotting.step_grid(slots, panels, "slot", "role",
                             yticks=(0, 1, 2),
                             yticklabels=("GFL", "ACGFM", "DCGFM"),
                             title="per-converter role sequences")
    written.append(plotting.save_svg(fig, outdir / "role_sequences.svg"))

    path = outdir / "timing_scatter.csv"
    report.timings.to_csv(path, index=False)
    written.append(path)
    groups = {m: (report.timings.query("mode == @m")["n_alternatives"]
                  .to_numpy(dtype=float),
                  report.timings.query("mode == @m")["t_solve"]
                  .to_numpy(dtype=float) * 1e3)
              for m in modes}
    fig = plotting.scatter_groups(groups, "alternatives in slot",
                                  "solve time [ms]",
                                  "decision cost vs alternative count")
    written.append(plotting.save_svg(fig, outdir / "timing_scatter.svg"))
    return written


def benchmark_day(topology: GridTopology, reduced: Sequence[CCRC],
                  bundle: SurrogateBundle | None, seed, *, slots: int = 96,
                  gamma_star: int = 1,
                  weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS,
                  fallback_pair: tuple[int, int] | None = None,
                  modes: Sequence[str] = MODES
                  ) -> tuple[dict[str, list[ScheduleRecord]], BenchmarkReport]:
    """Run the requested modes over one seeded day and compare them."""
    if bundle is None and "data-driven" in modes:
        raise ValueError("data-driven mode needs a surrogate bundle")
    forecast, actual = day_ahead_scenario(topology, seed, slots)
    if fallback_pair is None and "no-mcdm" in modes:
        if bundle is None:
            raise ValueError("no-mcdm needs a fallback pair or a bundle "
                             "to pick one")
        fallback_pair = pick_fallback_pair(bundle, reduced, actual)
    records: dict[str, list[ScheduleRecord]] = {}
    for mode in modes:
        # fresh prediction cache per run so timings measure real work
        cold = None
        if bundle is not None:
            cold = SurrogateBundle(topology, bundle.classifier,
                                   bundle.regressors)
        records[mode] = run_schedule(
            topology, actual, mode, reduced, surrogate=cold,
            forecast_sequence=forecast, gamma_star=gamma_star,
            weights=weights, fallback_pair=fallback_pair)
    report = compare_schedules(records, topology)
    return records, report


def pick_fallback_pair(bundle: SurrogateBundle, reduced: Sequence[CCRC],
                       ops: Sequence[OperatingPoint]) -> tuple[int, int]:
    """The two configurations most often predicted stable over the day."""
    if len(reduced) < 2:
        raise ValueError("need at least two configurations")
    census = SurrogateBundle(bundle.topology, bundle.classifier,
                             bundle.regressors)
    counts = []
    for ccrc in reduced:
        n = sum(census.stable(op, ccrc) for op in ops)
        counts.append((-n, ccrc.id))
    counts.sort()
    return (counts[0][1], counts[1][1])
