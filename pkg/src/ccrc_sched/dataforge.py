"""Dataset generation for the surrogate models.

Operating points are drawn by Latin hypercube sampling over the independent
scalar dimensions (generator P, generator cos-phi, total demand); the load
split is sampled inside its band and projected onto the simplex, so strict
stratification is only claimed for the independent dimensions.  A second
generation phase refines near the stability boundary: candidate cells are
scored by the binary entropy of the local stable fraction and new samples
land uniformly inside the highest-entropy cells.

Every row is labeled by the exact pipeline (power flow, linearization,
eigenvalues).  Rows whose power flow diverges are kept with a ``diverged``
flag and NaN labels; training selections exclude them.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
import weakref
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .grid import CCRC, GridTopology, OperatingPoint, OperatingRanges, S_BASE_MVA
from .powerflow import (
    PowerFlowError,
    compute_ipc_internals,
    extract_feature_vector,
    solve_power_flow,
)
from .smallsignal import assemble_state_space, indicators

log = logging.getLogger(__name__)

INDICATOR_COLS = ("h2_f", "h2_vdc", "k_f", "k_vdc")
ROLE_TAGS = ("D_upsilon", "D_h2_f", "D_h2_vdc", "D_k_f", "D_k_vdc")
PROVENANCE_COLS = ("phase", "seed", "ccrc_id", "diverged")


class InsufficientDataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Tabular dataset: features, target(s), provenance and column metadata.

    ``meta["column_info"]`` maps every feature column to a (category, node)
    pair used by the correlation-cleaning hierarchy.
    """

    frame: pd.DataFrame
    feature_cols: tuple[str, ...]
    target_cols: tuple[str, ...]
    role: str
    ccrc_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        cols = list(self.frame.columns)
        if len(set(cols)) != len(cols):
            raise ValueError("duplicate column names")
        missing = [c for c in (*self.feature_cols, *self.target_cols)
                   if c not in cols]
        if missing:
            raise ValueError(f"columns missing from frame: {missing}")
        if self.role not in ROLE_TAGS:
            raise ValueError(f"unknown role tag {self.role!r}")

    def __len__(self) -> int:
        return len(self.frame)

    def train_frame(self) -> pd.DataFrame:
        """Rows usable for fitting: converged and fully labeled."""
        f = self.frame
        ok = f["diverged"] == 0
        for t in self.target_cols:
            ok &= f[t].notna()
        return f[ok]

    def features(self, frame: pd.DataFrame | None = None) -> np.ndarray:
        f = self.train_frame() if frame is None else frame
        return f[list(self.feature_cols)].to_numpy(dtype=float)

    def targets(self, frame: pd.DataFrame | None = None) -> np.ndarray:
        f = self.train_frame() if frame is None else frame
        out = f[list(self.target_cols)].to_numpy(dtype=float)
        return out[:, 0] if out.shape[1] == 1 else out


def save_dataset(ds: Dataset, prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    csv_path = prefix.with_suffix(".csv")
    schema_path = prefix.with_suffix(".schema.json")
    ds.frame.to_csv(csv_path, index=False)
    meta = {k: v for k, v in ds.meta.items()}
    if "column_info" in meta:
        meta["column_info"] = {k: list(v) for k, v in meta["column_info"].items()}
    schema = {
        "role": ds.role,
        "ccrc_id": ds.ccrc_id,
        "feature_cols": list(ds.feature_cols),
        "target_cols": list(ds.target_cols),
        "columns": {c: str(t) for c, t in ds.frame.dtypes.items()},
        "meta": meta,
    }
    schema_path.write_text(json.dumps(schema, indent=2, sort_keys=True))
    return csv_path, schema_path


def load_dataset(prefix: str | Path) -> Dataset:
    prefix = Path(prefix)
    schema = json.loads(prefix.with_suffix(".schema.json").read_text())
    frame = pd.read_csv(prefix.with_suffix(".csv"))
    meta = schema["meta"]
    if "column_info" in meta:
        meta["column_info"] = {k: tuple(v) for k, v in meta["column_info"].items()}
    return Dataset(
        frame=frame,
        feature_cols=tuple(schema["feature_cols"]),
        target_cols=tuple(schema["target_cols"]),
        role=schema["role"],
        ccrc_id=schema["ccrc_id"],
        meta=meta,
    )


# ---------------------------------------------------------------------------
# operating-point sampling
# ---------------------------------------------------------------------------

def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _project_shares(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Nearest point of the band box whose coordinates sum to one."""
    s = np.clip(raw, lo, hi)
    for _ in range(100):
        gap = 1.0 - s.sum()
        if abs(gap) < 1e-13:
            return s
        room = (hi - s) if gap > 0 else (s - lo)
        total = room.sum()
        if total <= 0:
            break
        s = np.clip(s + gap * room / total, lo, hi)
    raise ValueError("load-share band admits no point summing to one")


def sample_load_shares(ranges: OperatingRanges, u: np.ndarray) -> dict[str, float]:
    """Map unit-cube coordinates to an in-band share split summing to one."""
    loads = sorted(ranges.load_share_base)
    lo = np.array([ranges.share_bounds(l)[0] for l in loads])
    hi = np.array([ranges.share_bounds(l)[1] for l in loads])
    raw = lo + np.asarray(u) * (hi - lo)
    s = _project_shares(raw, lo, hi)
    return dict(zip(loads, s))


def op_from_unit(ranges: OperatingRanges, z: np.ndarray,
                 share_u: np.ndarray) -> OperatingPoint:
    """Operating point from unit-cube coordinates of the independent dims."""
    bounds = ranges.dimension_bounds()
    vals = {}
    for zi, (name, (lo, hi)) in zip(z, bounds.items()):
        vals[name] = lo + zi * (hi - lo)
    gen_p = {g: vals[f"p_{g}"] for g in ranges.gen_p_mw}
    cosphi = {g: vals[f"cosphi_{g}"] for g in ranges.gen_cosphi}
    return OperatingPoint(
        gen_p_mw=gen_p,
        gen_cosphi=cosphi,
        p_demand_mw=vals["p_demand"],
        load_shares=sample_load_shares(ranges, share_u),
    )


def op_unit_vector(op: OperatingPoint, ranges: OperatingRanges) -> np.ndarray:
    """Normalized coordinates of the independent dims, in registry order."""
    bounds = ranges.dimension_bounds()
    out = []
    for name, (lo, hi) in bounds.items():
        if name == "p_demand":
            v = op.p_demand_mw
        elif name.startswith("cosphi_"):
            v = op.gen_cosphi[name[len("cosphi_"):]]
        else:
            v = op.gen_p_mw[name[len("p_"):]]
        out.append((v - lo) / (hi - lo) if hi > lo else 0.5)
    return np.array(out)


def lhs_sample(ranges: OperatingRanges, n: int, seed) -> list[OperatingPoint]:
    """Latin hypercube over the independent dims; one sample per stratum.

    The load split is sampled inside its band and projected onto the
    shares-sum-to-one simplex, which breaks strict stratification for the
    share coordinates only.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(_as_seedseq(seed))
    bounds = ranges.dimension_bounds()
    cols = {}
    for name, (lo, hi) in bounds.items():
        if lo == hi:
            warnings.warn(f"degenerate range for {name}; held constant")
            cols[name] = np.full(n, 0.5)
            continue
        strata = rng.permutation(n)
        cols[name] = (strata + rng.uniform(size=n)) / n
    z = np.column_stack([cols[name] for name in bounds])
    n_shares = len(ranges.load_share_base)
    share_u = np.empty((n, n_shares))
    for j in range(n_shares):
        share_u[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return [op_from_unit(ranges, z[i], share_u[i]) for i in range(n)]


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


# ---------------------------------------------------------------------------
# exact labeling
# ---------------------------------------------------------------------------

def features_from_pf(topology: GridTopology, pf) -> dict:
    """Power-flow-level feature columns plus their MW/Mvar mirrors."""
    internals = compute_ipc_internals(topology, pf)
    names, values = extract_feature_vector(topology, pf, internals)
    row = dict(zip(names, values))
    for el, (p, q) in [*pf.gen_pq.items(), *pf.ipc_ac_pq.items(),
                       *pf.load_pq.items(), *pf.thevenin_pq.items()]:
        row[f"p_{el}_mw"] = p * S_BASE_MVA
        row[f"q_{el}_mvar"] = q * S_BASE_MVA
    return row


def pf_feature_row(topology: GridTopology, op: OperatingPoint,
                   ccrc: CCRC) -> dict:
    """Features for one case without the small-signal stage.

    Raises PowerFlowError on divergence; this is the prediction-time path,
    so the caller decides how to treat unsolvable cases.
    """
    return features_from_pf(topology, solve_power_flow(topology, op, ccrc))


def labeled_row(topology: GridTopology, op: OperatingPoint, ccrc: CCRC,
                phase: str, seed: int) -> dict:
    """One dataset row: features, exact label, indicators, provenance."""
    row: dict = {"phase": phase, "seed": seed, "ccrc_id": ccrc.id}
    for name, value in zip(topology.operating_ranges.dimension_names(),
                           op_unit_vector(op, topology.operating_ranges)):
        row[f"op_{name}"] = value
    for load, share in sorted(op.load_shares.items()):
        row[f"op_share_{load}"] = share
    try:
        pf = solve_power_flow(topology, op, ccrc)
    except PowerFlowError:
        row["diverged"] = 1
        row["upsilon"] = np.nan
        for c in INDICATOR_COLS:
            row[c] = np.nan
        return row
    row["diverged"] = 0
    row.update(features_from_pf(topology, pf))
    ss = assemble_state_space(topology, ccrc, pf)
    ind = indicators(ss)
    row["upsilon"] = float(ind.upsilon)
    for c, v in zip(INDICATOR_COLS, ind.values()):
        row[c] = np.nan if v is None else v
    return row


def direction_elements(topology: GridTopology) -> list[str]:
    """Elements whose power-flow sign gets a boolean feature."""
    return ([c.name for c in topology.ipcs]
            + [t.name for t in topology.thevenins])


def _column_info(topology: GridTopology) -> dict[str, tuple[str, str]]:
    """(category, node) per feature column for the cleaning hierarchy."""
    info: dict[str, tuple[str, str]] = {}
    for b in topology.ac_buses:
        info[f"v_{b.name}"] = ("ac_voltage", b.name)
        info[f"theta_{b.name}"] = ("angle", b.name)
    for b in topology.dc_buses:
        info[f"v_{b.name}"] = ("dc_voltage", b.name)
    for el in (*topology.generators, *topology.loads, *topology.thevenins):
        info[f"p_{el.name}"] = ("power", el.name)
        info[f"q_{el.name}"] = ("power", el.name)
    for c in topology.ipcs:
        info[f"p_{c.name}"] = ("power", c.name)
        info[f"q_{c.name}"] = ("power", c.name)
        info[f"v_ac_{c.name}"] = ("ac_voltage", c.name)
        info[f"theta_v_ac_{c.name}"] = ("angle", c.name)
        info[f"v_diff_{c.name}"] = ("ac_voltage", c.name)
        info[f"theta_v_diff_{c.name}"] = ("angle", c.name)
        info[f"v_sum_{c.name}"] = ("dc_voltage", c.name)
        info[f"theta_v_sum_{c.name}"] = ("angle", c.name)
        info[f"i_diff_{c.name}"] = ("current", c.name)
        info[f"theta_i_diff_{c.name}"] = ("angle", c.name)
        info[f"i_sum_{c.name}"] = ("current", c.name)
        info[f"theta_i_sum_{c.name}"] = ("angle", c.name)
    return info


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def entropy_guided_generate(topology: GridTopology, ccrc: CCRC, budget: int,
                            seed, *, k_neighbors: int = 15,
                            cells_per_dim: int = 10) -> Dataset:
    """Label ``budget`` rows: half space-filling LHS, half boundary-seeking.

    Refinement scores each occupied cell (axis-aligned, 1/``cells_per_dim``
    of each range) by the binary entropy of the stable fraction among the
    ``k_neighbors`` labeled points nearest to the cell center, then samples
    uniformly inside the top-entropy cells.
    """
    if budget < 2:
        raise ValueError("budget must allow both phases (>= 2)")
    ranges = topology.operating_ranges
    root = _as_seedseq(seed)
    seed_id = root.entropy if isinstance(root.entropy, int) else 0
    ss_lhs, ss_refine = root.spawn(2)

    n1 = budget // 2
    rows = [labeled_row(topology, op, ccrc, "lhs", seed_id)
            for op in lhs_sample(ranges, n1, ss_lhs)]

    rng = np.random.default_rng(ss_refine)
    n_dims = len(ranges.dimension_names())
    n_shares = len(ranges.load_share_base)
    remaining = budget - n1
    batch = max(1, remaining // 6)
    while remaining > 0:
        b = min(batch, remaining)
        pts = np.array([[r[f"op_{d}"] for d in ranges.dimension_names()]
                        for r in rows if r["diverged"] == 0])
        ys = np.array([r["upsilon"] for r in rows if r["diverged"] == 0])
        top_cells = _rank_cells(pts, ys, k_neighbors, cells_per_dim)
        if not top_cells:
            top_cells = [tuple(rng.integers(0, cells_per_dim, size=n_dims))]
        for i in range(b):
            cell = np.array(top_cells[i % len(top_cells)])
            z = (cell + rng.uniform(size=n_dims)) / cells_per_dim
            op = op_from_unit(ranges, z, rng.uniform(size=n_shares))
            rows.append(labeled_row(topology, op, ccrc, "entropy", seed_id))
        remaining -= b

    frame = pd.DataFrame(rows)
    feature_cols = tuple(c for c in _column_info(topology) if c in frame.columns)
    return Dataset(
        frame=frame,
        feature_cols=feature_cols,
        target_cols=("upsilon",),
        role="D_upsilon",
        ccrc_id=ccrc.id,
        meta={"column_info": _column_info(topology),
              "direction_elements": direction_elements(topology),
              "budget": budget},
    )


def _rank_cells(pts: np.ndarray, ys: np.ndarray, k: int,
                cells_per_dim: int, top: int = 4) -> list[tuple[int, ...]]:
    if len(pts) == 0:
        return []
    cand = [pts]
    stab, unst = pts[ys == 1.0], pts[ys == 0.0]
    if len(stab) and len(unst):
        # cells straddling the boundary: midpoints of opposite-label
        # nearest pairs are candidates even when not yet sampled
        near = unst[np.argmin(
            np.linalg.norm(unst[None, :, :] - stab[:, None, :], axis=2), axis=1)]
        cand.append((stab + near) / 2.0)
    cell_ids = np.unique(
        np.clip((np.vstack(cand) * cells_per_dim).astype(int),
                0, cells_per_dim - 1), axis=0)
    scored = []
    for cell in cell_ids:
        center = (cell + 0.5) / cells_per_dim
        d = np.linalg.norm(pts - center, axis=1)
        nearest = np.argsort(d)[:min(k, len(d))]
        h = binary_entropy(float(ys[nearest].mean()))
        scored.append((h, tuple(int(c) for c in cell)))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [c for h, c in scored[:top] if h > 0.0]


def build_stability_dataset(topology: GridTopology, ccrc_set: Sequence[CCRC],
                            budget_per_ccrc: int, seed) -> Dataset:
    """Pooled classification dataset with the role configuration appended."""
    if not ccrc_set:
        raise ValueError("ccrc_set must be nonempty")
    root = _as_seedseq(seed)
    children = root.spawn(len(ccrc_set))
    frames = []
    info = _column_info(topology)
    for ccrc, child in zip(ccrc_set, children):
        ds = entropy_guided_generate(topology, ccrc, budget_per_ccrc, child)
        f = ds.frame.copy()
        for pos, ipc in enumerate(topology.ipcs):
            f[f"ccr_{ipc.name}"] = int(ccrc.roles[pos])
        frames.append(f)
        feature_cols = ds.feature_cols
    frame = pd.concat(frames, ignore_index=True)
    xc_cols = tuple(f"ccr_{ipc.name}" for ipc in topology.ipcs)
    for c in xc_cols:
        info = {**info, c: ("categorical", c)}
    labeled = frame[frame["diverged"] == 0]
    balance = float((labeled["upsilon"] == 1.0).sum()) / max(1, len(labeled))
    return Dataset(
        frame=frame,
        feature_cols=tuple(feature_cols) + xc_cols,
        target_cols=("upsilon",),
        role="D_upsilon",
        ccrc_id=None,
        meta={"column_info": info, "class_balance": balance,
              "direction_elements": direction_elements(topology),
              "categorical_cols": list(xc_cols)},
    )


def build_indicator_datasets(topology: GridTopology, ccrc: CCRC, budget: int,
                             seed, *, min_stable: int = 50) -> dict[str, Dataset]:
    """Four per-CCRC regression datasets over the stable rows only."""
    base = entropy_guided_generate(topology, ccrc, budget, seed)
    stable = base.frame[(base.frame["diverged"] == 0)
                        & (base.frame["upsilon"] == 1.0)].reset_index(drop=True)
    if len(stable) < min_stable:
        raise InsufficientDataError(
            f"CCRC {ccrc.id}: only {len(stable)} stable rows (need {min_stable})")
    out = {}
    for col in INDICATOR_COLS:
        out[col] = Dataset(
            frame=stable.copy(),
            feature_cols=base.feature_cols,
            target_cols=(col,),
            role=f"D_{col}",
            ccrc_id=ccrc.id,
            meta=dict(base.meta),
        )
    return out


# ---------------------------------------------------------------------------
# feature engineering / cleaning / scaling
# ---------------------------------------------------------------------------

def engineer_frame(frame: pd.DataFrame, feature_cols: Sequence[str],
                   column_info: Mapping[str, tuple[str, str]],
                   dir_elements: Sequence[str]
                   ) -> tuple[pd.DataFrame, list[str], dict]:
    """Add apparent powers and flow-direction booleans to a raw frame.

    S = sqrt(P^2 + Q^2) for every element P/Q pair (IPC AC side included);
    the IPC DC side gets S from its additive-path voltage and current.
    Direction booleans encode P >= 0 for the listed elements.
    Returns (augmented copy, added column names, updated column info).
    """
    info = dict(column_info)
    frame = frame.copy()
    added: list[str] = []
    pairs = [c for c in feature_cols
             if c.startswith("p_") and f"q_{c[2:]}" in feature_cols]
    for p_col in pairs:
        el = p_col[2:]
        s_col = f"s_{el}"
        frame[s_col] = np.hypot(frame[p_col], frame[f"q_{el}"])
        info[s_col] = ("power", el)
        added.append(s_col)
    dc_side = [c[len("i_sum_"):] for c in feature_cols if c.startswith("i_sum_")]
    for el in dc_side:
        s_col = f"s_dc_{el}"
        frame[s_col] = frame[f"v_sum_{el}"] * frame[f"i_sum_{el}"]
        info[s_col] = ("power", el)
        added.append(s_col)
    for el in dir_elements:
        col = f"dir_{el}"
        frame[col] = (frame[f"p_{el}"] >= 0.0).astype(float)
        info[col] = ("boolean", el)
        added.append(col)
    return frame, added, info


def engineer_features(ds: Dataset) -> Dataset:
    """Dataset wrapper around :func:`engineer_frame`."""
    dc_side = [c[len("i_sum_"):] for c in ds.feature_cols
               if c.startswith("i_sum_")]
    frame, added, info = engineer_frame(
        ds.frame, ds.feature_cols, ds.meta["column_info"],
        ds.meta.get("direction_elements", dc_side))
    return replace(
        ds,
        frame=frame,
        feature_cols=tuple(ds.feature_cols) + tuple(added),
        meta={**ds.meta, "column_info": info},
    )


_PLAN_CACHE: dict[int, tuple] = {}


def _engineering_plan(topology: GridTopology) -> tuple:
    """Cached (pairs, dc elements, direction elements) for one topology."""
    key = id(topology)
    hit = _PLAN_CACHE.get(key)
    if hit is not None and hit[0]() is topology:
        return hit[1]
    info = _column_info(topology)
    pairs = [c[2:] for c in info
             if c.startswith("p_") and f"q_{c[2:]}" in info]
    dc_side = [c[len("i_sum_"):] for c in info if c.startswith("i_sum_")]
    plan = (pairs, dc_side, direction_elements(topology))
    _PLAN_CACHE[key] = (weakref.ref(topology), plan)
    return plan


def prediction_row(topology: GridTopology, op: OperatingPoint,
                   ccrc: CCRC) -> dict:
    """One engineered feature row for surrogate prediction, as a plain dict.

    Runs the power flow only (raises PowerFlowError on divergence), mirrors
    the training-time feature construction, and appends the role columns so
    the same row serves classifier and per-configuration regressors.
    Engineering happens on the dict; column-at-a-time frame operations are
    too slow for the per-slot prediction loop.
    """
    row = pf_feature_row(topology, op, ccrc)
    for pos, ipc in enumerate(topology.ipcs):
        row[f"ccr_{ipc.name}"] = int(ccrc.roles[pos])
    pairs, dc_side, dir_elements = _engineering_plan(topology)
    for el in pairs:
        row[f"s_{el}"] = float(np.hypot(row[f"p_{el}"], row[f"q_{el}"]))
    for el in dc_side:
        row[f"s_dc_{el}"] = row[f"v_sum_{el}"] * row[f"i_sum_{el}"]
    for el in dir_elements:
        row[f"dir_{el}"] = float(row[f"p_{el}"] >= 0.0)
    return row


def prediction_frame(topology: GridTopology, op: OperatingPoint,
                     ccrc: CCRC) -> pd.DataFrame:
    """Single-row frame form of :func:`prediction_row`."""
    return pd.DataFrame([prediction_row(topology, op, ccrc)])


def clean_features(ds: Dataset, corr_threshold: float = 0.95
                   ) -> tuple[Dataset, dict]:
    """Drop constants, exact duplicates, then resolve correlated pairs.

    For |rho| >= threshold: power pairs stay, different-node pairs stay,
    otherwise the lower-priority column is dropped (currents first, then AC
    voltages, DC voltages, angles).  Retained flagged pairs are reported.
    """
    frame = ds.train_frame()
    info = ds.meta.get("column_info", {})
    categorical = set(ds.meta.get("categorical_cols", []))
    cols = [c for c in ds.feature_cols if c not in categorical]
    report = {"constant": [], "duplicate": [], "dropped": [], "retained_pairs": []}

    X = frame[cols].to_numpy(dtype=float)
    keep = []
    for j, c in enumerate(cols):
        # constant up to float noise, relative to the column magnitude
        scale = max(1.0, abs(float(np.nanmean(X[:, j]))))
        if np.nanstd(X[:, j]) <= 1e-12 * scale:
            report["constant"].append(c)
        else:
            keep.append(j)
    seen: dict[bytes, str] = {}
    kept = []
    for j in keep:
        key = X[:, j].tobytes()
        if key in seen:
            report["duplicate"].append((cols[j], seen[key]))
        else:
            seen[key] = cols[j]
            kept.append(j)

    drop_priority = {"current": 0, "ac_voltage": 1, "dc_voltage": 2, "angle": 3}
    names = [cols[j] for j in kept]
    Z = X[:, kept]
    corr = np.corrcoef(Z, rowvar=False) if len(names) > 1 else np.eye(1)
    dropped: set[str] = set()
    for a in range(len(names)):
        if names[a] in dropped:
            continue
        for b in range(a + 1, len(names)):
            if names[b] in dropped:
                continue
            rho = corr[a, b]
            if not np.isfinite(rho) or abs(rho) < corr_threshold:
                continue
            ca, na = info.get(names[a], ("other", names[a]))
            cb, nb = info.get(names[b], ("other", names[b]))
            if ca == "power" and cb == "power":
                report["retained_pairs"].append((names[a], names[b], float(rho)))
                continue
            if na != nb:
                report["retained_pairs"].append((names[a], names[b], float(rho)))
                continue
            if ca not in drop_priority and cb not in drop_priority:
                report["retained_pairs"].append((names[a], names[b], float(rho)))
                continue
            pa = drop_priority.get(ca, 99)
            pb = drop_priority.get(cb, 99)
            victim = names[a] if pa < pb else names[b] if pb < pa else names[b]
            report["dropped"].append(
                {"kept": names[a] if victim == names[b] else names[b],
                 "dropped": victim, "rho": float(rho)})
            dropped.add(victim)
            if victim == names[a]:
                break
    removed = set(report["constant"]) | {d for d, _ in report["duplicate"]} | dropped
    new_features = tuple(c for c in ds.feature_cols if c not in removed)
    for dup, original in report["duplicate"]:
        log.info("dropped duplicate column %s (same as %s)", dup, original)
    for item in report["retained_pairs"]:
        log.info("correlated pair retained for review: %s ~ %s (rho=%.3f)", *item)
    return replace(ds, feature_cols=new_features), report


def scale_features(ds: Dataset, stats: dict | None = None) -> tuple[Dataset, dict]:
    """Z-score features (and regression targets); categoricals untouched."""
    categorical = set(ds.meta.get("categorical_cols", []))
    cols = [c for c in ds.feature_cols if c not in categorical]
    if ds.role != "D_upsilon":
        cols = cols + list(ds.target_cols)
    train = ds.train_frame()
    if stats is None:
        stats = {"columns": {}}
        for c in cols:
            mean = float(train[c].mean())
            std = float(train[c].std(ddof=0))
            if not math.isfinite(std) or std <= 1e-12 * max(1.0, abs(mean)):
                warnings.warn(f"zero-variance column {c}; identity-scaled")
                mean, std = 0.0, 1.0
            stats["columns"][c] = (mean, std)
    frame = ds.frame.copy()
    for c, (mean, std) in stats["columns"].items():
        if c in frame.columns:
            frame[c] = (frame[c] - mean) / std
    return replace(ds, frame=frame, meta={**ds.meta, "scaler": stats}), stats


def unscale_column(values: np.ndarray, stats: dict, column: str) -> np.ndarray:
    mean, std = stats["columns"][column]
    return np.asarray(values) * std + mean


def winsorize(values: Sequence[float], percentile: float = 0.95
              ) -> tuple[np.ndarray, float]:
    """Clamp the upper tail to the given percentile; returns (column, bound)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("empty column")
    if not 0.5 < percentile < 1.0:
        raise ValueError("percentile must be in (0.5, 1)")
    bound = float(np.percentile(arr, 100.0 * percentile))
    return np.minimum(arr, bound), bound


def winsorize_targets(ds: Dataset, percentile: float = 0.95) -> Dataset:
    frame = ds.frame.copy()
    bounds = {}
    train_mask = (frame["diverged"] == 0)
    for t in ds.target_cols:
        train_mask &= frame[t].notna()
    for t in ds.target_cols:
        clipped, bound = winsorize(frame.loc[train_mask, t].to_numpy(), percentile)
        frame.loc[train_mask, t] = clipped
        bounds[t] = bound
    return replace(ds, frame=frame,
                   meta={**ds.meta, "winsor_bounds": bounds,
                         "winsor_percentile": percentile})


def train_validation_split(ds: Dataset, validation_fraction: float = 0.2,
                           seed: int = 0) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Deterministic row split of the usable rows."""
    frame = ds.train_frame().reset_index(drop=True)
    rng = np.random.default_rng(_as_seedseq(seed))
    idx = rng.permutation(len(frame))
    n_val = int(round(validation_fraction * len(frame)))
    return (frame.iloc[idx[n_val:]].reset_index(drop=True),
            frame.iloc[idx[:n_val]].reset_index(drop=True))
