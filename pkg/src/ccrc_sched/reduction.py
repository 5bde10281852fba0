"""Reduced configuration set selection.

The operating space is partitioned into subregions; each (configuration,
subregion) cell gets a performance level: 1..4 from global quartiles of the
indicator over stable samples (1 is best), 5 when the cell is
unstable-majority.  Configurations unstable everywhere are excluded, the
rest are clustered per indicator on their level vectors, greedy set cover
picks the clusters needed to serve every subregion at its best stable
level, and intersecting the per-indicator selections yields one
representative per combined-attribute group.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage

from . import plotting
from .estimators import TreeModel
from .grid import CCRC, GridTopology, OperatingPoint
from .smallsignal import assemble_state_space, indicators
from .powerflow import PowerFlowError, solve_power_flow

INDICATOR_COLS = ("h2_f", "h2_vdc", "k_f", "k_vdc")


class IncompleteMapError(ValueError):
    pass


class UncoverableRegionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# operating-space partition
# ---------------------------------------------------------------------------

def op_feature_frame(ops: Sequence[OperatingPoint]) -> pd.DataFrame:
    """Independent scalar dims of each operating point, in registry order."""
    first = ops[0]
    dims = [f"p_{g}" for g in sorted(first.gen_p_mw)] \
        + [f"cosphi_{g}" for g in sorted(first.gen_cosphi)] + ["p_demand"]
    rows = []
    for op in ops:
        rows.append([*(op.gen_p_mw[g] for g in sorted(op.gen_p_mw)),
                     *(op.gen_cosphi[g] for g in sorted(op.gen_cosphi)),
                     op.p_demand_mw])
    return pd.DataFrame(rows, columns=dims)


@dataclass(frozen=True)
class Subregions:
    """Nearest-centroid partition of the standardized operating space."""

    centroids: np.ndarray
    dims: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    merged: int = 0

    @property
    def n_regions(self) -> int:
        return len(self.centroids)

    def standardize(self, table: pd.DataFrame) -> np.ndarray:
        missing = [d for d in self.dims if d not in table.columns]
        if missing:
            raise ValueError(f"table lacks dimension columns: {missing}")
        X = table[list(self.dims)].to_numpy(dtype=float)
        return (X - self.mean) / self.std

    def assign(self, table: pd.DataFrame) -> np.ndarray:
        Z = self.standardize(table)
        d = np.linalg.norm(Z[:, None, :] - self.centroids[None, :, :], axis=2)
        return np.argmin(d, axis=1)

    def centroid_frame(self) -> pd.DataFrame:
        raw = self.centroids * self.std + self.mean
        return pd.DataFrame(raw, columns=list(self.dims))


def partition_operating_space(ops: Sequence[OperatingPoint], n_regions: int,
                              seed: int = 0, max_iter: int = 100) -> Subregions:
    if len(ops) < n_regions:
        raise ValueError("need at least one operating point per region")
    table = op_feature_frame(ops)
    X = table.to_numpy(dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Z = (X - mean) / std
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    # k-means++ seeding, then Lloyd iterations
    centroids = [Z[rng.integers(len(Z))]]
    for _ in range(1, n_regions):
        d2 = np.min([np.sum((Z - c) ** 2, axis=1) for c in centroids], axis=0)
        total = d2.sum()
        if total <= 0:
            centroids.append(Z[rng.integers(len(Z))])
            continue
        centroids.append(Z[rng.choice(len(Z), p=d2 / total)])
    C = np.array(centroids)
    for _ in range(max_iter):
        d = np.linalg.norm(Z[:, None, :] - C[None, :, :], axis=2)
        labels = np.argmin(d, axis=1)
        new_C = C.copy()
        for j in range(len(C)):
            members = Z[labels == j]
            if len(members):
                new_C[j] = members.mean(axis=0)
        if np.allclose(new_C, C, atol=1e-12):
            C = new_C
            break
        C = new_C
    d = np.linalg.norm(Z[:, None, :] - C[None, :, :], axis=2)
    labels = np.argmin(d, axis=1)
    occupied = np.unique(labels)
    merged = len(C) - len(occupied)
    if merged:
        warnings.warn(f"{merged} empty subregion(s) merged into neighbors")
        C = C[occupied]
    return Subregions(centroids=C, dims=tuple(table.columns), mean=mean,
                      std=std, merged=merged)


# ---------------------------------------------------------------------------
# exact evaluation table
# ---------------------------------------------------------------------------

def evaluate_indicator_table(topology: GridTopology, ccrcs: Sequence[CCRC],
                             ops: Sequence[OperatingPoint]) -> pd.DataFrame:
    """Exact pipeline over the (configuration, operating point) grid.

    One row per pair: dims, upsilon, the four indicators (NaN when
    unstable), and a diverged flag (diverged rows count as unstable).
    """
    dims = op_feature_frame(ops)
    rows = []
    for ccrc in ccrcs:
        for i, op in enumerate(ops):
            row = {"ccrc_id": ccrc.id, "op_index": i,
                   **dims.iloc[i].to_dict()}
            try:
                pf = solve_power_flow(topology, op, ccrc)
                ss = assemble_state_space(topology, ccrc, pf)
                ind = indicators(ss)
            except PowerFlowError:
                row.update(upsilon=0.0, diverged=1,
                           **{c: np.nan for c in INDICATOR_COLS})
                rows.append(row)
                continue
            row["diverged"] = 0
            row["upsilon"] = float(ind.upsilon)
            for c, v in zip(INDICATOR_COLS, ind.values()):
                row[c] = np.nan if v is None else v
            rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# performance map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerformanceMap:
    levels: np.ndarray  # (n_ccrcs, n_regions) ints in 1..5
    ccrc_ids: tuple[int, ...]
    indicator: str
    quartiles: tuple[float, float, float]

    @property
    def n_regions(self) -> int:
        return self.levels.shape[1]

    def row_of(self, ccrc_id: int) -> np.ndarray:
        return self.levels[self.ccrc_ids.index(ccrc_id)]

    def excluded_ids(self) -> tuple[int, ...]:
        """Configurations unstable in every subregion."""
        mask = (self.levels == 5).all(axis=1)
        return tuple(int(c) for c in np.array(self.ccrc_ids)[mask])

    def ordered_rows(self) -> list[int]:
        """Worst average level first."""
        avg = self.levels.mean(axis=1)
        order = np.lexsort((self.ccrc_ids, -avg))
        return [self.ccrc_ids[i] for i in order]

    def ordered_cols(self) -> list[int]:
        """Best average performance first."""
        avg = self.levels.mean(axis=0)
        return list(np.lexsort((np.arange(self.n_regions), avg)))


def build_performance_map(table: pd.DataFrame, subregions: Subregions,
                          value_col: str) -> PerformanceMap:
    region = subregions.assign(table)
    ccrc_ids = tuple(int(c) for c in sorted(table["ccrc_id"].unique()))
    n_r = subregions.n_regions
    stable_mask = table["upsilon"] == 1.0
    stable_values = table.loc[stable_mask, value_col].to_numpy(dtype=float)
    if len(stable_values) == 0:
        raise IncompleteMapError("no stable samples anywhere")
    q1, q2, q3 = np.percentile(stable_values, [25.0, 50.0, 75.0])

    levels = np.zeros((len(ccrc_ids), n_r), dtype=int)
    gaps = []
    for i, cid in enumerate(ccrc_ids):
        in_ccrc = table["ccrc_id"] == cid
        for r in range(n_r):
            cell = table[in_ccrc & (region == r)]
            if len(cell) == 0:
                gaps.append((cid, r))
                continue
            n_unstable = int((cell["upsilon"] == 0.0).sum())
            if n_unstable > len(cell) - n_unstable:
                levels[i, r] = 5
                continue
            vals = cell.loc[cell["upsilon"] == 1.0, value_col]
            mean = float(vals.mean())
            levels[i, r] = 1 + int(mean > q1) + int(mean > q2) + int(mean > q3)
    if gaps:
        raise IncompleteMapError(
            f"no samples for {len(gaps)} (ccrc, region) cells: {gaps[:10]}")
    return PerformanceMap(levels=levels, ccrc_ids=ccrc_ids,
                          indicator=value_col,
                          quartiles=(float(q1), float(q2), float(q3)))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def _l1_silhouette(X: np.ndarray, labels: np.ndarray) -> float:
    D = np.abs(X[:, None, :] - X[None, :, :]).sum(axis=2)
    n = len(X)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        n_own = own.sum() - 1
        a = D[i, own].sum() / n_own if n_own > 0 else 0.0
        b = np.inf
        for other in np.unique(labels):
            if other == labels[i]:
                continue
            b = min(b, D[i, labels == other].mean())
        denom = max(a, b)
        scores[i] = 0.0 if (n_own == 0 or denom == 0) else (b - a) / denom
    return float(scores.mean())


def cluster_ccrcs(pmap: PerformanceMap) -> dict[int, int]:
    """Cluster id per configuration; 0 marks all-unstable exclusions."""
    excluded = set(pmap.excluded_ids())
    active = [cid for cid in pmap.ccrc_ids if cid not in excluded]
    out = {cid: 0 for cid in excluded}
    if len(active) < 2:
        warnings.warn("fewer than two usable configurations; single cluster")
        out.update({cid: 1 for cid in active})
        return out
    X = np.array([pmap.row_of(cid) for cid in active], dtype=float)
    Zl = linkage(X, method="average", metric="cityblock")
    best = None
    for k in range(2, min(10, len(active) - 1) + 1):
        labels = fcluster(Zl, t=k, criterion="maxclust")
        if len(np.unique(labels)) < 2:
            continue
        score = _l1_silhouette(X, labels)
        if best is None or score > best[0] + 1e-12:
            best = (score, labels)
    if best is None:
        # all rows identical: a single behavioral cluster
        warnings.warn("level vectors indistinguishable; single cluster")
        out.update({cid: 1 for cid in active})
        return out
    labels = best[1]
    # renumber deterministically: cluster 1 holds the lowest ccrc id
    order = {}
    for cid, lab in zip(active, labels):
        order.setdefault(lab, cid)
    rank = {lab: i + 1 for i, lab in
            enumerate(sorted(order, key=lambda l: order[l]))}
    out.update({cid: rank[lab] for cid, lab in zip(active, labels)})
    return out


# ---------------------------------------------------------------------------
# cluster selection (greedy cover + rules)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionReport:
    selected: tuple[int, ...]
    cover: tuple[int, ...]        # covering cluster per subregion
    best_level: tuple[float, ...]  # best cluster-mean level per subregion
    rules: tuple[str, ...]


def select_clusters(pmap: PerformanceMap, labels: Mapping[int, int],
                    subregions: Subregions | None = None,
                    rule_depth: int = 3) -> SelectionReport:
    clusters = sorted({c for c in labels.values() if c != 0})
    if not clusters:
        raise UncoverableRegionError("no usable clusters")
    members = {c: [cid for cid, lab in labels.items() if lab == c]
               for c in clusters}
    mean_level = np.zeros((len(clusters), pmap.n_regions))
    for j, c in enumerate(clusters):
        rows = np.array([pmap.row_of(cid) for cid in members[c]], dtype=float)
        mean_level[j] = rows.mean(axis=0)

    best = mean_level.min(axis=0)
    for r in range(pmap.n_regions):
        if best[r] >= 5.0:
            raise UncoverableRegionError(
                f"subregion {r} has no stable cluster")
    eligible = [set(np.flatnonzero(mean_level[:, r] <= best[r] + 1e-9))
                for r in range(pmap.n_regions)]

    uncovered = set(range(pmap.n_regions))
    chosen: list[int] = []
    while uncovered:
        gain = [(len([r for r in uncovered if j in eligible[r]]), -j)
                for j in range(len(clusters))]
        best_j = max(range(len(clusters)), key=lambda j: gain[j])
        take = [r for r in uncovered if best_j in eligible[r]]
        if not take:
            raise UncoverableRegionError(
                f"greedy cover stalled with {sorted(uncovered)} uncovered")
        chosen.append(best_j)
        uncovered -= set(take)
    # prune: drop any cluster whose regions are covered by the others
    for j in sorted(chosen, key=lambda j: sum(j in e for e in eligible)):
        rest = [c for c in chosen if c != j]
        if all(any(c in eligible[r] for c in rest)
               for r in range(pmap.n_regions)):
            chosen = rest
    chosen = sorted(chosen)

    cover = []
    for r in range(pmap.n_regions):
        cands = [j for j in chosen if j in eligible[r]]
        cover.append(clusters[min(cands, key=lambda j: (mean_level[j, r], j))])
    rules = ()
    if subregions is not None:
        rules = _cover_rules(subregions, np.array(cover), rule_depth)
    return SelectionReport(
        selected=tuple(clusters[j] for j in chosen),
        cover=tuple(cover),
        best_level=tuple(float(b) for b in best),
        rules=rules,
    )


def _cover_rules(subregions: Subregions, cover: np.ndarray,
                 depth: int) -> tuple[str, ...]:
    """Depth-limited regression tree over (centroid dims -> cluster id),
    rendered as conditional rules."""
    X = subregions.centroid_frame().to_numpy(dtype=float)
    tree = TreeModel("regression", max_depth=depth)
    tree.fit(X, cover.astype(float), np.random.default_rng(0))
    names = subregions.dims
    rules: list[str] = []

    def walk(node: int, conds: list[str]):
        if tree.feature_[node] < 0:
            cluster = int(round(tree.value_[node]))
            cond = " and ".join(conds) if conds else "always"
            rules.append(f"if {cond} then cluster {cluster}")
            return
        f, thr = int(tree.feature_[node]), tree.threshold_[node]
        walk(tree.left_[node], conds + [f"{names[f]} <= {thr:.4g}"])
        walk(tree.right_[node], conds + [f"{names[f]} > {thr:.4g}"])

    walk(0, [])
    return tuple(rules)


# ---------------------------------------------------------------------------
# multi-indicator intersection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionResult:
    indicators: tuple[str, ...]
    combined: dict[int, tuple[int, ...]]
    groups: dict[tuple[int, ...], tuple[int, ...]]
    reduced: tuple[int, ...]
    per_indicator_selected: tuple[tuple[int, ...], ...] = field(default=())


def intersect_selections(
        per_indicator: Sequence[tuple[Mapping[int, int], Iterable[int]]],
        indicator_names: Sequence[str] | None = None) -> SelectionResult:
    if not per_indicator:
        raise ValueError("need at least one indicator selection")
    names = tuple(indicator_names or
                  [f"indicator{i}" for i in range(len(per_indicator))])
    all_ids = sorted({cid for labels, _ in per_indicator for cid in labels})
    combined: dict[int, tuple[int, ...]] = {}
    for cid in all_ids:
        attr = []
        for labels, selected in per_indicator:
            lab = labels.get(cid, 0)
            attr.append(lab if lab in set(selected) else 0)
        combined[cid] = tuple(attr)
    groups: dict[tuple[int, ...], list[int]] = {}
    for cid, attr in combined.items():
        groups.setdefault(attr, []).append(cid)
    zero = tuple(0 for _ in per_indicator)
    groups.pop(zero, None)
    frozen = {attr: tuple(sorted(ids)) for attr, ids in groups.items()}
    reduced = tuple(sorted(ids[0] for ids in frozen.values()))
    return SelectionResult(
        indicators=names,
        combined=combined,
        groups=frozen,
        reduced=reduced,
        per_indicator_selected=tuple(tuple(sorted(set(sel)))
                                     for _, sel in per_indicator),
    )


def choose_representatives(result: SelectionResult,
                           maps: Mapping[str, PerformanceMap]
                           ) -> SelectionResult:
    """Coverage-aware representative choice.

    One member per combined-attribute group, plus the fewest extras needed
    so that the final set (a) never shows a level-5 cell on any map and
    (b) sits within one level of the all-CCRC optimum in every
    (indicator, subregion) cell.
    """
    cols = list(maps)
    ids = list(maps[cols[0]].ccrc_ids)
    pos = {cid: i for i, cid in enumerate(ids)}
    stack = np.stack([maps[c].levels for c in cols])      # (k, n, regions)
    target = stack.min(axis=1) + 1                        # all-CCRC optimum
    safe = ~(stack == 5).any(axis=(0, 2))                 # per configuration
    covered_by = {cid: stack[:, pos[cid], :] <= target for cid in ids}

    def unmet(chosen: Sequence[int]) -> np.ndarray:
        got = np.zeros(target.shape, dtype=bool)
        for cid in chosen:
            got |= covered_by[cid]
        return ~got

    chosen: list[int] = []
    dropped = 0
    for attr in sorted(result.groups):
        members = [c for c in result.groups[attr] if safe[pos[c]]]
        if not members:
            dropped += 1
            continue
        need = unmet(chosen)
        chosen.append(min(members, key=lambda c:
                          (-int((covered_by[c] & need).sum()), c)))
    if dropped:
        warnings.warn(f"{dropped} group(s) have no everywhere-stable member "
                      "and contribute no representative")

    extras: list[int] = []
    pool = [cid for cid in ids if safe[pos[cid]]]
    need = unmet(chosen)
    while need.any():
        gains = [(int((covered_by[c] & need).sum()), c)
                 for c in pool if c not in chosen and c not in extras]
        gain, cid = max(gains, key=lambda t: (t[0], -t[1]), default=(0, -1))
        if gain == 0:
            cells = np.argwhere(need)
            i, r = cells[0]
            raise UncoverableRegionError(
                f"{len(cells)} cells uncoverable within one level of the "
                f"optimum; first: indicator {cols[i]}, subregion {int(r)}")
        extras.append(cid)
        need &= ~covered_by[cid]
    for cid in sorted(extras, reverse=True):
        rest = chosen + [e for e in extras if e != cid]
        if not unmet(rest).any():
            extras.remove(cid)
    return replace(result, reduced=tuple(sorted({*chosen, *extras})))


def reduce_ccrc_set(topology: GridTopology, ccrcs: Sequence[CCRC],
                    ops: Sequence[OperatingPoint], n_regions: int = 20,
                    seed: int = 0, table: pd.DataFrame | None = None
                    ) -> tuple[SelectionResult, dict[str, PerformanceMap], Subregions]:
    """Full reduction pipeline on exact labels."""
    subregions = partition_operating_space(ops, n_regions, seed=seed)
    if table is None:
        table = evaluate_indicator_table(topology, ccrcs, ops)
    maps = {}
    selections = []
    for col in INDICATOR_COLS:
        pmap = build_performance_map(table, subregions, col)
        labels = cluster_ccrcs(pmap)
        report = select_clusters(pmap, labels, subregions)
        maps[col] = pmap
        selections.append((labels, report.selected))
    result = intersect_selections(selections, INDICATOR_COLS)
    return choose_representatives(result, maps), maps, subregions


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_outputs(maps: Mapping[str, PerformanceMap],
                   result: SelectionResult, outdir: str | Path,
                   table: pd.DataFrame | None = None) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, pmap in maps.items():
        rows = pmap.ordered_rows()
        cols = pmap.ordered_cols()
        mat = np.array([[pmap.row_of(cid)[c] for c in cols] for cid in rows])
        fig = plotting.level_heatmap(
            mat, [str(cid) for cid in rows], [f"R{c}" for c in cols],
            f"stability map ({name})")
        written.append(plotting.save_svg(fig, outdir / f"map_{name}.svg"))
        csv_path = outdir / f"map_{name}.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ccrc_id", *(f"region_{c}" for c in cols)])
            for cid, row in zip(rows, mat):
                w.writerow([cid, *map(int, row)])
        written.append(csv_path)

    fig = plotting.membership_matrix(result.groups, result.indicators,
                                     "configuration groups")
    written.append(plotting.save_svg(fig, outdir / "membership.svg"))
    mem_csv = outdir / "membership.csv"
    with mem_csv.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*result.indicators, "size", "members", "representative"])
        for attr in sorted(result.groups, key=lambda k: (-len(result.groups[k]), k)):
            ids = result.groups[attr]
            w.writerow([*attr, len(ids), " ".join(map(str, ids)), ids[0]])
    written.append(mem_csv)

    if table is not None:
        box_csv = outdir / "indicator_summary.csv"
        with box_csv.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["indicator", "selection", "min", "q1", "median",
                        "q3", "max"])
            reduced = set(result.reduced)
            for col in INDICATOR_COLS:
                stable = table[table["upsilon"] == 1.0]
                for tag, sub in (("all", stable),
                                 ("reduced",
                                  stable[stable["ccrc_id"].isin(reduced)])):
                    vals = sub[col].dropna().to_numpy()
                    if len(vals) == 0:
                        continue
                    q = np.percentile(vals, [0, 25, 50, 75, 100])
                    w.writerow([col, tag, *(f"{v:.6g}" for v in q)])
        written.append(box_csv)
    return written
