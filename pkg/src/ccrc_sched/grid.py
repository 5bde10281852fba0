"""Hybrid AC/DC network model: topology, operating space, control roles.

A grid is a set of asynchronous AC subgrids coupled through multi-terminal
DC subgrids via interconnecting power converters (IPCs).  Each IPC runs one
of three control roles (GFL, AC_GFM, DC_GFM); an ordered assignment of roles
to every IPC is a CCRC (converter control-role configuration).  This module
owns the topology/operating-point types, CCRC enumeration and the two
feasibility rules:

* every AC subgrid needs at least one AC-forming node (an ``AC_GFM`` IPC or
  a non-IPC forming unit; Thevenin equivalents always count as forming),
* every DC subgrid needs at least one ``DC_GFM`` IPC.

Topologies are value objects: immutable after construction and safe to share
across worker processes.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

S_BASE_MVA = 100.0
F_NOMINAL_HZ = 50.0
OMEGA_BASE = 2.0 * math.pi * F_NOMINAL_HZ


class ControlRole(IntEnum):
    """Converter control roles. Values double as base-3 digits of CCRC ids."""

    GFL = 0
    AC_GFM = 1
    DC_GFM = 2

    @property
    def short(self) -> str:
        return {0: "GFL", 1: "ACGFM", 2: "DCGFM"}[int(self)]


N_ROLES = len(ControlRole)


# ---------------------------------------------------------------------------
# topology elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bus:
    """Single electrical node. ``capacitance`` (pu energy constant, seconds)
    is only meaningful on DC buses."""

    name: str
    vn_kv: float
    subgrid: str
    capacitance: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Series branch between two buses of one subgrid.

    AC branches use (r, x) in per-unit; DC branches use (r, l) where ``l``
    is per-unit inductive reactance at nominal frequency (seconds = l/omega_b).
    """

    name: str
    from_bus: str
    to_bus: str
    r: float
    x: float = 0.0
    l: float = 0.0


@dataclass(frozen=True)
class Generator:
    """Converter-interfaced generation unit holding a P/cosphi setpoint."""

    name: str
    bus: str
    rating_mva: float
    is_wind: bool = False
    forming: bool = False

    def __post_init__(self):
        if self.is_wind and self.forming:
            raise ValueError(f"wind generator {self.name} cannot be forming")


@dataclass(frozen=True)
class Load:
    """Constant-power load; P comes from the demand split of the operating
    point, Q from the fixed power factor."""

    name: str
    bus: str
    power_factor: float = 0.95


@dataclass(frozen=True)
class TheveninSource:
    """Stiff external-grid equivalent: EMF behind (r + jx) given in per-unit
    on the source's own ``rating_mva`` base. Always AC-forming."""

    name: str
    bus: str
    r: float = 0.02
    x: float = 0.2
    rating_mva: float = 1000.0

    def impedance_system_pu(self, s_base: float = S_BASE_MVA) -> complex:
        scale = s_base / self.rating_mva
        return complex(self.r, self.x) * scale


@dataclass(frozen=True)
class IPC:
    """Interconnecting power converter with one AC and one DC terminal bus.

    ``r_arm``/``l_arm`` are the lumped arm-equivalent impedance in system
    per-unit used for converter internal quantities and losses.
    """

    name: str
    ac_bus: str
    dc_bus: str
    rating_mva: float = 200.0
    r_arm: float = 0.01
    l_arm: float = 0.08


@dataclass(frozen=True)
class ACSubgrid:
    name: str
    buses: tuple[Bus, ...]


@dataclass(frozen=True)
class DCSubgrid:
    name: str
    buses: tuple[Bus, ...]


# ---------------------------------------------------------------------------
# operating space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatingRanges:
    """Sampling box of the operating space.

    gen_p_mw / gen_cosphi: per-generator [min, max] bounds.
    p_demand_mw: total demand range.
    load_share_base: base fraction of total demand per load (sums to 1);
    each sampled share stays within ``base*(1 ± share_band)``.
    """

    gen_p_mw: Mapping[str, tuple[float, float]]
    gen_cosphi: Mapping[str, tuple[float, float]]
    p_demand_mw: tuple[float, float]
    load_share_base: Mapping[str, float]
    share_band: float = 0.3

    def __post_init__(self):
        for name, (lo, hi) in {**self.gen_p_mw}.items():
            if lo > hi:
                raise ValueError(f"generator {name}: P range must have min <= max")
        for name, (lo, hi) in {**self.gen_cosphi}.items():
            if lo > hi:
                raise ValueError(f"generator {name}: cosphi range must have min <= max")
        if self.p_demand_mw[0] > self.p_demand_mw[1]:
            raise ValueError("demand range must have min <= max")
        total = sum(self.load_share_base.values())
        if self.load_share_base and abs(total - 1.0) > 1e-9:
            raise ValueError(f"load base shares sum to {total}, expected 1")

    def share_bounds(self, load: str) -> tuple[float, float]:
        base = self.load_share_base[load]
        return base * (1.0 - self.share_band), base * (1.0 + self.share_band)

    def dimension_names(self) -> list[str]:
        """Independent scalar sampling dimensions, in stable order."""
        dims = []
        for g in sorted(self.gen_p_mw):
            dims.append(f"p_{g}")
        for g in sorted(self.gen_cosphi):
            dims.append(f"cosphi_{g}")
        dims.append("p_demand")
        return dims

    def dimension_bounds(self) -> dict[str, tuple[float, float]]:
        bounds: dict[str, tuple[float, float]] = {}
        for g in sorted(self.gen_p_mw):
            bounds[f"p_{g}"] = tuple(self.gen_p_mw[g])
        for g in sorted(self.gen_cosphi):
            bounds[f"cosphi_{g}"] = tuple(self.gen_cosphi[g])
        bounds["p_demand"] = tuple(self.p_demand_mw)
        return bounds


@dataclass(frozen=True)
class OperatingPoint:
    """One point of the operating space.

    Wind/renewable injections are the entries of ``gen_p_mw`` belonging to
    generators flagged ``is_wind``.  ``ipc_schedules`` optionally pins the
    dispatched (P MW, Q Mvar) of individual IPCs; entries left out are filled
    by the dispatch rule in :mod:`ccrc_sched.powerflow`.
    """

    gen_p_mw: Mapping[str, float]
    gen_cosphi: Mapping[str, float]
    p_demand_mw: float
    load_shares: Mapping[str, float]
    ipc_schedules: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def validate(self, ranges: OperatingRanges, tol: float = 1e-9) -> None:
        for g, p in self.gen_p_mw.items():
            lo, hi = ranges.gen_p_mw[g]
            if not lo - tol <= p <= hi + tol:
                raise ValueError(f"P of {g} = {p} outside [{lo}, {hi}]")
        for g, c in self.gen_cosphi.items():
            lo, hi = ranges.gen_cosphi[g]
            if not lo - tol <= c <= hi + tol:
                raise ValueError(f"cosphi of {g} = {c} outside [{lo}, {hi}]")
        lo, hi = ranges.p_demand_mw
        if not lo - tol <= self.p_demand_mw <= hi + tol:
            raise ValueError(f"demand {self.p_demand_mw} outside [{lo}, {hi}]")
        total = sum(self.load_shares.values())
        if self.load_shares and abs(total - 1.0) > 1e-9:
            raise ValueError(f"load shares sum to {total}, expected 1")
        for name in ranges.load_share_base:
            lo, hi = ranges.share_bounds(name)
            s = self.load_shares[name]
            if not lo - tol <= s <= hi + tol:
                raise ValueError(f"share of {name} = {s} outside [{lo}, {hi}]")

    def load_p_mw(self, load: str) -> float:
        return self.p_demand_mw * self.load_shares[load]

    def to_dict(self) -> dict:
        return {
            "gen_p_mw": dict(self.gen_p_mw),
            "gen_cosphi": dict(self.gen_cosphi),
            "p_demand_mw": self.p_demand_mw,
            "load_shares": dict(self.load_shares),
            "ipc_schedules": {k: list(v) for k, v in self.ipc_schedules.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OperatingPoint":
        return cls(
            gen_p_mw=dict(d["gen_p_mw"]),
            gen_cosphi=dict(d["gen_cosphi"]),
            p_demand_mw=float(d["p_demand_mw"]),
            load_shares=dict(d["load_shares"]),
            ipc_schedules={k: (float(v[0]), float(v[1]))
                           for k, v in d.get("ipc_schedules", {}).items()},
        )


# ---------------------------------------------------------------------------
# topology container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridTopology:
    """Immutable description of the full hybrid network.

    IPC declaration order defines the CCRC position order and hence ids.
    """

    ac_subgrids: tuple[ACSubgrid, ...]
    dc_subgrids: tuple[DCSubgrid, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    thevenins: tuple[TheveninSource, ...]
    ipcs: tuple[IPC, ...]
    branches: tuple[Branch, ...]
    operating_ranges: OperatingRanges

    def __post_init__(self):
        self._validate()

    # -- validation -------------------------------------------------------
    def _validate(self) -> None:
        names = [b.name for sg in self.all_subgrids for b in sg.buses]
        if len(names) != len(set(names)):
            raise ValueError("bus names must be globally unique")
        bus_map = self.bus_map
        for el in (*self.generators, *self.loads, *self.thevenins):
            if el.bus not in bus_map:
                raise ValueError(f"{el.name}: unknown bus {el.bus}")
            if not self.is_ac_bus(el.bus):
                raise ValueError(f"{el.name}: must attach to an AC bus")
        ac_names = {sg.name for sg in self.ac_subgrids}
        dc_names = {sg.name for sg in self.dc_subgrids}
        for ipc in self.ipcs:
            if ipc.ac_bus not in bus_map or bus_map[ipc.ac_bus].subgrid not in ac_names:
                raise ValueError(f"IPC {ipc.name}: AC terminal {ipc.ac_bus} not on an AC subgrid")
            if ipc.dc_bus not in bus_map or bus_map[ipc.dc_bus].subgrid not in dc_names:
                raise ValueError(f"IPC {ipc.name}: DC terminal {ipc.dc_bus} not on a DC subgrid")
        for br in self.branches:
            try:
                sg_f = bus_map[br.from_bus].subgrid
                sg_t = bus_map[br.to_bus].subgrid
            except KeyError as exc:
                raise ValueError(f"branch {br.name}: unknown bus {exc}") from None
            if sg_f != sg_t:
                raise ValueError(f"branch {br.name} crosses subgrids {sg_f}/{sg_t}")
        for sg in self.all_subgrids:
            self._check_connected(sg)

    def _check_connected(self, sg) -> None:
        buses = [b.name for b in sg.buses]
        if len(buses) <= 1:
            return
        adj: dict[str, set[str]] = {b: set() for b in buses}
        for br in self.branches:
            if br.from_bus in adj and br.to_bus in adj:
                adj[br.from_bus].add(br.to_bus)
                adj[br.to_bus].add(br.from_bus)
        seen = {buses[0]}
        stack = [buses[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != set(buses):
            raise ValueError(f"subgrid {sg.name} branch graph is not connected")

    # -- lookups ----------------------------------------------------------
    @property
    def all_subgrids(self) -> tuple:
        return (*self.ac_subgrids, *self.dc_subgrids)

    @property
    def bus_map(self) -> dict[str, Bus]:
        return {b.name: b for sg in self.all_subgrids for b in sg.buses}

    @property
    def ac_buses(self) -> list[Bus]:
        return [b for sg in self.ac_subgrids for b in sg.buses]

    @property
    def dc_buses(self) -> list[Bus]:
        return [b for sg in self.dc_subgrids for b in sg.buses]

    def is_ac_bus(self, name: str) -> bool:
        return any(b.name == name for b in self.ac_buses)

    def ac_subgrid_of_bus(self, name: str) -> str:
        return self.bus_map[name].subgrid

    def branches_of(self, subgrid: str) -> list[Branch]:
        bus_map = self.bus_map
        return [br for br in self.branches if bus_map[br.from_bus].subgrid == subgrid]

    def ipcs_on_ac_subgrid(self, subgrid: str) -> list[IPC]:
        bus_map = self.bus_map
        return [c for c in self.ipcs if bus_map[c.ac_bus].subgrid == subgrid]

    def ipcs_on_dc_subgrid(self, subgrid: str) -> list[IPC]:
        bus_map = self.bus_map
        return [c for c in self.ipcs if bus_map[c.dc_bus].subgrid == subgrid]

    def thevenins_on(self, subgrid: str) -> list[TheveninSource]:
        bus_map = self.bus_map
        return [t for t in self.thevenins if bus_map[t.bus].subgrid == subgrid]

    def forming_units_on(self, subgrid: str) -> list:
        """Non-IPC AC-forming units of a subgrid (Thevenins always form)."""
        bus_map = self.bus_map
        units: list = list(self.thevenins_on(subgrid))
        units += [g for g in self.generators
                  if bus_map[g.bus].subgrid == subgrid and g.forming]
        return units

    def ipc_index(self, name: str) -> int:
        for i, c in enumerate(self.ipcs):
            if c.name == name:
                return i
        raise KeyError(name)

    @property
    def n_ipcs(self) -> int:
        return len(self.ipcs)


# ---------------------------------------------------------------------------
# CCRC enumeration and feasibility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CCRC:
    """Ordered role assignment, one role per IPC in declaration order."""

    roles: tuple[ControlRole, ...]

    @property
    def id(self) -> int:
        """Base-3 positional id; the first IPC is the most significant digit."""
        out = 0
        for r in self.roles:
            out = out * N_ROLES + int(r)
        return out

    @classmethod
    def from_id(cls, ccrc_id: int, n_ipcs: int) -> "CCRC":
        if not 0 <= ccrc_id < N_ROLES ** n_ipcs:
            raise ValueError(f"id {ccrc_id} out of range for {n_ipcs} IPCs")
        digits = []
        v = ccrc_id
        for _ in range(n_ipcs):
            digits.append(v % N_ROLES)
            v //= N_ROLES
        return cls(tuple(ControlRole(d) for d in reversed(digits)))

    def role_of(self, topology: GridTopology, ipc_name: str) -> ControlRole:
        return self.roles[topology.ipc_index(ipc_name)]

    def label(self) -> str:
        return "-".join(r.short for r in self.roles)

    def __len__(self) -> int:
        return len(self.roles)


def enumerate_all_ccrcs(topology: GridTopology) -> list[CCRC]:
    """All 3^|C| CCRCs of a topology in ascending id order."""
    n = topology.n_ipcs
    if n < 1:
        raise ValueError("topology has no IPCs")
    return [CCRC(tuple(ControlRole(d) for d in digits))
            for digits in itertools.product(range(N_ROLES), repeat=n)]


def is_feasible(topology: GridTopology, ccrc: CCRC) -> bool:
    """Both grid-forming rules hold: every AC subgrid has an AC-forming node
    and every DC subgrid has a DC_GFM terminal."""
    if len(ccrc) != topology.n_ipcs:
        raise ValueError(f"CCRC length {len(ccrc)} != {topology.n_ipcs} IPCs")
    for sg in topology.ac_subgrids:
        if topology.forming_units_on(sg.name):
            continue
        gfm = any(ccrc.roles[topology.ipc_index(c.name)] == ControlRole.AC_GFM
                  for c in topology.ipcs_on_ac_subgrid(sg.name))
        if not gfm:
            return False
    for sg in topology.dc_subgrids:
        gfm = any(ccrc.roles[topology.ipc_index(c.name)] == ControlRole.DC_GFM
                  for c in topology.ipcs_on_dc_subgrid(sg.name))
        if not gfm:
            return False
    return True


def feasible_ccrcs(topology: GridTopology) -> list[CCRC]:
    return [c for c in enumerate_all_ccrcs(topology) if is_feasible(topology, c)]


def ccr_distance(a: CCRC, b: CCRC) -> int:
    """Number of converters whose role differs between two CCRCs."""
    if len(a) != len(b):
        raise ValueError("CCRC lengths differ")
    return sum(1 for ra, rb in zip(a.roles, b.roles) if ra != rb)


# ---------------------------------------------------------------------------
# bundled default system
# ---------------------------------------------------------------------------

def default_topology() -> GridTopology:
    """Bundled six-IPC study system.

    Three asynchronous AC subgrids: ac1 and ac2 each host a Thevenin
    equivalent, one generator and two loads; ac3 hosts only a wind plant and
    is formed exclusively by IPC e.  Two three-terminal DC subgrids: dc1
    terminates IPCs a, b, c and dc2 terminates d, e, f.  Line impedances are
    chosen so the power flow converges over the whole demand range while the
    DC side keeps a lightly damped droop/line resonance.
    """
    ac1 = ACSubgrid("ac1", (
        Bus("ac1_thev", 220.0, "ac1"),
        Bus("ac1_gen", 220.0, "ac1"),
        Bus("ac1_load1", 220.0, "ac1"),
        Bus("ac1_load2", 220.0, "ac1"),
        Bus("ac1_ipc_a", 220.0, "ac1"),
        Bus("ac1_ipc_d", 220.0, "ac1"),
    ))
    ac2 = ACSubgrid("ac2", (
        Bus("ac2_thev", 220.0, "ac2"),
        Bus("ac2_gen", 220.0, "ac2"),
        Bus("ac2_load3", 220.0, "ac2"),
        Bus("ac2_load4", 220.0, "ac2"),
        Bus("ac2_ipc_b", 220.0, "ac2"),
        Bus("ac2_ipc_c", 220.0, "ac2"),
        Bus("ac2_ipc_f", 220.0, "ac2"),
    ))
    ac3 = ACSubgrid("ac3", (
        Bus("ac3_wind", 220.0, "ac3"),
        Bus("ac3_ipc_e", 220.0, "ac3"),
    ))
    c_dc = 0.05
    dc1 = DCSubgrid("dc1", (
        Bus("dc1_a", 640.0, "dc1", capacitance=c_dc),
        Bus("dc1_b", 640.0, "dc1", capacitance=c_dc),
        Bus("dc1_c", 640.0, "dc1", capacitance=c_dc),
    ))
    dc2 = DCSubgrid("dc2", (
        Bus("dc2_d", 640.0, "dc2", capacitance=c_dc),
        Bus("dc2_e", 640.0, "dc2", capacitance=c_dc),
        Bus("dc2_f", 640.0, "dc2", capacitance=c_dc),
    ))

    branches = (
        # ac1: meshed ring, IPC feeders slightly longer
        Branch("ac1_l1", "ac1_thev", "ac1_load1", 0.002, 0.020),
        Branch("ac1_l2", "ac1_thev", "ac1_gen", 0.002, 0.022),
        Branch("ac1_l3", "ac1_gen", "ac1_load2", 0.002, 0.020),
        Branch("ac1_l4", "ac1_load1", "ac1_load2", 0.003, 0.025),
        Branch("ac1_l5", "ac1_load1", "ac1_ipc_a", 0.004, 0.045),
        Branch("ac1_l6", "ac1_load2", "ac1_ipc_d", 0.004, 0.045),
        Branch("ac1_l7", "ac1_ipc_a", "ac1_ipc_d", 0.004, 0.040),
        # ac2
        Branch("ac2_l1", "ac2_thev", "ac2_load3", 0.002, 0.020),
        Branch("ac2_l2", "ac2_thev", "ac2_gen", 0.002, 0.022),
        Branch("ac2_l3", "ac2_gen", "ac2_load4", 0.002, 0.020),
        Branch("ac2_l4", "ac2_load3", "ac2_load4", 0.003, 0.025),
        Branch("ac2_l5", "ac2_load3", "ac2_ipc_b", 0.004, 0.045),
        Branch("ac2_l6", "ac2_load4", "ac2_ipc_c", 0.004, 0.050),
        Branch("ac2_l7", "ac2_load4", "ac2_ipc_f", 0.004, 0.045),
        Branch("ac2_l8", "ac2_ipc_b", "ac2_ipc_c", 0.004, 0.040),
        # ac3: single long feeder, deliberately weak
        Branch("ac3_l1", "ac3_wind", "ac3_ipc_e", 0.020, 0.200),
        # dc1/dc2: triangle meshes, low damping
        Branch("dc1_l1", "dc1_a", "dc1_b", 0.009, l=0.24),
        Branch("dc1_l2", "dc1_b", "dc1_c", 0.009, l=0.24),
        Branch("dc1_l3", "dc1_a", "dc1_c", 0.012, l=0.30),
        Branch("dc2_l1", "dc2_d", "dc2_e", 0.009, l=0.24),
        Branch("dc2_l2", "dc2_e", "dc2_f", 0.009, l=0.24),
        Branch("dc2_l3", "dc2_d", "dc2_f", 0.012, l=0.30),
    )

    ranges = OperatingRanges(
        gen_p_mw={"g1": (15.0, 285.0), "g2": (5.0, 95.0), "g3": (7.5, 142.5)},
        gen_cosphi={"g1": (0.8, 0.95), "g2": (0.8, 0.95), "g3": (0.8, 0.95)},
        p_demand_mw=(200.0, 700.0),
        load_share_base={"l1": 0.3, "l2": 0.2, "l3": 0.2, "l4": 0.3},
        share_band=0.3,
    )

    return GridTopology(
        ac_subgrids=(ac1, ac2, ac3),
        dc_subgrids=(dc1, dc2),
        generators=(
            Generator("g1", "ac1_gen", rating_mva=300.0),
            Generator("g2", "ac2_gen", rating_mva=100.0),
            Generator("g3", "ac3_wind", rating_mva=150.0, is_wind=True),
        ),
        loads=(
            Load("l1", "ac1_load1"),
            Load("l2", "ac1_load2"),
            Load("l3", "ac2_load3"),
            Load("l4", "ac2_load4"),
        ),
        thevenins=(
            TheveninSource("t1", "ac1_thev"),
            TheveninSource("t2", "ac2_thev"),
        ),
        ipcs=(
            IPC("a", "ac1_ipc_a", "dc1_a"),
            IPC("b", "ac2_ipc_b", "dc1_b"),
            IPC("c", "ac2_ipc_c", "dc1_c"),
            IPC("d", "ac1_ipc_d", "dc2_d"),
            IPC("e", "ac3_ipc_e", "dc2_e"),
            IPC("f", "ac2_ipc_f", "dc2_f"),
        ),
        branches=branches,
        operating_ranges=ranges,
    )


# ---------------------------------------------------------------------------
# grid description file (schema 1)
# ---------------------------------------------------------------------------

def topology_to_dict(top: GridTopology) -> dict:
    return {
        "schema": 1,
        "ac_subgrids": [
            {"name": sg.name,
             "buses": [{"name": b.name, "vn_kv": b.vn_kv} for b in sg.buses]}
            for sg in top.ac_subgrids
        ],
        "dc_subgrids": [
            {"name": sg.name,
             "buses": [{"name": b.name, "vn_kv": b.vn_kv,
                        "capacitance": b.capacitance} for b in sg.buses]}
            for sg in top.dc_subgrids
        ],
        "generators": [
            {"name": g.name, "bus": g.bus, "rating_mva": g.rating_mva,
             "is_wind": g.is_wind, "forming": g.forming}
            for g in top.generators
        ],
        "loads": [
            {"name": l.name, "bus": l.bus, "power_factor": l.power_factor}
            for l in top.loads
        ],
        "thevenins": [
            {"name": t.name, "bus": t.bus, "r": t.r, "x": t.x,
             "rating_mva": t.rating_mva}
            for t in top.thevenins
        ],
        "ipcs": [
            {"name": c.name, "ac_bus": c.ac_bus, "dc_bus": c.dc_bus,
             "rating_mva": c.rating_mva, "r_arm": c.r_arm, "l_arm": c.l_arm}
            for c in top.ipcs
        ],
        "branches": [
            {"name": br.name, "from": br.from_bus, "to": br.to_bus,
             "r": br.r, "x": br.x, "l": br.l}
            for br in top.branches
        ],
        "operating_ranges": {
            "gen_p_mw": {k: list(v) for k, v in top.operating_ranges.gen_p_mw.items()},
            "gen_cosphi": {k: list(v) for k, v in top.operating_ranges.gen_cosphi.items()},
            "p_demand_mw": list(top.operating_ranges.p_demand_mw),
            "load_share_base": dict(top.operating_ranges.load_share_base),
            "share_band": top.operating_ranges.share_band,
        },
    }


def topology_from_dict(doc: Mapping) -> GridTopology:
    if doc.get("schema") != 1:
        raise ValueError(f"unsupported grid file schema: {doc.get('schema')!r}")
    ac = tuple(
        ACSubgrid(sg["name"], tuple(
            Bus(b["name"], float(b["vn_kv"]), sg["name"]) for b in sg["buses"]))
        for sg in doc["ac_subgrids"]
    )
    dc = tuple(
        DCSubgrid(sg["name"], tuple(
            Bus(b["name"], float(b["vn_kv"]), sg["name"],
                capacitance=float(b.get("capacitance", 0.0))) for b in sg["buses"]))
        for sg in doc["dc_subgrids"]
    )
    rr = doc["operating_ranges"]
    ranges = OperatingRanges(
        gen_p_mw={k: tuple(v) for k, v in rr["gen_p_mw"].items()},
        gen_cosphi={k: tuple(v) for k, v in rr["gen_cosphi"].items()},
        p_demand_mw=tuple(rr["p_demand_mw"]),
        load_share_base=dict(rr["load_share_base"]),
        share_band=float(rr.get("share_band", 0.3)),
    )
    return GridTopology(
        ac_subgrids=ac,
        dc_subgrids=dc,
        generators=tuple(
            Generator(g["name"], g["bus"], float(g["rating_mva"]),
                      is_wind=bool(g.get("is_wind", False)),
                      forming=bool(g.get("forming", False)))
            for g in doc["generators"]),
        loads=tuple(
            Load(l["name"], l["bus"], float(l.get("power_factor", 0.95)))
            for l in doc["loads"]),
        thevenins=tuple(
            TheveninSource(t["name"], t["bus"], float(t.get("r", 0.02)),
                           float(t.get("x", 0.2)),
                           float(t.get("rating_mva", 1000.0)))
            for t in doc["thevenins"]),
        ipcs=tuple(
            IPC(c["name"], c["ac_bus"], c["dc_bus"],
                rating_mva=float(c.get("rating_mva", 200.0)),
                r_arm=float(c.get("r_arm", 0.01)),
                l_arm=float(c.get("l_arm", 0.08)))
            for c in doc["ipcs"]),
        branches=tuple(
            Branch(br["name"], br["from"], br["to"], float(br["r"]),
                   x=float(br.get("x", 0.0)), l=float(br.get("l", 0.0)))
            for br in doc["branches"]),
        operating_ranges=ranges,
    )


def save_grid_file(top: GridTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology_to_dict(top), indent=2) + "\n")


def load_grid_file(path: str | Path) -> GridTopology:
    """Load a topology; the literal name ``default`` returns the bundled system."""
    if str(path) == "default":
        return default_topology()
    return topology_from_dict(json.loads(Path(path).read_text()))
