"""Coupled AC/DC power flow for one (OperatingPoint, CCRC) pair.

One damped Newton solve covers all AC subgrids, all DC subgrids and the
converter couplings simultaneously.  Bus roles follow the control roles:

* Thevenin sources are fixed EMFs behind their impedance (folded in as
  Norton injections), anchoring angle reference and power balance of their
  subgrid — the slack behavior.
* GFL IPCs and generators hold P/Q setpoints.
* AC_GFM IPCs hold their terminal voltage magnitude; in a subgrid without a
  Thevenin the first AC_GFM terminal also fixes the angle reference and
  balances the subgrid (classic slack bus).
* DC_GFM IPCs enforce the droop characteristic V_dc = V_dc0 − k_d (P − P*)
  on their DC terminal; several DC_GFM terminals share imbalance by droop.

Converters conserve energy up to the arm-resistance losses on both paths:
P_ac_inj + P_dc_inj + R_arm (|I_diff|^2 + |I_sum|^2) = 0.  The implicit
per-converter loss equation is solved closed-form inside the residual, so
the converged solution satisfies the same identity the internal-quantity
extraction uses.

The Jacobian is built by batched central finite differences; the full system
is ~35 unknowns, where robustness against model edits beats analytic blocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .grid import (
    CCRC,
    ControlRole,
    GridTopology,
    OperatingPoint,
    S_BASE_MVA,
    is_feasible,
)

log = logging.getLogger(__name__)

V_DC0 = 1.0
K_DROOP = 0.05
V_AC_SET = 1.0


class PowerFlowError(RuntimeError):
    """Raised when a flow diverges or the Newton system is singular."""

    def __init__(self, message: str, *, kind: str = "diverged",
                 residual: float = math.nan, iterations: int = 0):
        super().__init__(message)
        self.kind = kind
        self.residual = residual
        self.iterations = iterations


class InfeasibleCCRCError(ValueError):
    pass


class DegenerateCircuitError(RuntimeError):
    pass


@dataclass(frozen=True)
class IPCSchedule:
    """Resolved dispatch of one converter, system per-unit.

    ``p_ac`` is the scheduled AC-side injection (ignored when the converter
    is the subgrid slack or runs DC_GFM), ``p_dc_ref`` the droop reference
    used when the converter runs DC_GFM.
    """

    p_ac: float
    q_ac: float
    p_dc_ref: float


@dataclass(frozen=True)
class PowerFlowSolution:
    """Converged operating state; powers in per-unit, injection-positive."""

    ccrc: CCRC
    ac_voltage: Mapping[str, complex]
    dc_voltage: Mapping[str, float]
    gen_pq: Mapping[str, tuple[float, float]]
    load_pq: Mapping[str, tuple[float, float]]
    thevenin_pq: Mapping[str, tuple[float, float]]
    ipc_ac_pq: Mapping[str, tuple[float, float]]
    ipc_dc_p: Mapping[str, float]
    schedules: Mapping[str, IPCSchedule]
    slack_buses: Mapping[str, str]
    iterations: int
    max_residual: float

    def ipc_loss(self, name: str) -> float:
        p_ac, _ = self.ipc_ac_pq[name]
        return -(p_ac + self.ipc_dc_p[name])

    def voltage_polar(self, bus: str) -> tuple[float, float]:
        v = self.ac_voltage[bus]
        return abs(v), math.atan2(v.imag, v.real)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def dispatch_schedules(topology: GridTopology, op: OperatingPoint) -> dict[str, IPCSchedule]:
    """Schedule DC-link flows for an operating point.

    Each Thevenin-backed AC subgrid exports its generation-demand mismatch
    through its IPC terminals proportionally to converter ratings (clipped at
    the rating); subgrids without a Thevenin are balanced by their forming
    converter directly.  Role-independent: the same OP dispatches the same
    flows for every CCRC.  Explicit ``op.ipc_schedules`` entries (MW/Mvar,
    AC-side injection) override the rule.
    """
    bus_map = topology.bus_map
    sched: dict[str, IPCSchedule] = {}
    for sg in topology.ac_subgrids:
        gen_p = sum(op.gen_p_mw[g.name] for g in topology.generators
                    if bus_map[g.bus].subgrid == sg.name)
        load_p = sum(op.load_p_mw(l.name) for l in topology.loads
                     if bus_map[l.bus].subgrid == sg.name)
        mismatch = (gen_p - load_p) / S_BASE_MVA
        terminals = topology.ipcs_on_ac_subgrid(sg.name)
        if not terminals:
            continue
        if topology.forming_units_on(sg.name):
            total_rating = sum(c.rating_mva for c in terminals)
            for c in terminals:
                rating_pu = c.rating_mva / S_BASE_MVA
                export = mismatch * c.rating_mva / total_rating
                export = float(np.clip(export, -rating_pu, rating_pu))
                sched[c.name] = IPCSchedule(p_ac=-export, q_ac=0.0, p_dc_ref=export)
        else:
            # the forming converter will balance this subgrid as slack
            for c in terminals:
                sched[c.name] = IPCSchedule(p_ac=0.0, q_ac=0.0, p_dc_ref=0.0)
    for name, (p_mw, q_mvar) in op.ipc_schedules.items():
        p, q = p_mw / S_BASE_MVA, q_mvar / S_BASE_MVA
        sched[name] = IPCSchedule(p_ac=p, q_ac=q, p_dc_ref=-p)
    return sched


# ---------------------------------------------------------------------------
# converter loss closures (see module docstring for the identity)
# ---------------------------------------------------------------------------

def _pass_through_dc_draw(p_ac, q_ac, v_ac, v_dc, r_arm):
    """DC-side power draw of a converter injecting (p_ac, q_ac) into AC."""
    i_diff2 = (p_ac ** 2 + q_ac ** 2) / v_ac ** 2
    p_mid = p_ac + r_arm * i_diff2
    a = r_arm / v_dc ** 2
    disc = 1.0 - 4.0 * a * p_mid
    disc = np.where(disc > 0.0, disc, np.nan)
    return (1.0 - np.sqrt(disc)) / (2.0 * a)


def _dcgfm_ac_injection(p_dc_inj, q_ac, v_ac, v_dc, r_arm):
    """AC-side injection of a converter delivering p_dc_inj into its DC bus."""
    i_sum2 = (p_dc_inj / v_dc) ** 2
    p_mid = p_dc_inj + r_arm * i_sum2
    a = r_arm / v_ac ** 2
    c = p_mid + r_arm * q_ac ** 2 / v_ac ** 2
    disc = 1.0 - 4.0 * a * c
    disc = np.where(disc > 0.0, disc, np.nan)
    return (-1.0 + np.sqrt(disc)) / (2.0 * a)


# ---------------------------------------------------------------------------
# solver plan
# ---------------------------------------------------------------------------

class _Plan:
    """Index maps, admittances and the residual function for one solve."""

    def __init__(self, topology: GridTopology, op: OperatingPoint, ccrc: CCRC):
        self.top = topology
        self.op = op
        self.ccrc = ccrc
        self.sched = dispatch_schedules(topology, op)

        self.ac_names = [b.name for b in topology.ac_buses]
        self.dc_names = [b.name for b in topology.dc_buses]
        self.ac_idx = {n: i for i, n in enumerate(self.ac_names)}
        self.dc_idx = {n: i for i, n in enumerate(self.dc_names)}
        n_ac, n_dc = len(self.ac_names), len(self.dc_names)

        # AC admittance (block diagonal over subgrids by construction)
        Y = np.zeros((n_ac, n_ac), complex)
        for br in topology.branches:
            if br.from_bus in self.ac_idx:
                i, j = self.ac_idx[br.from_bus], self.ac_idx[br.to_bus]
                y = 1.0 / complex(br.r, br.x)
                Y[i, i] += y
                Y[j, j] += y
                Y[i, j] -= y
                Y[j, i] -= y
        self.Y = Y

        # DC conductance Laplacian
        G = np.zeros((n_dc, n_dc))
        for br in topology.branches:
            if br.from_bus in self.dc_idx:
                i, j = self.dc_idx[br.from_bus], self.dc_idx[br.to_bus]
                g = 1.0 / br.r
                G[i, i] += g
                G[j, j] += g
                G[i, j] -= g
                G[j, i] -= g
        self.Gdc = G

        # static injections per AC bus (gens + loads), and Thevenins
        self.s_static = np.zeros(n_ac, complex)
        for g in topology.generators:
            p = op.gen_p_mw[g.name] / S_BASE_MVA
            q = p * math.tan(math.acos(op.gen_cosphi[g.name]))
            self.s_static[self.ac_idx[g.bus]] += complex(p, q)
        for l in topology.loads:
            p = op.load_p_mw(l.name) / S_BASE_MVA
            q = p * math.tan(math.acos(l.power_factor))
            self.s_static[self.ac_idx[l.bus]] -= complex(p, q)
        self.thev = [(self.ac_idx[t.bus], t.impedance_system_pu(), t.name)
                     for t in topology.thevenins]

        # converter roles and terminals
        self.ipc_rows = []
        for pos, c in enumerate(topology.ipcs):
            self.ipc_rows.append((c, ccrc.roles[pos],
                                  self.ac_idx[c.ac_bus], self.dc_idx[c.dc_bus]))

        # slack / PV classification
        self.slack_buses: dict[str, str] = {}
        slack_set: set[int] = set()
        pv_set: set[int] = set()
        for sg in topology.ac_subgrids:
            has_forming = bool(topology.forming_units_on(sg.name))
            gfm_terms = [c for c, role, _, _ in self.ipc_rows
                         if role == ControlRole.AC_GFM
                         and topology.bus_map[c.ac_bus].subgrid == sg.name]
            if not has_forming:
                if not gfm_terms:
                    raise InfeasibleCCRCError(
                        f"AC subgrid {sg.name} has no forming unit under this CCRC")
                slack = gfm_terms[0]
                self.slack_buses[sg.name] = slack.ac_bus
                slack_set.add(self.ac_idx[slack.ac_bus])
                pv_set.update(self.ac_idx[c.ac_bus] for c in gfm_terms[1:])
            else:
                pv_set.update(self.ac_idx[c.ac_bus] for c in gfm_terms)
        self.slack_set = slack_set
        self.pv_set = pv_set

        self.theta_vars = [i for i in range(n_ac) if i not in slack_set]
        self.v_vars = [i for i in range(n_ac)
                       if i not in slack_set and i not in pv_set]
        self.p_rows = list(self.theta_vars)
        self.q_rows = list(self.v_vars)
        self.n_unknowns = len(self.theta_vars) + len(self.v_vars) + n_dc

    # -- state vector <-> voltages -----------------------------------------
    def initial_guess(self) -> np.ndarray:
        return np.concatenate([
            np.zeros(len(self.theta_vars)),
            np.ones(len(self.v_vars)),
            np.full(len(self.dc_names), V_DC0),
        ])

    def unpack(self, x: np.ndarray):
        batch = x.ndim == 2
        B = x.shape[1] if batch else 1
        xc = x if batch else x[:, None]
        n_ac = len(self.ac_names)
        nt, nv = len(self.theta_vars), len(self.v_vars)
        theta = np.zeros((n_ac, B))
        vmag = np.full((n_ac, B), V_AC_SET)
        theta[self.theta_vars] = xc[:nt]
        vmag[self.v_vars] = xc[nt:nt + nv]
        vdc = xc[nt + nv:]
        return theta, vmag, vdc

    # -- residual ------------------------------------------------------------
    def residual(self, x: np.ndarray) -> np.ndarray:
        batch = x.ndim == 2
        theta, vmag, vdc = self.unpack(x)
        V = vmag * np.exp(1j * theta)
        s_net = V * np.conj(self.Y @ V)

        p_spec = np.broadcast_to(self.s_static.real[:, None], s_net.shape).copy()
        q_spec = np.broadcast_to(self.s_static.imag[:, None], s_net.shape).copy()
        for i, z, _ in self.thev:
            s_t = V[i] * np.conj((1.0 - V[i]) / z)
            p_spec[i] += s_t.real
            q_spec[i] += s_t.imag

        p_dc_spec = np.zeros_like(vdc)
        for c, role, ia, idc in self.ipc_rows:
            sc = self.sched[c.name]
            vt = vmag[ia]
            vd = vdc[idc]
            if role == ControlRole.DC_GFM:
                p_dc = sc.p_dc_ref + (V_DC0 - vd) / K_DROOP
                p_ac = _dcgfm_ac_injection(p_dc, sc.q_ac, vt, vd, c.r_arm)
                p_spec[ia] += p_ac
                q_spec[ia] += sc.q_ac
                p_dc_spec[idc] += p_dc
            elif ia in self.slack_set:
                # forming slack: AC side balances the subgrid, pass power to DC
                p_conv = s_net[ia].real - p_spec[ia]
                q_conv = s_net[ia].imag - q_spec[ia]
                draw = _pass_through_dc_draw(p_conv, q_conv, vt, vd, c.r_arm)
                p_dc_spec[idc] += -draw
            elif ia in self.pv_set and role == ControlRole.AC_GFM:
                q_conv = s_net[ia].imag - q_spec[ia]
                p_spec[ia] += sc.p_ac
                draw = _pass_through_dc_draw(sc.p_ac, q_conv, vt, vd, c.r_arm)
                p_dc_spec[idc] += -draw
            else:  # GFL
                p_spec[ia] += sc.p_ac
                q_spec[ia] += sc.q_ac
                draw = _pass_through_dc_draw(sc.p_ac, sc.q_ac, vt, vd, c.r_arm)
                p_dc_spec[idc] += -draw

        p_net_dc = vdc * (self.Gdc @ vdc)
        res = np.concatenate([
            (p_spec - s_net.real)[self.p_rows],
            (q_spec - s_net.imag)[self.q_rows],
            p_dc_spec - p_net_dc,
        ])
        return res if batch else res[:, 0]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        n = x.size
        h = 1e-7 * np.maximum(1.0, np.abs(x))
        X = np.concatenate([x[:, None] + np.diag(h), x[:, None] - np.diag(h)], axis=1)
        R = self.residual(X)
        return (R[:, :n] - R[:, n:]) / (2.0 * h[None, :])


def solve_power_flow(topology: GridTopology, op: OperatingPoint, ccrc: CCRC, *,
                     tol: float = 1e-8, max_iter: int = 50, max_halvings: int = 4,
                     validate_op: bool = True) -> PowerFlowSolution:
    """Damped Newton solve of the coupled AC/DC flow.

    Raises :class:`InfeasibleCCRCError` for CCRCs violating the forming
    rules and :class:`PowerFlowError` on divergence (residual NaN or not
    below ``tol`` within ``max_iter``).
    """
    if not is_feasible(topology, ccrc):
        raise InfeasibleCCRCError(f"CCRC {ccrc.id} violates the forming rules")
    if validate_op:
        op.validate(topology.operating_ranges)

    plan = _Plan(topology, op, ccrc)
    x = plan.initial_guess()
    r = plan.residual(x)
    for it in range(max_iter):
        rnorm = float(np.max(np.abs(r)))
        if not np.isfinite(rnorm):
            raise PowerFlowError("residual is not finite", residual=rnorm,
                                 iterations=it)
        if rnorm < tol:
            return _build_solution(plan, x, it, rnorm)
        J = plan.jacobian(x)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Newton system: {exc}", kind="singular",
                                 residual=rnorm, iterations=it) from None
        alpha = 1.0
        x_new, r_new = x + dx, None
        for _ in range(max_halvings + 1):
            x_new = x + alpha * dx
            r_new = plan.residual(x_new)
            new_norm = float(np.max(np.abs(r_new)))
            if np.isfinite(new_norm) and new_norm < rnorm:
                break
            alpha *= 0.5
        x, r = x_new, r_new
    rnorm = float(np.max(np.abs(r)))
    if rnorm < tol:
        return _build_solution(plan, x, max_iter, rnorm)
    raise PowerFlowError(
        f"no convergence after {max_iter} iterations (residual {rnorm:.3e})",
        residual=rnorm, iterations=max_iter)


def _build_solution(plan: _Plan, x: np.ndarray, iterations: int,
                    max_residual: float) -> PowerFlowSolution:
    top, op = plan.top, plan.op
    theta, vmag, vdc = plan.unpack(x)
    theta, vmag, vdc = theta[:, 0], vmag[:, 0], vdc[:, 0]
    V = vmag * np.exp(1j * theta)
    s_net = V * np.conj(plan.Y @ V)

    ac_voltage = {n: complex(V[i]) for n, i in plan.ac_idx.items()}
    dc_voltage = {n: float(vdc[i]) for n, i in plan.dc_idx.items()}

    gen_pq, load_pq = {}, {}
    for g in top.generators:
        p = op.gen_p_mw[g.name] / S_BASE_MVA
        gen_pq[g.name] = (p, p * math.tan(math.acos(op.gen_cosphi[g.name])))
    for l in top.loads:
        p = op.load_p_mw(l.name) / S_BASE_MVA
        load_pq[l.name] = (p, p * math.tan(math.acos(l.power_factor)))

    thevenin_pq = {}
    for i, z, name in plan.thev:
        s_t = V[i] * np.conj((1.0 - V[i]) / z)
        thevenin_pq[name] = (float(s_t.real), float(s_t.imag))

    # reconstruct converter powers exactly as the residual saw them
    s_other = plan.s_static.copy()
    for i, z, _ in plan.thev:
        s_other[i] += V[i] * np.conj((1.0 - V[i]) / z)

    ipc_ac_pq, ipc_dc_p = {}, {}
    for c, role, ia, idc in plan.ipc_rows:
        sc = plan.sched[c.name]
        vt, vd = vmag[ia], vdc[idc]
        if role == ControlRole.DC_GFM:
            p_dc = sc.p_dc_ref + (V_DC0 - vd) / K_DROOP
            p_ac = float(_dcgfm_ac_injection(p_dc, sc.q_ac, vt, vd, c.r_arm))
            q_ac = sc.q_ac
        elif ia in plan.slack_set:
            p_ac = float(s_net[ia].real - s_other[ia].real)
            q_ac = float(s_net[ia].imag - s_other[ia].imag)
            p_dc = -float(_pass_through_dc_draw(p_ac, q_ac, vt, vd, c.r_arm))
        elif ia in plan.pv_set and role == ControlRole.AC_GFM:
            p_ac = sc.p_ac
            q_ac = float(s_net[ia].imag - s_other[ia].imag)
            p_dc = -float(_pass_through_dc_draw(p_ac, q_ac, vt, vd, c.r_arm))
        else:
            p_ac, q_ac = sc.p_ac, sc.q_ac
            p_dc = -float(_pass_through_dc_draw(p_ac, q_ac, vt, vd, c.r_arm))
        ipc_ac_pq[c.name] = (float(p_ac), float(q_ac))
        ipc_dc_p[c.name] = float(p_dc)

    return PowerFlowSolution(
        ccrc=plan.ccrc,
        ac_voltage=ac_voltage,
        dc_voltage=dc_voltage,
        gen_pq=gen_pq,
        load_pq=load_pq,
        thevenin_pq=thevenin_pq,
        ipc_ac_pq=ipc_ac_pq,
        ipc_dc_p=ipc_dc_p,
        schedules=dict(plan.sched),
        slack_buses=dict(plan.slack_buses),
        iterations=iterations,
        max_residual=max_residual,
    )


# ---------------------------------------------------------------------------
# converter internal quantities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IPCInternalQuantities:
    """Steady-state averaged-model quantities of one converter (pu / rad).

    ``i_diff`` is the AC-side (differential-path) current, ``i_sum`` the
    DC-side (additive-path) current; ``v_diff``/``v_sum`` the applied
    internal voltages behind the arm-equivalent impedance drops.  Additive
    quantities are DC in steady state, so their angles are 0 or pi (sign).
    """

    ipc: str
    v_ac: float
    theta_v_ac: float
    v_diff: float
    theta_v_diff: float
    v_sum: float
    theta_v_sum: float
    i_diff: float
    theta_i_diff: float
    i_sum: float
    theta_i_sum: float

    FIELDS = ("v_ac", "theta_v_ac", "v_diff", "theta_v_diff", "v_sum",
              "theta_v_sum", "i_diff", "theta_i_diff", "i_sum", "theta_i_sum")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _polar(value: complex) -> tuple[float, float]:
    mag = abs(value)
    ang = math.atan2(value.imag, value.real) if mag > 0 else 0.0
    return mag, ang


def compute_ipc_internals(topology: GridTopology,
                          pf: PowerFlowSolution) -> list[IPCInternalQuantities]:
    """Averaged-model internal quantities for every IPC, in declaration order."""
    out = []
    for c in topology.ipcs:
        v_ph = pf.ac_voltage[c.ac_bus]
        if abs(v_ph) < 1e-6:
            raise DegenerateCircuitError(f"IPC {c.name}: zero AC terminal voltage")
        z_arm = complex(c.r_arm, c.l_arm)
        s_ac = complex(*pf.ipc_ac_pq[c.name])
        i_diff = np.conj(s_ac / v_ph) if s_ac != 0 else 0j
        v_diff = v_ph + z_arm * i_diff
        v_dc = pf.dc_voltage[c.dc_bus]
        p_dc = pf.ipc_dc_p[c.name]
        i_sum_signed = p_dc / v_dc
        v_sum_signed = v_dc + c.r_arm * i_sum_signed
        v_ac_m, v_ac_a = _polar(v_ph)
        v_d_m, v_d_a = _polar(v_diff)
        i_d_m, i_d_a = _polar(complex(i_diff))
        out.append(IPCInternalQuantities(
            ipc=c.name,
            v_ac=v_ac_m, theta_v_ac=v_ac_a,
            v_diff=v_d_m, theta_v_diff=v_d_a,
            v_sum=abs(v_sum_signed), theta_v_sum=0.0 if v_sum_signed >= 0 else math.pi,
            i_diff=i_d_m, theta_i_diff=i_d_a,
            i_sum=abs(i_sum_signed), theta_i_sum=0.0 if i_sum_signed >= 0 else math.pi,
        ))
    return out


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def feature_names(topology: GridTopology) -> list[str]:
    """Stable column order: X_PF block then X_IPC block.

    X_PF: (V, theta) per AC bus, V per DC bus, then (P, Q) per generator,
    IPC (AC side), load, Thevenin.  X_IPC: ten internal quantities per IPC.
    All per-unit and radians.
    """
    names: list[str] = []
    for b in topology.ac_buses:
        names += [f"v_{b.name}", f"theta_{b.name}"]
    for b in topology.dc_buses:
        names.append(f"v_{b.name}")
    for g in topology.generators:
        names += [f"p_{g.name}", f"q_{g.name}"]
    for c in topology.ipcs:
        names += [f"p_{c.name}", f"q_{c.name}"]
    for l in topology.loads:
        names += [f"p_{l.name}", f"q_{l.name}"]
    for t in topology.thevenins:
        names += [f"p_{t.name}", f"q_{t.name}"]
    for c in topology.ipcs:
        for f in IPCInternalQuantities.FIELDS:
            names.append(f"{f}_{c.name}")
    return names


def extract_feature_vector(topology: GridTopology, pf: PowerFlowSolution,
                           internals: Sequence[IPCInternalQuantities],
                           ) -> tuple[list[str], np.ndarray]:
    """Flat named feature row for one converged solution."""
    values: list[float] = []
    for b in topology.ac_buses:
        v, th = pf.voltage_polar(b.name)
        values += [v, th]
    for b in topology.dc_buses:
        values.append(pf.dc_voltage[b.name])
    for g in topology.generators:
        values += list(pf.gen_pq[g.name])
    for c in topology.ipcs:
        values += list(pf.ipc_ac_pq[c.name])
    for l in topology.loads:
        values += list(pf.load_pq[l.name])
    for t in topology.thevenins:
        values += list(pf.thevenin_pq[t.name])
    by_name = {iq.ipc: iq for iq in internals}
    for c in topology.ipcs:
        values += by_name[c.name].as_row()
    names = feature_names(topology)
    if len(names) != len(values):
        raise AssertionError("feature registry out of sync")
    return names, np.asarray(values, dtype=float)
