"""Small-signal model assembly and the exact stability pipeline.

For one converged operating state the system is written as a semi-explicit
DAE: differential states x (controller states, DC capacitor voltages, DC
branch currents) and algebraic variables v (rectangular AC bus voltages),
driven by inputs u (power disturbances at every bus).  Linearization is done
numerically: central finite differences of the residuals around the
equilibrium, then elimination of the algebraic network equations

    A = f_x - f_v g_v^{-1} g_x,     B = f_u - f_v g_v^{-1} g_u.

Component models (all injections current-positive into the bus):

* Thevenin source: fixed EMF 1∠0 behind its impedance; one measurement lag
  on its injected power feeding a governor droop read-out (the EMF itself
  never moves — the external grid is stiff).
* AC_GFM converter: EMF E∠δ behind the arm impedance; δ driven by P-f droop
  on filtered power, E by a voltage-magnitude integrator.
* DC_GFM converter: first-order power loop tracking the DC droop command,
  AC side injecting that power (plus frozen equilibrium loss) at constant Q.
* GFL converter: second-order PLL plus d/q current-command lags; commands
  regulate P and Q at the measured terminal voltage.
* Generators and loads: constant-power injections (converter-interfaced
  units with fast inner loops abstracted away).
* DC side: capacitor dynamics per bus, series R-L dynamics per branch.

Converter AC/DC coupling conserves instantaneous power with the conversion
loss frozen at its equilibrium value; the loss sensitivity to the operating
point is second-order and keeping it constant leaves the equilibrium exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .grid import (
    CCRC,
    ControlRole,
    GridTopology,
    OMEGA_BASE,
    is_feasible,
)
from .powerflow import K_DROOP, PowerFlowSolution, V_DC0

# controller constants (per-unit, seconds)
TAU_GOV = 0.5          # thevenin power-measurement lag
R_GOV = 0.05           # thevenin governor droop
M_P = 0.02             # AC_GFM P-f droop slope
TAU_PF = 0.02          # AC_GFM droop power filter
TAU_V = 0.02           # AC_GFM voltage integrator
TAU_DCP = 0.05         # DC_GFM power loop lag
TAU_I = 0.005          # GFL current-command lag
PLL_ZETA = 0.7
PLL_OMEGA_N = 2.0 * math.pi * 10.0
PLL_KP = 2.0 * PLL_ZETA * PLL_OMEGA_N / OMEGA_BASE
PLL_KI = PLL_OMEGA_N ** 2 / OMEGA_BASE

STABILITY_MARGIN = 1e-9   # |max Re| below this counts as not stable


class AssemblyError(RuntimeError):
    pass


class IndicatorUndefinedError(ValueError):
    """Indicator requested for a model that is not strictly stable."""


class NonzeroFeedthroughError(ValueError):
    """H2 norm requested for a channel with direct feedthrough."""


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateSpaceModel:
    """Linear model dx = A x + B u, y = C x + D u around one equilibrium."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    states: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    output_sets: Mapping[str, tuple[str, ...]]
    pinned_states: tuple[str, ...] = ()

    def __post_init__(self):
        n, m, p = len(self.states), len(self.inputs), len(self.outputs)
        if self.A.shape != (n, n) or self.B.shape != (n, m):
            raise ValueError("A/B dimensions inconsistent with registries")
        if self.C.shape != (p, n) or self.D.shape != (p, m):
            raise ValueError("C/D dimensions inconsistent with registries")
        for reg in (self.states, self.inputs, self.outputs):
            if len(set(reg)) != len(reg):
                raise ValueError("registry names must be unique")
        covered = [o for names in self.output_sets.values() for o in names]
        if sorted(covered) != sorted(self.outputs):
            raise ValueError("output_sets must partition the outputs")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def output_rows(self, selector: str) -> tuple[np.ndarray, np.ndarray]:
        """(C_sel, D_sel) for one output set ("f" or "V_DC")."""
        try:
            names = self.output_sets[selector]
        except KeyError:
            raise KeyError(f"unknown output set {selector!r}; "
                           f"have {sorted(self.output_sets)}") from None
        rows = [self.outputs.index(o) for o in names]
        return self.C[rows], self.D[rows]

    def input_index(self, channel) -> int:
        if isinstance(channel, str):
            return self.inputs.index(channel)
        return int(channel)


@dataclass(frozen=True)
class StabilityLabel:
    label: int
    abscissa: float
    eigenvalues: np.ndarray

    def __bool__(self) -> bool:
        return bool(self.label)


@dataclass(frozen=True)
class IndicatorSet:
    upsilon: int
    h2_f: float | None = None
    h2_vdc: float | None = None
    k_f: float | None = None
    k_vdc: float | None = None

    NAMES = ("h2_f", "h2_vdc", "k_f", "k_vdc")

    def values(self) -> tuple[float | None, ...]:
        return (self.h2_f, self.h2_vdc, self.k_f, self.k_vdc)

    def to_dict(self) -> dict:
        return {"upsilon": self.upsilon,
                **{n: getattr(self, n) for n in self.NAMES}}


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

class _Assembly:
    """Nonlinear residuals and equilibrium for one (topology, ccrc, pf)."""

    def __init__(self, topology: GridTopology, ccrc: CCRC, pf: PowerFlowSolution):
        self.top = topology
        self.ccrc = ccrc
        ac_names = [b.name for b in topology.ac_buses]
        dc_names = [b.name for b in topology.dc_buses]
        self.ac_idx = {n: i for i, n in enumerate(ac_names)}
        self.dc_idx = {n: i for i, n in enumerate(dc_names)}
        self.n_ac, self.n_dc = len(ac_names), len(dc_names)

        Y = np.zeros((self.n_ac, self.n_ac), complex)
        for br in topology.branches:
            if br.from_bus in self.ac_idx:
                i, j = self.ac_idx[br.from_bus], self.ac_idx[br.to_bus]
                y = 1.0 / complex(br.r, br.x)
                Y[i, i] += y
                Y[j, j] += y
                Y[i, j] -= y
                Y[j, i] -= y
        self.Y = Y

        # constant-power devices folded per bus
        s_static = np.zeros(self.n_ac, complex)
        for g in topology.generators:
            s_static[self.ac_idx[g.bus]] += complex(*pf.gen_pq[g.name])
        for l in topology.loads:
            s_static[self.ac_idx[l.bus]] -= complex(*pf.load_pq[l.name])
        self.s_static = s_static

        self.thev = [(self.ac_idx[t.bus], t.impedance_system_pu(), t.name)
                     for t in topology.thevenins]

        self.caps = np.array([b.capacitance for b in topology.dc_buses])
        bad = [b.name for b, c in zip(topology.dc_buses, self.caps) if c <= 0]
        if bad:
            raise AssemblyError(f"DC buses without capacitance: {bad}")

        self.dc_branches = []
        for br in topology.branches:
            if br.from_bus in self.dc_idx:
                if br.l <= 0:
                    raise AssemblyError(f"DC branch {br.name} needs l > 0")
                self.dc_branches.append((self.dc_idx[br.from_bus],
                                         self.dc_idx[br.to_bus],
                                         br.r, br.l / OMEGA_BASE, br.name))

        # state registry
        names: list[str] = []
        x0: list[float] = []
        for t in topology.thevenins:
            names.append(f"thev_{t.name}_pmeas")
            x0.append(pf.thevenin_pq[t.name][0])

        self.ipc_blocks = []
        for pos, c in enumerate(topology.ipcs):
            role = ccrc.roles[pos]
            ia, idc = self.ac_idx[c.ac_bus], self.dc_idx[c.dc_bus]
            v_eq = pf.ac_voltage[c.ac_bus]
            p0, q0 = pf.ipc_ac_pq[c.name]
            pdc0 = pf.ipc_dc_p[c.name]
            loss0 = -(p0 + pdc0)
            s0 = len(names)
            if abs(v_eq) < 0.1:
                raise AssemblyError(f"IPC {c.name}: collapsed terminal voltage")
            blk = {"name": c.name, "role": role, "ia": ia, "idc": idc,
                   "s0": s0, "loss0": loss0, "q0": q0,
                   "z_arm": complex(c.r_arm, c.l_arm), "r_arm": c.r_arm,
                   "ac_subgrid": topology.bus_map[c.ac_bus].subgrid}
            if role == ControlRole.AC_GFM:
                i_eq = np.conj(complex(p0, q0) / v_eq) if (p0 or q0) else 0j
                e_ph = v_eq + blk["z_arm"] * i_eq
                names += [f"ipc_{c.name}_delta", f"ipc_{c.name}_pfilt",
                          f"ipc_{c.name}_emag"]
                x0 += [math.atan2(e_ph.imag, e_ph.real), p0, abs(e_ph)]
                blk["p_star"] = p0
                blk["v_ref"] = abs(v_eq)
            elif role == ControlRole.DC_GFM:
                names.append(f"ipc_{c.name}_pdc")
                x0.append(pdc0)
                blk["p_star_dc"] = pf.schedules[c.name].p_dc_ref
            else:
                names += [f"ipc_{c.name}_pll_delta", f"ipc_{c.name}_pll_int",
                          f"ipc_{c.name}_id", f"ipc_{c.name}_iq"]
                v0 = abs(v_eq)
                x0 += [math.atan2(v_eq.imag, v_eq.real), 0.0,
                       p0 / v0, -q0 / v0]
                blk["p0"] = p0
                blk["v0"] = v0
            self.ipc_blocks.append(blk)

        self.ix_vdc = len(names)
        for b in topology.dc_buses:
            names.append(f"vdc_{b.name}")
            x0.append(pf.dc_voltage[b.name])
        self.ix_ibr = len(names)
        for i, j, r, _, brname in self.dc_branches:
            names.append(f"idc_{brname}")
            vi = pf.dc_voltage[dc_names[i]]
            vj = pf.dc_voltage[dc_names[j]]
            x0.append((vi - vj) / r)

        self.state_names = tuple(names)
        self.x0 = np.array(x0)
        self.n_x = len(names)

        # input registry: (dP, dQ) per AC bus, dP per DC bus
        in_names: list[str] = []
        self.iu_p_ac = []
        self.iu_q_ac = []
        for b in topology.ac_buses:
            self.iu_p_ac.append(len(in_names))
            in_names.append(f"dp_{b.name}")
            self.iu_q_ac.append(len(in_names))
            in_names.append(f"dq_{b.name}")
        self.iu_p_dc = []
        for b in topology.dc_buses:
            self.iu_p_dc.append(len(in_names))
            in_names.append(f"dp_{b.name}")
        self.input_names = tuple(in_names)
        self.n_u = len(in_names)

        v_eq_arr = np.array([pf.ac_voltage[n] for n in ac_names])
        self.v0 = np.concatenate([v_eq_arr.real, v_eq_arr.imag])
        self.n_v = 2 * self.n_ac

    # -- nonlinear residuals, batched over trailing axis --------------------
    def residuals(self, x: np.ndarray, v: np.ndarray, u: np.ndarray):
        V = v[:self.n_ac] + 1j * v[self.n_ac:]
        f = np.zeros_like(x)
        inj = np.conj((self.s_static[:, None]
                       + u[self.iu_p_ac] + 1j * u[self.iu_q_ac]) / V)

        k = 0
        for i, z, _ in self.thev:
            i_t = (1.0 - V[i]) / z
            inj[i] += i_t
            p_t = (V[i] * np.conj(i_t)).real
            f[k] = (p_t - x[k]) / TAU_GOV
            k += 1

        vdc = x[self.ix_vdc:self.ix_vdc + self.n_dc]
        dc_cur = u[self.iu_p_dc] / vdc

        for blk in self.ipc_blocks:
            ia, idc, s0 = blk["ia"], blk["idc"], blk["s0"]
            role = blk["role"]
            if role == ControlRole.AC_GFM:
                delta, pfilt, emag = x[s0], x[s0 + 1], x[s0 + 2]
                e_ph = emag * np.exp(1j * delta)
                i_c = (e_ph - V[ia]) / blk["z_arm"]
                inj[ia] += i_c
                p_e = (V[ia] * np.conj(i_c)).real
                f[s0] = OMEGA_BASE * (-M_P * (pfilt - blk["p_star"]))
                f[s0 + 1] = (p_e - pfilt) / TAU_PF
                f[s0 + 2] = (blk["v_ref"] - np.abs(V[ia])) / TAU_V
                dc_cur[idc] += -(p_e + blk["loss0"]) / vdc[idc]
            elif role == ControlRole.DC_GFM:
                p = x[s0]
                p_cmd = blk["p_star_dc"] + (V_DC0 - vdc[idc]) / K_DROOP
                f[s0] = (p_cmd - p) / TAU_DCP
                dc_cur[idc] += p / vdc[idc]
                s_ac = -(p + blk["loss0"]) + 1j * blk["q0"]
                inj[ia] += np.conj(s_ac / V[ia])
            else:  # GFL
                delta, xi = x[s0], x[s0 + 1]
                i_d, i_q = x[s0 + 2], x[s0 + 3]
                eps = (V[ia] * np.exp(-1j * delta)).imag / blk["v0"]
                f[s0] = OMEGA_BASE * (PLL_KP * eps + xi)
                f[s0 + 1] = PLL_KI * eps
                vmag = np.abs(V[ia])
                f[s0 + 2] = (blk["p0"] / vmag - i_d) / TAU_I
                f[s0 + 3] = (-blk["q0"] / vmag - i_q) / TAU_I
                i_c = (i_d + 1j * i_q) * np.exp(1j * delta)
                inj[ia] += i_c
                p_ac = (V[ia] * np.conj(i_c)).real
                dc_cur[idc] += -(p_ac + blk["loss0"]) / vdc[idc]

        for b, (i, j, r, l_sec, _) in enumerate(self.dc_branches):
            i_br = x[self.ix_ibr + b]
            dc_cur[i] -= i_br
            dc_cur[j] += i_br
            f[self.ix_ibr + b] = (vdc[i] - vdc[j] - r * i_br) / l_sec

        f[self.ix_vdc:self.ix_vdc + self.n_dc] = dc_cur / self.caps[:, None]

        mis = inj - self.Y @ V
        g = np.concatenate([mis.real, mis.imag])
        return f, g

    def residual_names(self) -> list[str]:
        names = list(self.state_names)
        ac_names = [b.name for b in self.top.ac_buses]
        names += [f"kcl_re_{n}" for n in ac_names]
        names += [f"kcl_im_{n}" for n in ac_names]
        return names


def assemble_state_space(topology: GridTopology, ccrc: CCRC,
                         pf: PowerFlowSolution, *,
                         pin_reference_frames: bool = True) -> StateSpaceModel:
    """Linearize the DAE at the power-flow equilibrium and reduce it.

    Raises :class:`AssemblyError` when the equilibrium residual exceeds
    1e-6 or the algebraic network block of a subgrid is singular.
    """
    if not is_feasible(topology, ccrc):
        raise AssemblyError(f"CCRC {ccrc.id} violates the forming rules")
    asm = _Assembly(topology, ccrc, pf)

    z0 = np.concatenate([asm.x0, asm.v0, np.zeros(asm.n_u)])
    n_x, n_v, n_u = asm.n_x, asm.n_v, asm.n_u

    def stacked(z):
        f, g = asm.residuals(z[:n_x], z[n_x:n_x + n_v], z[n_x + n_v:])
        return np.concatenate([f, g])

    r0 = stacked(z0[:, None])[:, 0]
    worst = int(np.argmax(np.abs(r0)))
    if abs(r0[worst]) > 1e-6:
        raise AssemblyError(
            f"equilibrium residual {r0[worst]:.3e} in {asm.residual_names()[worst]}")

    n_z = z0.size
    h = 1e-6 * np.maximum(1.0, np.abs(z0))
    Z = np.concatenate([z0[:, None] + np.diag(h), z0[:, None] - np.diag(h)], axis=1)
    R = stacked(Z)
    J = (R[:, :n_z] - R[:, n_z:]) / (2.0 * h[None, :])

    f_x, f_v, f_u = J[:n_x, :n_x], J[:n_x, n_x:n_x + n_v], J[:n_x, n_x + n_v:]
    g_x, g_v, g_u = J[n_x:, :n_x], J[n_x:, n_x:n_x + n_v], J[n_x:, n_x + n_v:]

    # the algebraic block is block-diagonal over AC subgrids; solve blockwise
    # so a singularity names its subgrid
    X = np.zeros((n_v, n_x))
    Xu = np.zeros((n_v, n_u))
    for sg in topology.ac_subgrids:
        bus_ids = [asm.ac_idx[b.name] for b in sg.buses]
        idx = bus_ids + [asm.n_ac + i for i in bus_ids]
        blk = g_v[np.ix_(idx, idx)]
        rhs = np.concatenate([g_x[idx], g_u[idx]], axis=1)
        try:
            sol = np.linalg.solve(blk, rhs)
        except np.linalg.LinAlgError:
            raise AssemblyError(
                f"singular algebraic network reduction in AC subgrid {sg.name}"
            ) from None
        X[idx] = sol[:, :n_x]
        Xu[idx] = sol[:, n_x:]

    A = f_x - f_v @ X
    B = f_u - f_v @ Xu

    # outputs: one frequency per AC subgrid, one voltage per DC bus
    out_names: list[str] = []
    C_rows: list[np.ndarray] = []
    state_index = {n: i for i, n in enumerate(asm.state_names)}
    freq_names: list[str] = []
    for sg in topology.ac_subgrids:
        row = np.zeros(n_x)
        gfm = [blk for blk in asm.ipc_blocks
               if blk["role"] == ControlRole.AC_GFM
               and blk["ac_subgrid"] == sg.name]
        if gfm:
            for blk in gfm:
                row[state_index[f"ipc_{blk['name']}_pfilt"]] = -M_P / len(gfm)
        else:
            thevs = topology.thevenins_on(sg.name)
            if not thevs:
                raise AssemblyError(f"subgrid {sg.name} has no frequency source")
            row[state_index[f"thev_{thevs[0].name}_pmeas"]] = -R_GOV
        out_names.append(f"freq_{sg.name}")
        freq_names.append(f"freq_{sg.name}")
        C_rows.append(row)
    vdc_names: list[str] = []
    for b in topology.dc_buses:
        row = np.zeros(n_x)
        row[state_index[f"vdc_{b.name}"]] = 1.0
        out_names.append(f"vdc_{b.name}")
        vdc_names.append(f"vdc_{b.name}")
        C_rows.append(row)
    C = np.vstack(C_rows)
    D = np.zeros((len(out_names), n_u))

    # a subgrid without a stiff source has an arbitrary absolute angle: fix
    # the frame by removing the reference GFM angle state (exact zero mode)
    pinned: list[str] = []
    keep = np.ones(n_x, bool)
    if pin_reference_frames:
        for sg in topology.ac_subgrids:
            if topology.forming_units_on(sg.name):
                continue
            for blk in asm.ipc_blocks:
                if (blk["role"] == ControlRole.AC_GFM
                        and blk["ac_subgrid"] == sg.name):
                    name = f"ipc_{blk['name']}_delta"
                    keep[state_index[name]] = False
                    pinned.append(name)
                    break

    states = tuple(n for n, k in zip(asm.state_names, keep) if k)
    return StateSpaceModel(
        A=A[np.ix_(keep, keep)],
        B=B[keep],
        C=C[:, keep],
        D=D,
        states=states,
        inputs=asm.input_names,
        outputs=tuple(out_names),
        output_sets={"f": tuple(freq_names), "V_DC": tuple(vdc_names)},
        pinned_states=tuple(pinned),
    )


# ---------------------------------------------------------------------------
# stability and indicators
# ---------------------------------------------------------------------------

def assess_stability(ss: StateSpaceModel) -> StabilityLabel:
    """Exact label: 1 iff every eigenvalue has strictly negative real part."""
    eig = np.linalg.eigvals(ss.A)
    eig = eig[np.argsort(-eig.real)]
    abscissa = float(eig[0].real) if eig.size else -math.inf
    label = int(abscissa < -STABILITY_MARGIN)
    return StabilityLabel(label=label, abscissa=abscissa, eigenvalues=eig)


def h2_norm(ss: StateSpaceModel, outputs: str) -> float:
    """sqrt(trace(B' Q B)) with A'Q + QA + C'C = 0 for one output set."""
    label = assess_stability(ss)
    if not label:
        raise IndicatorUndefinedError(
            f"H2 undefined: spectral abscissa {label.abscissa:.3e}")
    C_sel, D_sel = ss.output_rows(outputs)
    if np.any(D_sel != 0.0):
        raise NonzeroFeedthroughError("direct feedthrough makes the H2 norm infinite")
    W = C_sel.T @ C_sel
    Q = scipy.linalg.solve_continuous_lyapunov(ss.A.T, -W)
    Q = 0.5 * (Q + Q.T)
    res = ss.A.T @ Q + Q @ ss.A + W
    # backward-error scale: near-marginal modes make |Q| large and an
    # absolute bound would reject perfectly good solves
    scale = max(1.0, float(np.max(np.abs(W))),
                float(np.max(np.abs(ss.A)) * np.max(np.abs(Q))))
    if np.max(np.abs(res)) > 1e-9 * scale:
        raise RuntimeError(f"Lyapunov residual {np.max(np.abs(res)):.3e} too large")
    tr = float(np.trace(ss.B.T @ Q @ ss.B))
    return math.sqrt(max(tr, 0.0))


def dc_gain(ss: StateSpaceModel, outputs: str) -> float:
    """max |entry| of K = D_sel - C_sel A^{-1} B over all channel pairs."""
    label = assess_stability(ss)
    if not label:
        raise IndicatorUndefinedError(
            f"dc gain undefined: spectral abscissa {label.abscissa:.3e}")
    C_sel, D_sel = ss.output_rows(outputs)
    K = D_sel - C_sel @ np.linalg.solve(ss.A, ss.B)
    return float(np.max(np.abs(K)))


def dc_gain_matrix(ss: StateSpaceModel, outputs: str) -> np.ndarray:
    C_sel, D_sel = ss.output_rows(outputs)
    return D_sel - C_sel @ np.linalg.solve(ss.A, ss.B)


def step_response(ss: StateSpaceModel, input: str | int, horizon: float,
                  dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit-step response of all outputs; exact zero-order-hold integration.

    Returns (t, Y) with Y of shape (n_outputs, len(t)).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    j = ss.input_index(input)
    n = ss.n_states
    # exact discretization of [A b; 0 0] covers singular A as well
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = ss.A * dt
    M[:n, n] = ss.B[:, j] * dt
    E = scipy.linalg.expm(M)
    Ad, bd = E[:n, :n], E[:n, n]
    steps = int(round(horizon / dt))
    x = np.zeros(n)
    t = np.arange(steps + 1) * dt
    Y = np.empty((len(ss.outputs), steps + 1))
    d_col = ss.D[:, j]
    for k in range(steps + 1):
        Y[:, k] = ss.C @ x + d_col
        if k < steps:
            x = Ad @ x + bd
    return t, Y


def indicators(ss: StateSpaceModel) -> IndicatorSet:
    """All four indicators when stable, empty set with the label otherwise."""
    label = assess_stability(ss)
    if not label:
        return IndicatorSet(upsilon=0)
    return IndicatorSet(
        upsilon=1,
        h2_f=h2_norm(ss, "f"),
        h2_vdc=h2_norm(ss, "V_DC"),
        k_f=dc_gain(ss, "f"),
        k_vdc=dc_gain(ss, "V_DC"),
    )
