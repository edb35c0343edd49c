"""Single-particle lithium-ion cell model with SEI film growth.

This is the ground-truth plant for the station simulator and the training
data source for the hour-step surrogate. Each electrode is one representative
spherical particle; the slow states are the two average lithium concentrations
plus the film thickness and the cumulative capacity fade. Everything else
(surface concentrations, currents, potentials) is algebraic and is re-solved
at every integrator substep.

Sign conventions: applied power is positive when the cell discharges to the
grid, negative when charging, and the terminal power balance is written as
P = (phi_n - phi_p) * i, so the total current i is negative during discharge.
The side-reaction current i_SEI is always >= 0; film thickness and capacity
fade are non-decreasing along every trajectory.

All currents in this module are cell-level amperes (current density times the
plate area) and powers are cell-level watts. Pack-level kW conversions live
with the pack description, see :class:`PackSpec`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class NoConvergence(RuntimeError):
    """The algebraic layer (or an implicit substep) failed to converge.

    For the algebraic solve this signals an infeasible power demand at the
    current state; the caller should reduce |P|.
    """


class StateOutOfBounds(ValueError):
    """A concentration left [0, C_max] during integration."""


class DomainError(ValueError):
    """An algebraic quantity left its physical domain (e.g. theta outside (0,1))."""


EXP_CLAMP = 50.0  # bound on exponential arguments; converged solutions sit well inside


class SpmState(NamedTuple):
    """Slow cell states: average concentrations (mol/m^3), film (m), fade (Ah)."""

    C_p_avg: float
    C_n_avg: float
    delta_SEI: float
    c_f: float


class SpmAlgebraics(NamedTuple):
    """Consistent algebraic solution at one (state, power) point.

    Currents are cell amperes; potentials in volts; theta_j are the surface
    stoichiometries C_j_surf / C_j_max.
    """

    C_p_surf: float
    C_n_surf: float
    i: float
    i_int: float
    i_SEI: float
    phi_p: float
    phi_n: float
    theta_p: float
    theta_n: float
    U_p: float
    U_n: float


@dataclass(frozen=True)
class PowerCommand:
    """Pack-level power setpoint: positive discharges to the grid."""

    p_kw: float
    duration_h: float = 1.0


@dataclass(frozen=True)
class SpmParams:
    """Cell constants. Units follow the parameter file comments."""

    D_p: float
    D_n: float
    R_p: float
    R_n: float
    a_p: float
    a_n: float
    l_p: float
    l_n: float
    k_p: float
    k_n: float
    C_e: float
    kappa_SEI: float
    k_SEI: float
    T: float
    rho_SEI: float
    M_SEI: float
    U_ref: float
    C_p_max: float
    C_n_max: float
    area: float
    theta_p0: float
    delta0: float
    ocv_p_const: float
    ocv_p_exp_terms: tuple
    ocv_n_const: float
    ocv_n_exp_coef: float
    ocv_n_exp_rate: float
    ocv_n_tanh_terms: tuple
    F: float = 96485.0
    Rg: float = 8.314

    def __post_init__(self):
        positive = (
            "D_p D_n R_p R_n a_p a_n l_p l_n k_p k_n C_e kappa_SEI k_SEI T "
            "rho_SEI M_SEI U_ref C_p_max C_n_max area delta0"
        )
        for name in positive.split():
            if getattr(self, name) <= 0.0:
                raise ValueError(f"parameter {name} must be strictly positive")

    # -- derived geometry (cached; instances are frozen) -------------------

    @cached_property
    def act_area_p(self) -> float:
        """Total active surface area of the positive electrode (m^2)."""
        return self.a_p * self.l_p * self.area

    @cached_property
    def act_area_n(self) -> float:
        return self.a_n * self.l_n * self.area

    @cached_property
    def eps_p(self) -> float:
        return self.a_p * self.R_p / 3.0

    @cached_property
    def eps_n(self) -> float:
        return self.a_n * self.R_n / 3.0

    @cached_property
    def capacity_ah(self) -> float:
        """Charge to sweep the full anode window 0 -> C_n_max (Ah)."""
        return self.F * self.eps_n * self.l_n * self.C_n_max * self.area / 3600.0

    @cached_property
    def i_1c(self) -> float:
        """Current that sweeps the anode window in one hour (A)."""
        return self.capacity_ah

    @cached_property
    def lithium_ratio(self) -> float:
        """mol of cathode concentration released per mol of anode concentration stored."""
        return (self.eps_n * self.l_n) / (self.eps_p * self.l_p)

    @cached_property
    def flux_coef_p(self) -> float:
        """Surface-offset per ampere at the positive electrode (mol/m^3/A)."""
        return (self.R_p / 5.0) / (self.F * self.D_p * self.a_p * self.l_p * self.area)

    @cached_property
    def flux_coef_n(self) -> float:
        return (self.R_n / 5.0) / (self.F * self.D_n * self.a_n * self.l_n * self.area)


@dataclass(frozen=True)
class PackSpec:
    """Series x parallel pack wrapper around the representative cell."""

    cells: int
    cell_p1c_w: float
    power_limit_c: float

    @property
    def p1c_kw(self) -> float:
        return self.cells * self.cell_p1c_w / 1000.0

    @property
    def power_limit_kw(self) -> float:
        return self.power_limit_c * self.p1c_kw

    def to_cell_w(self, p_kw: float) -> float:
        return p_kw * 1000.0 / self.cells

    def to_pack_kw(self, p_w: float) -> float:
        return p_w * self.cells / 1000.0


def load_params(path: str | Path) -> tuple[SpmParams, PackSpec]:
    """Read a cell/pack parameter file (TOML)."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    cell, sei, ocv, pack = raw["cell"], raw["sei"], raw["ocv"], raw["pack"]
    params = SpmParams(
        D_p=cell["D_p"], D_n=cell["D_n"], R_p=cell["R_p"], R_n=cell["R_n"],
        a_p=cell["a_p"], a_n=cell["a_n"], l_p=cell["l_p"], l_n=cell["l_n"],
        k_p=cell["k_p"], k_n=cell["k_n"], C_e=cell["C_e"], T=cell["T"],
        C_p_max=cell["C_p_max"], C_n_max=cell["C_n_max"], area=cell["area"],
        theta_p0=cell["theta_p0"],
        kappa_SEI=sei["kappa_SEI"], k_SEI=sei["k_SEI"], rho_SEI=sei["rho_SEI"],
        M_SEI=sei["M_SEI"], U_ref=sei["U_ref"], delta0=sei["delta0"],
        ocv_p_const=ocv["p_const"],
        ocv_p_exp_terms=tuple(tuple(t) for t in ocv["p_exp_terms"]),
        ocv_n_const=ocv["n_const"],
        ocv_n_exp_coef=ocv["n_exp_coef"],
        ocv_n_exp_rate=ocv["n_exp_rate"],
        ocv_n_tanh_terms=tuple(tuple(t) for t in ocv["n_tanh_terms"]),
    )
    spec = PackSpec(
        cells=int(pack["cells"]),
        cell_p1c_w=pack["cell_p1c_w"],
        power_limit_c=pack["power_limit_c"],
    )
    return params, spec


def default_params_path() -> Path:
    return Path(__file__).resolve().parents[2] / "params" / "anr26650m1.toml"


# ---------------------------------------------------------------------------
# state helpers
# ---------------------------------------------------------------------------


def soc(state: SpmState, params: SpmParams) -> float:
    """State of charge: anode average concentration over its maximum."""
    return state.C_n_avg / params.C_n_max


def state_at_soc(
    params: SpmParams,
    target_soc: float,
    delta_sei: float | None = None,
    c_f: float = 0.0,
) -> SpmState:
    """Fresh-cell state at a given SOC, on the unaged lithium-balance line.

    The cathode concentration is set so that total cyclable lithium equals the
    fresh inventory: theta_p runs from theta_p0 (anode empty) down as the
    anode fills.
    """
    if not 0.0 <= target_soc <= 1.0:
        raise ValueError("soc must lie in [0, 1]")
    c_n = target_soc * params.C_n_max
    c_p = params.theta_p0 * params.C_p_max - params.lithium_ratio * c_n
    return SpmState(
        C_p_avg=c_p,
        C_n_avg=c_n,
        delta_SEI=params.delta0 if delta_sei is None else delta_sei,
        c_f=c_f,
    )


def reset_soc(state: SpmState, params: SpmParams, new_soc: float) -> SpmState:
    """Move a cell along its own lithium-balance line to a new SOC.

    Used when a swapped-out unit comes back from a vehicle: EV usage shuttles
    lithium between electrodes without side reactions, so the cell's total
    inventory (and its degradation states) are preserved exactly.
    """
    c_n_new = new_soc * params.C_n_max
    c_p_new = state.C_p_avg + params.lithium_ratio * (state.C_n_avg - c_n_new)
    return SpmState(c_p_new, c_n_new, state.delta_SEI, state.c_f)


# ---------------------------------------------------------------------------
# open-circuit potentials
# ---------------------------------------------------------------------------


def ocv(theta: float, electrode: str, params: SpmParams) -> float:
    """Open-circuit potential of one electrode at surface stoichiometry theta.

    Both fits are strictly decreasing in theta over (0, 1).
    """
    if not 0.0 < theta < 1.0:
        raise DomainError(f"theta={theta} outside (0, 1)")
    if electrode == "p":
        u = 1.0 - theta
        val = params.ocv_p_const
        for coef, rate, power in params.ocv_p_exp_terms:
            val += coef * math.exp(rate * u**power)
        return val
    if electrode == "n":
        val = params.ocv_n_const + params.ocv_n_exp_coef * math.exp(
            -params.ocv_n_exp_rate * theta
        )
        for coef, center, width in params.ocv_n_tanh_terms:
            val += coef * math.tanh((theta - center) / width)
        return val
    raise ValueError("electrode must be 'p' or 'n'")


def cell_ocv(state: SpmState, params: SpmParams) -> float:
    """Rest voltage U_p(theta_p) - U_n(theta_n) at the average concentrations."""
    return ocv(state.C_p_avg / params.C_p_max, "p", params) - ocv(
        state.C_n_avg / params.C_n_max, "n", params
    )


# ---------------------------------------------------------------------------
# algebraic layer
# ---------------------------------------------------------------------------


def _clamped_exp(arg: float) -> float:
    return math.exp(max(-EXP_CLAMP, min(EXP_CLAMP, arg)))


def _surface_concentrations(
    state: SpmState, i: float, i_int: float, params: SpmParams
) -> tuple[float, float]:
    """Surface concentrations from the particle flux-balance closures.

    Note the asymmetry: the positive electrode offset is driven by the total
    current, the negative one by the intercalation current only.
    """
    c_p_surf = state.C_p_avg - params.flux_coef_p * i
    c_n_surf = state.C_n_avg + params.flux_coef_n * i_int
    return c_p_surf, c_n_surf


def _sei_current(state: SpmState, phi_n: float, i: float, params: SpmParams) -> float:
    """Side-reaction current (A), including the ohmic drop across the film."""
    film = (state.delta_SEI / params.kappa_SEI) * i / params.act_area_n
    arg = -(params.F / (params.Rg * params.T)) * (phi_n - params.U_ref + film)
    return params.act_area_n * params.k_SEI * _clamped_exp(arg)


def _sei_current_scale(params: SpmParams) -> float:
    # value at phi_n = 0 with no film drop: an upper bound over the physical range
    return params.act_area_n * params.k_SEI * _clamped_exp(
        params.F * params.U_ref / (params.Rg * params.T)
    )


def algebraic_residual(
    state: SpmState, alg: SpmAlgebraics, p_w: float, params: SpmParams
) -> np.ndarray:
    """Scaled residuals of the seven algebraic closures at (state, alg, P).

    Components (each nondimensionalized by a characteristic magnitude so a
    Newton convergence test is scale-free):

      0  positive-electrode surface flux balance      / C_p_max
      1  negative-electrode surface flux balance      / C_n_max
      2  positive Butler-Volmer flux                  / 1C flux
      3  negative Butler-Volmer flux                  / 1C flux
      4  side-reaction current closure                / max physical i_SEI
      5  current balance  i - i_int - i_SEI           / 1C current
      6  terminal power balance P - (phi_n-phi_p)*i   / max(|P|, 1C power)

    The zero locus of this vector defines the consistent algebraic solution.
    """
    F, Rg, T = params.F, params.Rg, params.T
    if not (0.0 < alg.C_p_surf < params.C_p_max):
        raise DomainError("C_p_surf outside (0, C_p_max)")
    if not (0.0 < alg.C_n_surf < params.C_n_max):
        raise DomainError("C_n_surf outside (0, C_n_max)")

    theta_p = alg.C_p_surf / params.C_p_max
    theta_n = alg.C_n_surf / params.C_n_max
    u_p = ocv(theta_p, "p", params)
    u_n = ocv(theta_n, "n", params)

    c_p_surf, c_n_surf = _surface_concentrations(state, alg.i, alg.i_int, params)
    r_flux_p = (alg.C_p_surf - c_p_surf) / params.C_p_max
    r_flux_n = (alg.C_n_surf - c_n_surf) / params.C_n_max

    flux_1c_p = params.i_1c / (F * params.act_area_p)
    flux_1c_n = params.i_1c / (F * params.act_area_n)

    ex_p = 2.0 * params.k_p * math.sqrt(params.C_e) * math.sqrt(
        params.C_p_max - alg.C_p_surf
    ) * math.sqrt(alg.C_p_surf)
    arg_p = 0.5 * F * (alg.phi_p - u_p) / (Rg * T)
    r_bv_p = (
        alg.i / (F * params.act_area_p)
        - ex_p * math.sinh(max(-EXP_CLAMP, min(EXP_CLAMP, arg_p)))
    ) / flux_1c_p

    film = (state.delta_SEI / params.kappa_SEI) * alg.i / params.act_area_n
    ex_n = 2.0 * params.k_n * math.sqrt(params.C_e) * math.sqrt(
        params.C_n_max - alg.C_n_surf
    ) * math.sqrt(alg.C_n_surf)
    arg_n = 0.5 * (F / (Rg * T)) * (alg.phi_n - u_n + film)
    r_bv_n = (
        -alg.i_int / (F * params.act_area_n)
        - ex_n * math.sinh(max(-EXP_CLAMP, min(EXP_CLAMP, arg_n)))
    ) / flux_1c_n

    r_sei = (alg.i_SEI - _sei_current(state, alg.phi_n, alg.i, params)) / _sei_current_scale(
        params
    )
    r_balance = (alg.i - alg.i_int - alg.i_SEI) / params.i_1c
    p_scale = max(abs(p_w), params.i_1c * 3.3)
    r_power = (p_w - (alg.phi_n - alg.phi_p) * alg.i) / p_scale

    return np.array([r_flux_p, r_flux_n, r_bv_p, r_bv_n, r_sei, r_balance, r_power])


def _assemble(state: SpmState, i: float, i_int: float, params: SpmParams):
    """Explicit closure: from (i, i_int) to the full algebraic vector.

    Butler-Volmer is inverted through asinh, which is exact and cannot
    overflow, and the side-reaction exponential argument stays within a
    clamped range. Returns None if a surface concentration leaves its domain.
    """
    F, Rg, T = params.F, params.Rg, params.T
    c_p_surf, c_n_surf = _surface_concentrations(state, i, i_int, params)
    if not (0.0 < c_p_surf < params.C_p_max and 0.0 < c_n_surf < params.C_n_max):
        return None
    theta_p = c_p_surf / params.C_p_max
    theta_n = c_n_surf / params.C_n_max
    u_p = ocv(theta_p, "p", params)
    u_n = ocv(theta_n, "n", params)

    ex_p = 2.0 * params.k_p * math.sqrt(params.C_e) * math.sqrt(
        params.C_p_max - c_p_surf
    ) * math.sqrt(c_p_surf)
    phi_p = u_p + (2.0 * Rg * T / F) * math.asinh(
        i / (F * params.act_area_p) / ex_p
    )

    film = (state.delta_SEI / params.kappa_SEI) * i / params.act_area_n
    ex_n = 2.0 * params.k_n * math.sqrt(params.C_e) * math.sqrt(
        params.C_n_max - c_n_surf
    ) * math.sqrt(c_n_surf)
    phi_n = u_n - film + (2.0 * Rg * T / F) * math.asinh(
        -i_int / (F * params.act_area_n) / ex_n
    )

    i_sei = _sei_current(state, phi_n, i, params)
    return SpmAlgebraics(
        C_p_surf=c_p_surf, C_n_surf=c_n_surf, i=i, i_int=i_int, i_SEI=i_sei,
        phi_p=phi_p, phi_n=phi_n, theta_p=theta_p, theta_n=theta_n,
        U_p=u_p, U_n=u_n,
    )


def solve_algebraics(
    state: SpmState,
    p_w: float,
    params: SpmParams,
    guess: SpmAlgebraics | None = None,
) -> SpmAlgebraics:
    """Solve the algebraic layer at (state, P) to max scaled residual < 1e-8.

    Internally reduces the seven closures to a damped 2x2 Newton iteration on
    (i, i_int): the surface concentrations, potentials and side-reaction
    current are all explicit given those two. The returned solution is
    back-substituted into :func:`algebraic_residual` as an independent check.

    Raises NoConvergence when no consistent solution exists, which signals an
    infeasible power demand at this state.
    """
    p_scale = max(abs(p_w), params.i_1c * 3.3)
    inv_i1c = 1.0 / params.i_1c
    inv_p = 1.0 / p_scale

    def residual2(i: float, i_int: float):
        alg = _assemble(state, i, i_int, params)
        if alg is None:
            return None, None, None
        g1 = (alg.i - alg.i_int - alg.i_SEI) * inv_i1c
        g2 = (p_w - (alg.phi_n - alg.phi_p) * alg.i) * inv_p
        return g1, g2, alg

    i0 = -p_w / 3.3
    starts = []
    if guess is not None:
        starts.append((guess.i, guess.i_int))
    sei_seed = _sei_current_scale(params) * 1e-3
    starts += [
        (i0, i0),
        (0.5 * i0, 0.5 * i0),
        # rest-like seeds: the intercalation reaction runs slightly backwards
        # to feed the side reaction, which matters at the SOC box edges
        (i0, i0 - sei_seed),
        (0.0, -sei_seed),
    ]
    g1 = g2 = alg = None
    for i, i_int in starts:
        g1, g2, alg = residual2(i, i_int)
        if g1 is not None:
            break
    if g1 is None:
        raise NoConvergence("no admissible starting point")

    tol = 1e-11
    step_i = max(abs(i), params.i_1c) * 1e-7
    jac = None
    jac_fresh = False  # chord strategy: reuse the Jacobian while full steps succeed
    for _ in range(80):
        norm = max(abs(g1), abs(g2))
        if norm < tol:
            break
        if jac is None:
            ga1, ga2, _ = residual2(i + step_i, i_int)
            gb1, gb2, _ = residual2(i, i_int + step_i)
            if ga1 is None or gb1 is None:
                step_i *= 0.1
                if step_i < 1e-16:
                    raise NoConvergence("jacobian stencil left the domain")
                continue
            jac = (
                (ga1 - g1) / step_i, (gb1 - g1) / step_i,
                (ga2 - g2) / step_i, (gb2 - g2) / step_i,
            )
            jac_fresh = True
        j00, j01, j10, j11 = jac
        det = j00 * j11 - j01 * j10
        if det == 0.0 or not math.isfinite(det):
            raise NoConvergence("singular Jacobian in algebraic solve")
        di = -(j11 * g1 - j01 * g2) / det
        dii = -(-j10 * g1 + j00 * g2) / det

        # backtracking line search on the residual norm
        lam = 1.0
        improved = False
        for _ in range(30):
            n1, n2, alg_new = residual2(i + lam * di, i_int + lam * dii)
            if n1 is not None and max(abs(n1), abs(n2)) < norm:
                i, i_int = i + lam * di, i_int + lam * dii
                g1, g2, alg = n1, n2, alg_new
                improved = True
                break
            lam *= 0.5
        if not improved:
            if not jac_fresh:
                jac = None  # retry the step with a fresh Jacobian
                continue
            raise NoConvergence(f"damped Newton stalled at |g|={norm:.2e}")
        if lam < 1.0:
            jac = None  # damped step: the chord Jacobian went stale
        jac_fresh = False
    else:
        raise NoConvergence("algebraic solve exceeded iteration limit")

    # clamp guard: a solution leaning on the clamped exponential is not trusted
    film = (state.delta_SEI / params.kappa_SEI) * alg.i / params.act_area_n
    arg = (params.F / (params.Rg * params.T)) * (alg.phi_n - params.U_ref + film)
    if abs(arg) >= EXP_CLAMP:
        raise NoConvergence("side-reaction exponential outside trusted range")
    return alg


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

# chosen so halving the substep size moves the end-of-hour state by < 1e-4
# relative (first-order scheme: 120 -> 240 lands at ~7e-5)
PLANT_SUBSTEPS_PER_HOUR = 120


def _derivatives(state: SpmState, alg: SpmAlgebraics, params: SpmParams):
    """Right-hand sides of the four slow ODEs (per second)."""
    d_cp = -15.0 * params.D_p / params.R_p**2 * (state.C_p_avg - alg.C_p_surf)
    d_cn = -15.0 * params.D_n / params.R_n**2 * (state.C_n_avg - alg.C_n_surf)
    d_delta = alg.i_SEI * params.M_SEI / (
        params.F * params.rho_SEI * params.act_area_n
    )
    d_cf = alg.i_SEI / 3600.0
    return d_cp, d_cn, d_delta, d_cf


_BOUND_SLACK = 1e-9  # relative slack so float noise at the box edge does not trip


def _check_bounds(c_p: float, c_n: float, params: SpmParams) -> None:
    if not (-_BOUND_SLACK * params.C_p_max <= c_p <= (1.0 + _BOUND_SLACK) * params.C_p_max):
        raise StateOutOfBounds(f"C_p_avg={c_p} outside [0, C_p_max]")
    if not (-_BOUND_SLACK * params.C_n_max <= c_n <= (1.0 + _BOUND_SLACK) * params.C_n_max):
        raise StateOutOfBounds(f"C_n_avg={c_n} outside [0, C_n_max]")


def _backward_euler_substep(
    state: SpmState, p_w: float, dt_s: float, params: SpmParams,
    guess: SpmAlgebraics | None, depth: int = 0,
) -> tuple[SpmState, SpmAlgebraics]:
    """One implicit substep: fixed-point iteration on the end state.

    The slow RHS depends on the state almost entirely through the algebraic
    currents at fixed power, so the iteration contracts quickly. On
    non-convergence the substep is halved (up to 4 times).
    """
    y = state
    alg = None
    for _ in range(40):
        try:
            alg = solve_algebraics(y, p_w, params, guess=guess)
        except NoConvergence:
            if depth >= 4:
                raise
            half, alg1 = _backward_euler_substep(state, p_w, dt_s / 2, params, guess, depth + 1)
            return _backward_euler_substep(half, p_w, dt_s / 2, params, alg1, depth + 1)
        guess = alg
        d_cp, d_cn, d_delta, d_cf = _derivatives(y, alg, params)
        y_new = SpmState(
            C_p_avg=state.C_p_avg + dt_s * d_cp,
            C_n_avg=state.C_n_avg + dt_s * d_cn,
            delta_SEI=state.delta_SEI + dt_s * d_delta,
            c_f=state.c_f + dt_s * d_cf,
        )
        change = max(
            abs(y_new.C_p_avg - y.C_p_avg) / params.C_p_max,
            abs(y_new.C_n_avg - y.C_n_avg) / params.C_n_max,
        )
        y = y_new
        if change < 1e-13:
            break
    else:
        raise NoConvergence("implicit substep fixed point did not settle")
    _check_bounds(y.C_p_avg, y.C_n_avg, params)
    return y, alg


def integrate_step(
    state: SpmState,
    p_w: float,
    dt_h: float,
    substeps: int,
    params: SpmParams,
) -> SpmState:
    """Advance the cell by dt_h hours at constant cell power p_w (W).

    Backward-Euler sub-stepping with the algebraic layer re-solved at each
    substep end state. Degradation states never decrease; concentrations are
    checked against [0, C_max] after every substep.
    """
    if dt_h <= 0 or substeps < 1:
        raise ValueError("dt_h must be > 0 and substeps >= 1")
    dt_s = dt_h * 3600.0 / substeps
    x = state
    alg = None
    for _ in range(substeps):
        x, alg = _backward_euler_substep(x, p_w, dt_s, params, alg)
    return x


def power_envelope(
    state: SpmState,
    params: SpmParams,
    dt_h: float = 1.0,
    substeps: int = PLANT_SUBSTEPS_PER_HOUR,
    p1c_w: float | None = None,
    rel_tol: float = 5e-3,
) -> tuple[float, float]:
    """Largest feasible (charge, discharge) cell powers over a dt_h-hour hold.

    Feasible means the integrator converges and SOC stays in [0, 1] for the
    whole step. Bisection returns the last known-feasible bound on each side,
    so any power strictly inside the envelope integrates without error.
    Returns (p_min, p_max) with p_min <= 0 <= p_max (charge is negative).
    """
    if p1c_w is None:
        p1c_w = params.i_1c * 3.3
    bracket = 1.25 * p1c_w

    def feasible(p: float) -> bool:
        try:
            integrate_step(state, p, dt_h, substeps, params)
            return True
        except (NoConvergence, StateOutOfBounds, DomainError):
            return False

    def search(sign: float) -> float:
        hi = sign * bracket
        if feasible(hi):
            return hi
        # find a feasible seed on this side; the feasible set can exclude 0
        # at the exact SOC box corners where a resting cell cannot feed the
        # side reaction
        lo = None
        for frac in (0.0, 0.02, 0.1, 0.3, 0.6, 0.9):
            if feasible(sign * frac * p1c_w):
                lo = sign * frac * p1c_w
                break
        if lo is None:
            return 0.0
        for _ in range(40):
            if abs(hi - lo) <= rel_tol * p1c_w:
                break
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        return lo

    return (search(-1.0), search(+1.0))


def calibrate_p1c(params: SpmParams, substeps: int = 240) -> float:
    """Constant cell power (W) that charges SOC 0 -> ~0.97 in one hour.

    Used once to populate the pack section of the parameter file.
    """
    lo, hi = 0.2 * params.i_1c * 3.3, 2.0 * params.i_1c * 3.3
    target = 0.97

    def end_soc(p_charge_w: float) -> float:
        x0 = state_at_soc(params, 0.0)
        try:
            x1 = integrate_step(x0, -p_charge_w, 1.0, substeps, params)
        except (NoConvergence, StateOutOfBounds):
            return 2.0  # overdrive: treat as overshoot
        return soc(x1, params)

    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if end_soc(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def trajectory_log_row(
    t_hours: float, battery_id: int, p_kw: float, state: SpmState, params: SpmParams
) -> Sequence:
    """One row of the trajectory CSV: (t_hours, battery_id, P_kW, soc, states)."""
    return (
        t_hours,
        battery_id,
        p_kw,
        soc(state, params),
        state.C_p_avg,
        state.C_n_avg,
        state.delta_SEI,
        state.c_f,
    )
