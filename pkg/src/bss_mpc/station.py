"""Closed-loop station plant: fleet circulation, charging, swaps, accounting.

One simulation is a strict hourly loop over the true cell model: the
controller decides, the 21 slots integrate one hour (with protective clamps
absorbing any overdrive), the hour's swap demand is served at the hour end
from the FIFO vehicle queue, and the ledger books energy, degradation and
any SOC-shortfall penalties. Batteries on vehicles do not age; their state
of charge is reset to the configured return level when they re-enter a slot,
preserving each unit's own lithium inventory and film history exactly.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import market, ocp, spm


class CardinalityMismatch(RuntimeError):
    """Controller returned a selection that does not match the demand."""


class MissingBaseline(ValueError):
    """Normalized metrics require the rule-based run's logs."""


@dataclass
class BatteryUnit:
    uid: int
    state: spm.SpmState


@dataclass
class Station:
    slots: list                  # K BatteryUnit
    queue: deque                 # FIFO of BatteryUnit on vehicles

    @property
    def slot_states(self) -> np.ndarray:
        return np.array([np.array(u.state) for u in self.slots])


@dataclass(frozen=True)
class StationConfig:
    slots: int = 21
    fleet: int = 200
    soc_threshold: float = 0.7
    eps: float = 0.001
    soc_swap: float = 0.30        # SOC of a battery returned by a vehicle
    soc_init: float = 0.75        # initial in-station SOC
    Pi: float = 250.0             # $ per Ah of fade, for the ledger
    penalty_mode: str = "linear"  # or "step": $1 per started 10% shortfall
    plant_substeps: int = spm.PLANT_SUBSTEPS_PER_HOUR

    def __post_init__(self):
        if self.fleet <= self.slots:
            raise ValueError("fleet must exceed the slot count")
        if self.penalty_mode not in ("linear", "step"):
            raise ValueError("penalty_mode must be 'linear' or 'step'")


@dataclass
class LedgerEntry:
    t: int
    energy_cost: float            # positive when buying, negative when selling
    degradation_cost: float
    shortfall_penalty: float

    @property
    def total(self) -> float:
        return self.energy_cost + self.degradation_cost + self.shortfall_penalty


@dataclass
class MetricsReport:
    cumulative_profit: float
    avg_c_f: float
    var_c_f: float
    soc_satisfaction: float       # percent of swaps at or above the threshold
    swaps_total: int
    swaps_below: int
    energy_cost: float
    degradation_cost: float
    shortfall_penalty: float
    normalized_loss: float | None = None   # percent of the baseline's loss
    normalized_avg_c_f: float | None = None
    normalized_var_c_f: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class RunLogs:
    ledger: list = field(default_factory=list)        # LedgerEntry
    swap_events: list = field(default_factory=list)   # (t, slot, uid_out, uid_in, soc_out)
    decisions: list = field(default_factory=list)     # decision-log rows
    trajectory: list = field(default_factory=list)    # trajectory CSV rows
    fleet_c_f: np.ndarray | None = None               # (fleet,) at horizon end
    wall_s: float = 0.0


def init_world(cfg: StationConfig, params: spm.SpmParams, seed: int = 0) -> tuple[list, Station]:
    """Units 1..K in slots (unit k in slot k), the rest queued in id order."""
    fleet = []
    for uid in range(1, cfg.fleet + 1):
        soc = cfg.soc_init if uid <= cfg.slots else cfg.soc_swap
        fleet.append(BatteryUnit(uid=uid, state=spm.state_at_soc(params, soc)))
    station = Station(
        slots=[fleet[k] for k in range(cfg.slots)],
        queue=deque(fleet[cfg.slots:]),
    )
    return fleet, station


def apply_controls(
    station: Station,
    u_kw: np.ndarray,
    params: spm.SpmParams,
    pack: spm.PackSpec,
    substeps: int,
) -> np.ndarray:
    """Integrate each slot one hour; clamp commands the plant refuses.

    The applied power (not the commanded one) is returned for accounting.
    A cheap SOC-headroom clamp is tried first; if the integrator still
    refuses, the bisected envelope bound is used.
    """
    applied = np.zeros_like(u_kw, dtype=float)
    for k, unit in enumerate(station.slots):
        p_cell = pack.to_cell_w(float(u_kw[k]))
        state = unit.state
        try:
            unit.state = spm.integrate_step(state, p_cell, 1.0, substeps, params)
            applied[k] = u_kw[k]
            continue
        except (spm.NoConvergence, spm.StateOutOfBounds):
            pass
        s = spm.soc(state, params)
        p1c = pack.cell_p1c_w
        quick = min(max(p_cell, -0.98 * (1.0 - s) * p1c), 0.98 * s * p1c)
        try:
            unit.state = spm.integrate_step(state, quick, 1.0, substeps, params)
            applied[k] = pack.to_pack_kw(quick)
            continue
        except (spm.NoConvergence, spm.StateOutOfBounds):
            pass
        lo, hi = spm.power_envelope(state, params, substeps=substeps, p1c_w=p1c)
        p_clamped = min(max(p_cell, lo), hi)
        unit.state = spm.integrate_step(state, p_clamped, 1.0, substeps, params)
        applied[k] = pack.to_pack_kw(p_clamped)
    return applied


def shortfall_penalty_usd(soc_out: float, threshold: float, mode: str) -> float:
    """$1 per 10 percentage points of SOC shortfall at handover.

    Linear mode pro-rates between the multiples; step mode charges each
    started 10%-band in full. Both agree at exact multiples of 10%.
    """
    gap = max(0.0, threshold - soc_out)
    if gap <= 1e-12:
        return 0.0
    if mode == "linear":
        return gap * 10.0
    return math.ceil(gap / 0.10 - 1e-9) * 1.0


def process_swaps(
    station: Station,
    S_t: int,
    b_t: np.ndarray,
    cfg: StationConfig,
    params: spm.SpmParams,
    t: int,
    logs: RunLogs,
) -> float:
    """Hour-end swap execution: outgoing units join the queue tail, queue
    heads take their slots at the configured return SOC (their own lithium
    inventory and degradation history carried over exactly).
    """
    if int(np.sum(b_t)) != int(S_t):
        raise CardinalityMismatch(f"hour {t}: sum(b)={int(np.sum(b_t))} != S={S_t}")
    penalty = 0.0
    for k in np.nonzero(b_t)[0]:
        unit = station.slots[int(k)]
        soc_out = spm.soc(unit.state, params)
        penalty += shortfall_penalty_usd(soc_out, cfg.soc_threshold, cfg.penalty_mode)
        incoming = station.queue.popleft()
        incoming.state = spm.reset_soc(incoming.state, params, cfg.soc_swap)
        station.slots[int(k)] = incoming
        station.queue.append(unit)
        logs.swap_events.append((t, int(k), unit.uid, incoming.uid, soc_out))
    return penalty


def account(
    t: int,
    applied_kw: np.ndarray,
    rho_t: float,
    cf_before: np.ndarray,
    cf_after: np.ndarray,
    penalty: float,
    cfg: StationConfig,
) -> LedgerEntry:
    """One hour's cost decomposition. Selling at positive prices books
    negative energy cost; degradation is plant-truth fade at the fade price."""
    energy = -float(np.sum(applied_kw)) * rho_t
    degradation = cfg.Pi * float(np.sum(cf_after - cf_before))
    return LedgerEntry(
        t=t, energy_cost=energy, degradation_cost=degradation,
        shortfall_penalty=penalty,
    )


def run_simulation(
    controller,
    price: market.PriceSeries,
    demand: market.DemandSeries,
    days: int,
    cfg: StationConfig,
    params: spm.SpmParams,
    pack: spm.PackSpec,
    horizon: int = 24,
    log_trajectory: bool = True,
) -> tuple[MetricsReport, RunLogs]:
    """Sequential hourly loop: decide, charge, swap, account.

    The controller is an object with `step(states, t, price_win, demand_win)
    -> ControllerDecision` (wrap the pure baseline functions accordingly).
    Deterministic for fixed inputs and controller seed.
    """
    hours = days * 24
    if len(price) < hours + horizon or len(demand) < hours + horizon:
        raise ValueError("scenario series must cover days*24 + horizon hours")
    t_start = time.perf_counter()
    fleet, station = init_world(cfg, params)
    logs = RunLogs()
    for t in range(hours):
        states = station.slot_states
        decision = controller.step(
            states, t,
            market.window(price.rho, t, horizon),
            market.window(demand.S, t, horizon),
        )
        cf_before = states[:, ocp.CF]
        applied = apply_controls(station, decision.u_now, params, pack, cfg.plant_substeps)
        after = station.slot_states
        penalty = process_swaps(
            station, int(demand.S[t]), decision.b_now, cfg, params, t, logs
        )
        entry = account(
            t, applied, float(price.rho[t]), cf_before, after[:, ocp.CF],
            penalty, cfg,
        )
        logs.ledger.append(entry)
        for k, unit in enumerate(station.slots):
            logs.decisions.append(
                (t, controller.name, k, float(applied[k]), int(decision.b_now[k]),
                 decision.diagnostics.get("planned_objective", float("nan")),
                 decision.diagnostics.get("resamples", 0),
                 decision.diagnostics.get("wall_ms", 0.0))
            )
        if log_trajectory:
            for k in range(cfg.slots):
                logs.trajectory.append(
                    spm.trajectory_log_row(
                        float(t + 1), station.slots[k].uid, float(applied[k]),
                        spm.SpmState(*after[k]), params,
                    )
                )
    logs.fleet_c_f = np.array([u.state.c_f for u in fleet])
    logs.wall_s = time.perf_counter() - t_start
    return metrics(logs, cfg), logs


def metrics(logs: RunLogs, cfg: StationConfig, baseline: RunLogs | None = None) -> MetricsReport:
    """The four summary metrics, optionally normalized to a baseline run."""
    total = sum(e.total for e in logs.ledger)
    swaps = len(logs.swap_events)
    below = sum(1 for (_, _, _, _, soc_out) in logs.swap_events
                if soc_out < cfg.soc_threshold - 1e-9)
    sat = 100.0 if swaps == 0 else 100.0 * (swaps - below) / swaps
    cf = logs.fleet_c_f if logs.fleet_c_f is not None else np.zeros(1)
    report = MetricsReport(
        cumulative_profit=-total,
        avg_c_f=float(np.mean(cf)),
        var_c_f=float(np.var(cf)),
        soc_satisfaction=sat,
        swaps_total=swaps,
        swaps_below=below,
        energy_cost=sum(e.energy_cost for e in logs.ledger),
        degradation_cost=sum(e.degradation_cost for e in logs.ledger),
        shortfall_penalty=sum(e.shortfall_penalty for e in logs.ledger),
    )
    if baseline is not None:
        base = metrics(baseline, cfg)
        if base.cumulative_profit >= 0:
            raise MissingBaseline("baseline run shows no loss to normalize against")
        report.normalized_loss = 100.0 * (-report.cumulative_profit) / (-base.cumulative_profit)
        report.normalized_avg_c_f = (
            100.0 * report.avg_c_f / base.avg_c_f if base.avg_c_f > 0 else None
        )
        report.normalized_var_c_f = (
            100.0 * report.var_c_f / base.var_c_f if base.var_c_f > 0 else None
        )
    return report


# ---------------------------------------------------------------------------
# controller adapters (uniform step interface for the loop above)
# ---------------------------------------------------------------------------


class RuleBasedAdapter:
    name = "rule_based"

    def __init__(self, params, pack, cfg: StationConfig):
        self.params, self.pack, self.cfg = params, pack, cfg

    def step(self, states, t, price_win, demand_win):
        from .controllers import rule_based_step

        return rule_based_step(
            states, t, int(demand_win[0]), self.params, self.pack,
            soc_threshold=self.cfg.soc_threshold, eps=self.cfg.eps,
        )


class LowFidelityAdapter:
    name = "low_fidelity"

    def __init__(self, params, pack, cfg: StationConfig, lf_cfg=None):
        from .controllers import LowFidelityConfig

        self.params, self.pack, self.cfg = params, pack, cfg
        self.lf = lf_cfg or LowFidelityConfig(soc_swap=cfg.soc_swap)

    def step(self, states, t, price_win, demand_win):
        from .controllers import low_fidelity_step

        soc = states[:, ocp.CN] / self.params.C_n_max
        return low_fidelity_step(
            soc, t, price_win, demand_win, self.pack, self.lf,
            soc_threshold=self.cfg.soc_threshold,
        )


class MpcAdapter:
    def __init__(self, mpc_controller, name="mpc"):
        self.inner = mpc_controller
        self.name = name

    def step(self, states, t, price_win, demand_win):
        return self.inner.step(states, t, price_win, demand_win)
