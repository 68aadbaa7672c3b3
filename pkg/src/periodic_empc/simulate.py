"""Closed-loop simulation, average-cost metrics, and structured logging.

A scenario schedules the exogenous cost parameter over the run; the harness
steps the controller and the plant, evaluates the economic stage cost on the
applied pair, audits constraint membership, and accumulates a per-step log.
Logs serialize to CSV with full-precision floats (runs with identical
configuration and seed produce byte-identical files) plus a JSON sidecar
carrying column metadata and a configuration hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controller import ControllerConfig, SingleLayerEmpc, StepRecord, TrackingMpc
from .costs import EconomicCostModel, TrackingWeights
from .drto import DrtoSolution
from .ltv import PeriodicConstraintSet, PeriodicLTVSystem

__all__ = [
    "ScenarioSchedule",
    "SimulationLog",
    "run_closed_loop",
    "average_economic_cost",
    "orbit_distance",
]


@dataclass(frozen=True)
class ScenarioSchedule:
    """Run length, initial state, and the exogenous-parameter timeline.

    ``p_timeline`` lists (start_step, value) pairs; the first entry must
    start at step 0 and starts must be strictly increasing. Values are
    whatever the cost model accepts (None for built-in defaults).
    """

    total_steps: int
    x0: np.ndarray
    p_timeline: tuple = ((0, None),)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        tl = tuple((int(s), p) for s, p in self.p_timeline)
        object.__setattr__(self, "p_timeline", tl)
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not tl or tl[0][0] != 0:
            raise ValueError("parameter timeline must start at step 0")
        starts = [s for s, _ in tl]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("timeline start steps must be strictly increasing")

    def p_at(self, step: int) -> tuple[object, int]:
        """Parameter value and segment index active at ``step``."""
        token = 0
        for i, (start, _) in enumerate(self.p_timeline):
            if step >= start:
                token = i
        return self.p_timeline[token][1], token

    @property
    def change_steps(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.p_timeline[1:])


@dataclass
class SimulationLog:
    """Per-step arrays of a closed-loop run plus audit results."""

    T: int
    steps: np.ndarray  # (L,)
    ks: np.ndarray  # (L,) absolute controller time
    xs: np.ndarray  # (L, n)
    us: np.ndarray  # (L, m)
    econ: np.ndarray  # (L,) economic stage cost of the applied pair
    v_hat: np.ndarray  # (L,) optimal cost reported by the controller
    s_value: np.ndarray  # (L,)
    lyap_term: np.ndarray  # (L,)
    qp_iterations: np.ndarray  # (L,)
    p_tokens: np.ndarray  # (L,)
    violations: list = field(default_factory=list)  # (step, row, magnitude)
    period_averages: list = field(default_factory=list)
    history: list = field(default_factory=list)  # controller StepRecords
    meta: dict = field(default_factory=dict)
    solve_times: Optional[np.ndarray] = None

    @property
    def total_steps(self) -> int:
        return self.steps.shape[0]

    def columns(self) -> list[str]:
        n, m = self.xs.shape[1], self.us.shape[1]
        return (
            ["step", "k"]
            + [f"x{i}" for i in range(n)]
            + [f"u{i}" for i in range(m)]
            + ["econ_cost", "v_hat", "s_value", "lyap_term", "qp_iterations", "p_token"]
        )

    def to_csv(self, path) -> None:
        """Deterministic CSV: full-precision reprs, no wall-clock columns."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            for i in range(self.total_steps):
                row = [int(self.steps[i]), int(self.ks[i])]
                row += [repr(float(v)) for v in self.xs[i]]
                row += [repr(float(v)) for v in self.us[i]]
                row += [
                    repr(float(self.econ[i])),
                    repr(float(self.v_hat[i])),
                    repr(float(self.s_value[i])),
                    repr(float(self.lyap_term[i])),
                    int(self.qp_iterations[i]),
                    int(self.p_tokens[i]),
                ]
                writer.writerow(row)

    def write_sidecar(self, path, config: Optional[dict] = None) -> None:
        payload = {
            "columns": self.columns(),
            "period": self.T,
            "total_steps": self.total_steps,
            "violations": len(self.violations),
            "meta": self.meta,
        }
        if config is not None:
            canon = json.dumps(config, sort_keys=True)
            payload["config"] = config
            payload["config_sha256"] = hashlib.sha256(canon.encode()).hexdigest()
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def run_closed_loop(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    weights: TrackingWeights,
    scenario: ScenarioSchedule,
    kind: str = "empc",
    cost: Optional[EconomicCostModel] = None,
    reference: Optional[DrtoSolution] = None,
    econ_cost: Optional[EconomicCostModel] = None,
    controller_config: Optional[ControllerConfig] = None,
    k0: int = 0,
    violation_tol: float = 1e-6,
) -> SimulationLog:
    """Simulate plant plus controller for the scheduled number of steps.

    ``kind`` selects the single-layer economic controller ("empc", requires
    ``cost``) or the reference-tracking baseline ("tracking", requires
    ``reference``). ``econ_cost`` is the stage cost used for the logged
    economic metric; it defaults to ``cost`` and must be given for tracking
    runs that are economically scored. A controller error aborts the run,
    preserving the partial log on the raised exception.
    """
    if kind == "empc":
        if cost is None:
            raise ValueError("the economic controller needs a cost model")
        controller = SingleLayerEmpc(system, constraints, weights, cost,
                                     config=controller_config)
    elif kind == "tracking":
        if reference is None:
            raise ValueError("the tracking controller needs a periodic reference")
        controller = TrackingMpc(system, constraints, weights, reference,
                                 config=controller_config)
    else:
        raise ValueError(f"unknown controller kind '{kind}'")
    metric = econ_cost if econ_cost is not None else cost
    if metric is None:
        raise ValueError("need a stage cost to score the run")

    controller.initialize(k0, scenario.x0)
    L = scenario.total_steps
    n, m = system.n, system.m
    xs = np.empty((L, n))
    us = np.empty((L, m))
    econ = np.empty(L)
    v_hat = np.empty(L)
    s_val = np.empty(L)
    lyap = np.empty(L)
    iters = np.empty(L, dtype=int)
    tokens = np.empty(L, dtype=int)
    times = np.empty(L)
    violations: list = []

    x = scenario.x0.copy()
    for step in range(L):
        p, token = scenario.p_at(step)
        k = k0 + step
        res = controller.step(x, p, p_token=token)
        u = res.u_applied
        xs[step] = x
        us[step] = u
        econ[step] = metric.value(k, x, u, p)
        v_hat[step] = res.v_hat_opt
        rec = controller.history[-1]
        s_val[step] = rec.s_value
        lyap[step] = rec.lyap_term
        iters[step] = rec.qp_iterations
        tokens[step] = token
        times[step] = rec.solve_time
        inside, worst = constraints.contains(k, x, u, tol=violation_tol)
        if not inside:
            G = constraints.G(k)
            z = np.concatenate([x, u])
            resid = G @ z - constraints.h(k)
            for row in np.flatnonzero(resid > violation_tol):
                violations.append((step, int(row), float(resid[row])))
        x = system.step(k, x, u)

    log = SimulationLog(
        T=system.T,
        steps=np.arange(L),
        ks=k0 + np.arange(L),
        xs=xs,
        us=us,
        econ=econ,
        v_hat=v_hat,
        s_value=s_val,
        lyap_term=lyap,
        qp_iterations=iters,
        p_tokens=tokens,
        violations=violations,
        history=list(controller.history),
        solve_times=times,
        meta={"kind": kind, "k0": k0, "seed": scenario.seed},
    )
    T = system.T
    for start in range(0, L - T + 1, T):
        log.period_averages.append(float(np.mean(econ[start : start + T])))
    return log


def average_economic_cost(log: SimulationLog, window: int) -> float:
    """Mean economic stage cost over the last ``window`` steps.

    A window that is not a multiple of the period mixes phases and is
    reported with a warning; it remains a valid average.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if window > log.total_steps:
        raise ValueError("window exceeds the logged run length")
    if window % log.T:
        warnings.warn(
            f"averaging window {window} is not a multiple of the period {log.T}; "
            "the result mixes phases",
            stacklevel=2,
        )
    return float(np.mean(log.econ[-window:]))


def orbit_distance(
    log: SimulationLog,
    reference,
    window: int,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Distance of the trailing window to a periodic orbit, best over phases.

    For each cyclic phase alignment of the reference, takes the maximum over
    the window of the stacked (x, u) deviation norm, and returns the minimum
    over alignments. ``coords`` restricts the deviation to the given indices
    of the stacked vector. ``reference`` is a periodic orbit object exposing
    ``xa_states``/``ua_seq`` (or a plain (states, inputs) tuple).
    """
    if window <= 0 or window > log.total_steps:
        raise ValueError("window must be in (0, total_steps]")
    if hasattr(reference, "xa_states"):
        ref = np.concatenate([reference.xa_states, reference.ua_seq], axis=1)
    else:
        ref = np.concatenate([np.atleast_2d(reference[0]), np.atleast_2d(reference[1])], axis=1)
    T = ref.shape[0]
    traj = np.concatenate([log.xs[-window:], log.us[-window:]], axis=1)
    ks = log.ks[-window:]
    if coords is not None:
        idx = np.asarray(coords, dtype=int)
        traj = traj[:, idx]
        refc = ref[:, idx]
    else:
        refc = ref
    best = np.inf
    for shift in range(T):
        dev = traj - refc[(ks + shift) % T]
        best = min(best, float(np.max(np.linalg.norm(dev, axis=1))))
    return best
