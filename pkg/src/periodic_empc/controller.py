"""Receding-horizon controllers.

:class:`SingleLayerEmpc` solves, at each sampling time, one QP combining the
tracking cost with the majorized economic offset cost about a linearization
trajectory, applies the first input, and rotates the solved artificial
trajectory by one step to obtain the next linearization point. The rotation
plus the shifted plan also warm-start the next QP, which typically cuts the
iteration count substantially.

:class:`TrackingMpc` runs the identical loop with the economic objective
replaced by quadratic distance to a fixed periodic reference; it is the
two-layer baseline the single-layer scheme is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import EconomicCostModel, PlanPair, TrackingWeights, tracking_stage_cost
from .drto import DrtoSolution
from .ltv import PeriodicConstraintSet, PeriodicLTVSystem
from .qp import OPTIMAL, QpSolution, QpSolver, SolverConfig, WarmStart
from .transcription import (
    TranscribedProblem,
    build_initializer_qp,
    build_single_layer_qp,
    build_tracking_qp,
)

__all__ = [
    "ControllerConfig",
    "ControllerError",
    "StepRecord",
    "StepResult",
    "SingleLayerEmpc",
    "TrackingMpc",
    "LyapunovReport",
    "check_lyapunov_decrease",
]


class ControllerError(RuntimeError):
    """QP failure inside the control loop; carries the offending solution."""

    def __init__(self, message: str, solution: Optional[QpSolution] = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class ControllerConfig:
    N: Optional[int] = None  # prediction horizon, defaults to the period
    solver: SolverConfig = field(default_factory=SolverConfig)
    feas_tol: float = 1e-6


@dataclass
class StepRecord:
    """Per-step log entry used by the stability checks and the CSV logs."""

    k: int
    x: np.ndarray
    u_applied: np.ndarray
    v_hat: float  # optimal cost including the constant carried outside the QP
    s_value: float  # tracking part of the optimum
    lyap_term: float  # stage cost of the first deviation, bounds the next decrease
    qp_iterations: int
    qp_status: str
    solve_time: float
    p_token: int  # identifies the exogenous-parameter segment


@dataclass
class StepResult:
    u_applied: np.ndarray
    plan: PlanPair
    v_hat_opt: float
    delta_v: Optional[float]
    diagnostics: dict = field(default_factory=dict)


class _RecedingHorizonBase:
    """Shared machinery: initialization, warm-start shifting, history."""

    def __init__(self, system, constraints, weights, config=None):
        if system.T != constraints.T:
            raise ValueError("system and constraint periods must agree")
        self.system = system
        self.constraints = constraints
        self.weights = weights
        self.config = config if config is not None else ControllerConfig()
        self.N = self.config.N if self.config.N is not None else system.T
        if not 1 <= self.N <= system.T:
            raise ValueError("prediction horizon must satisfy 1 <= N <= T")
        self.solver = QpSolver()
        self.k: Optional[int] = None
        self.xa_hat: Optional[np.ndarray] = None
        self.ua_hat: Optional[np.ndarray] = None
        self.history: list[StepRecord] = []
        self._warm: Optional[WarmStart] = None
        self._prev_tp: Optional[TranscribedProblem] = None
        self._prev_record: Optional[StepRecord] = None

    def initialize(self, k0: int, x0: np.ndarray):
        """Compute a feasible artificial trajectory from the initializer QP.

        Raises :class:`ControllerError` when no feasible plan exists from x0.
        """
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        tp = build_initializer_qp(self.system, self.constraints, self.weights, k0, x0, N=self.N)
        sol = self.solver.solve(tp.qp, self.config.solver)
        if sol.status != OPTIMAL:
            raise ControllerError(
                f"initialization failed with status '{sol.status}'", solution=sol
            )
        plan = tp.extract_plan(sol.w)
        ok, report = _rollout_feasibility(self.system, self.constraints, plan, x0,
                                          self.config.feas_tol)
        if not ok:
            raise ControllerError(f"initializer plan failed the feasibility audit: {report}")
        self.k = k0
        self.xa_hat = plan.xa_states.copy()
        self.ua_hat = plan.ua_seq.copy()
        self._warm = WarmStart(w=sol.w, duals_eq=sol.duals_eq, duals_in=sol.duals_in)
        self._prev_tp = tp
        self._prev_record = None
        self.history.clear()
        return self

    # subclasses build their per-step problem here
    def _build(self, k, x, p) -> TranscribedProblem:
        raise NotImplementedError

    def step(self, x: np.ndarray, p=None, p_token: int = 0) -> StepResult:
        """One closed-loop iteration: solve, apply first input, rotate."""
        if self.k is None:
            raise ControllerError("controller not initialized")
        x = np.asarray(x, dtype=float).reshape(-1)
        k = self.k
        tp = self._build(k, x, p)
        cfg = self.config.solver
        if self._warm is not None:
            cfg = cfg.with_warm_start(self._warm)
        sol = self.solver.solve(tp.qp, cfg)
        if sol.status != OPTIMAL:
            raise ControllerError(
                f"QP at time {k} returned status '{sol.status}' "
                "(numerical trouble: the loop is feasible by construction)",
                solution=sol,
            )
        plan = tp.extract_plan(sol.w)
        v_hat = tp.objective_value(sol.w)
        u0 = plan.u_seq[0].copy()
        s_value = _tracking_value(self.weights, plan)
        lyap_term = tracking_stage_cost(
            self.weights, x - plan.xa_states[0], u0 - plan.ua_seq[0]
        )

        prev = self._prev_record
        delta_v = None
        if prev is not None and prev.p_token == p_token:
            delta_v = v_hat - prev.v_hat
        record = StepRecord(
            k=k,
            x=x.copy(),
            u_applied=u0,
            v_hat=v_hat,
            s_value=s_value,
            lyap_term=lyap_term,
            qp_iterations=sol.iterations,
            qp_status=sol.status,
            solve_time=sol.solve_time,
            p_token=p_token,
        )
        self.history.append(record)
        self._prev_record = record

        # rotate the solved artificial trajectory one step to get the next
        # linearization point, and shift the plan/duals into a warm start
        self.xa_hat = np.roll(plan.xa_states, -1, axis=0)
        self.ua_hat = np.roll(plan.ua_seq, -1, axis=0)
        self._warm = _shift_warm_start(self.system, tp, sol, plan)
        self._prev_tp = tp
        self.k = k + 1

        return StepResult(
            u_applied=u0,
            plan=plan,
            v_hat_opt=v_hat,
            delta_v=delta_v,
            diagnostics={
                "qp_iterations": sol.iterations,
                "primal_residual": sol.primal_residual,
                "dual_residual": sol.dual_residual,
                "offset_constant": tp.offset,
            },
        )


class SingleLayerEmpc(_RecedingHorizonBase):
    """Single-QP economic controller for periodic operation."""

    def __init__(
        self,
        system: PeriodicLTVSystem,
        constraints: PeriodicConstraintSet,
        weights: TrackingWeights,
        cost: EconomicCostModel,
        config: Optional[ControllerConfig] = None,
    ):
        super().__init__(system, constraints, weights, config)
        if cost.period != system.T:
            raise ValueError("cost period must match the system period")
        self.cost = cost

    def _build(self, k, x, p):
        return build_single_layer_qp(
            self.system, self.constraints, self.weights, self.cost,
            k, x, self.xa_hat, self.ua_hat, p, N=self.N,
        )


class TrackingMpc(_RecedingHorizonBase):
    """Baseline: track a precomputed optimal periodic reference."""

    def __init__(
        self,
        system: PeriodicLTVSystem,
        constraints: PeriodicConstraintSet,
        weights: TrackingWeights,
        reference: DrtoSolution,
        config: Optional[ControllerConfig] = None,
    ):
        super().__init__(system, constraints, weights, config)
        if reference.T != system.T:
            raise ValueError("reference period must match the system period")
        self.reference = reference

    def _build(self, k, x, p):
        ref = self.reference.rotated(k - self.reference.k)
        return build_tracking_qp(
            self.system, self.constraints, self.weights,
            k, x, ref.xa_states, ref.ua_seq, N=self.N,
        )

    def tracking_step(self, x: np.ndarray, p=None, p_token: int = 0) -> StepResult:
        return self.step(x, p, p_token)


def _tracking_value(weights: TrackingWeights, plan: PlanPair) -> float:
    total = 0.0
    for i in range(plan.N):
        total += tracking_stage_cost(
            weights,
            plan.x_states[i] - plan.xa_states[i],
            plan.u_seq[i] - plan.ua_seq[i],
        )
    return total


def _rollout_feasibility(system, constraints, plan, x, tol):
    from .transcription import check_plan_feasibility

    return check_plan_feasibility(system, constraints, plan, x=x, tol=tol)


def _shift_warm_start(
    system: PeriodicLTVSystem,
    tp: TranscribedProblem,
    sol: QpSolution,
    plan: PlanPair,
) -> WarmStart:
    """Shift the solved plan and duals one step forward.

    The shifted plan appends the artificial input at index N and rolls the
    artificial trajectory, which is feasible for the next problem by
    construction; the duals are shifted block-wise where the row structure
    lines up and copied otherwise.
    """
    lay = tp.layout
    n, m, N, T = lay.n, lay.m, lay.N, lay.T
    k = tp.k
    w = np.empty(lay.d)

    xa_next = np.roll(plan.xa_states, -1, axis=0)
    ua_next = np.roll(plan.ua_seq, -1, axis=0)
    ua_wrap = plan.ua_seq[N % T]

    xs = plan.x_states
    w[: n * N] = xs[1:].reshape(-1)
    w[lay.x_slice(N)] = system.step(k + N, xs[N], ua_wrap)
    if N > 1:
        w[lay.u_offset : lay.u_offset + m * (N - 1)] = plan.u_seq[1:].reshape(-1)
    w[lay.u_slice(N - 1)] = ua_wrap
    w[lay.xa_offset : lay.xa_offset + n * T] = xa_next.reshape(-1)
    w[lay.ua_offset : lay.ua_offset + m * T] = ua_next.reshape(-1)

    y_eq = np.array(sol.duals_eq)
    blocks = tp.eq_blocks
    rd = blocks["real_dynamics"]
    dyn = y_eq[rd].reshape(N, n)
    y_eq[rd] = np.vstack([dyn[1:], dyn[-1:]]).reshape(-1)
    # artificial dynamics rows plus the wrap row form one circular block
    ad, per = blocks["artificial_dynamics"], blocks["periodicity"]
    art = np.vstack([y_eq[ad].reshape(T - 1, n), y_eq[per].reshape(1, n)])
    art = np.roll(art, -1, axis=0)
    y_eq[ad] = art[: T - 1].reshape(-1)
    y_eq[per] = art[T - 1]

    y_in = np.array(sol.duals_in)
    real_sizes = {s.stop - s.start for s in tp.ineq_real_slices}
    art_sizes = {s.stop - s.start for s in tp.ineq_art_slices}
    if len(real_sizes | art_sizes) <= 1:
        # uniform row count per stage: shift predicted stages, roll artificial
        if tp.ineq_real_slices:
            qrows = tp.ineq_real_slices[0].stop - tp.ineq_real_slices[0].start
            lo = tp.ineq_real_slices[0].start
            hi = tp.ineq_real_slices[-1].stop
            realblk = y_in[lo:hi].reshape(N, qrows)
            y_in[lo:hi] = np.vstack([realblk[1:], realblk[-1:]]).reshape(-1)
        if tp.ineq_art_slices:
            qrows = tp.ineq_art_slices[0].stop - tp.ineq_art_slices[0].start
            lo = tp.ineq_art_slices[0].start
            hi = tp.ineq_art_slices[-1].stop
            y_in[lo:hi] = np.roll(y_in[lo:hi].reshape(T, qrows), -1, axis=0).reshape(-1)
    return WarmStart(w=w, duals_eq=y_eq, duals_in=y_in)


@dataclass
class LyapunovReport:
    checked_pairs: int
    violations: list  # (k, excess) pairs
    max_excess: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_lyapunov_decrease(
    history: list[StepRecord],
    tol_scale: float = 1e-6,
    window: Optional[tuple[int, int]] = None,
) -> LyapunovReport:
    """Verify the per-step decrease of the optimal cost on fixed-parameter windows.

    For consecutive steps within one exogenous-parameter segment the optimal
    value must drop by at least the tracking stage cost of the first
    deviation, up to a tolerance absorbing the QP solve accuracy. Pairs that
    span a parameter change are excluded.
    """
    records = history
    if window is not None:
        lo, hi = window
        records = [r for r in history if lo <= r.k < hi]
    violations = []
    max_excess = -np.inf
    checked = 0
    for prev, cur in zip(records, records[1:]):
        if cur.k != prev.k + 1 or cur.p_token != prev.p_token:
            continue
        checked += 1
        tol = tol_scale * (1.0 + abs(prev.v_hat))
        excess = (cur.v_hat - prev.v_hat) - (-prev.lyap_term)
        max_excess = max(max_excess, excess - tol)
        if excess > tol:
            violations.append((prev.k, float(excess - tol)))
    return LyapunovReport(checked_pairs=checked, violations=violations, max_excess=max_excess)
