"""Assembly of the receding-horizon QPs.

All problem variants share one sparse transcription over the stacked
decision vector

    [ x_0 .. x_N | u_0 .. u_{N-1} | xa_0 .. xa_{T-1} | ua_0 .. ua_{T-1} ]

(total dimension n(N+1) + mN + nT + mT) with the equality rows ordered as:
real dynamics, artificial dynamics, initial condition, artificial
periodicity wrap, terminal coupling x_N = xa_{N mod T}. They differ only in
the objective attached to the artificial trajectory:

* single-layer: the majorized (gradient + rho/2 curvature) economic offset
  cost about a given linearization trajectory;
* initializer: a plain positive-definite quadratic, used to compute a
  feasible artificial trajectory;
* tracking: quadratic distance to a given periodic reference.

A reduced transcription over the artificial variables only (no predicted
plan) serves the periodic trajectory optimizer.

The affine constant of each objective is excluded from the QP and reported
separately so that logged optimal values refer to the unshifted cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .costs import EconomicCostModel, PlanPair, TrackingWeights
from .ltv import PeriodicConstraintSet, PeriodicLTVSystem
from .qp import QpProblem

__all__ = [
    "VariableLayout",
    "TranscribedProblem",
    "build_single_layer_qp",
    "build_initializer_qp",
    "build_tracking_qp",
    "build_periodic_majorized_qp",
    "build_periodic_quadratic_qp",
    "build_periodic_exact_quadratic_qp",
    "check_plan_feasibility",
]


@dataclass(frozen=True)
class VariableLayout:
    """Offsets of the state/input blocks inside the stacked QP variable."""

    n: int
    m: int
    N: int
    T: int
    has_real: bool = True

    @property
    def x_offset(self) -> int:
        return 0

    @property
    def u_offset(self) -> int:
        return self.n * (self.N + 1) if self.has_real else 0

    @property
    def xa_offset(self) -> int:
        return self.u_offset + (self.m * self.N if self.has_real else 0)

    @property
    def ua_offset(self) -> int:
        return self.xa_offset + self.n * self.T

    @property
    def d(self) -> int:
        return self.ua_offset + self.m * self.T

    def x_slice(self, i: int) -> slice:
        if not self.has_real or not 0 <= i <= self.N:
            raise IndexError("predicted state index out of range")
        return slice(self.x_offset + i * self.n, self.x_offset + (i + 1) * self.n)

    def u_slice(self, i: int) -> slice:
        if not self.has_real or not 0 <= i < self.N:
            raise IndexError("predicted input index out of range")
        return slice(self.u_offset + i * self.m, self.u_offset + (i + 1) * self.m)

    def xa_slice(self, j: int) -> slice:
        j %= self.T
        return slice(self.xa_offset + j * self.n, self.xa_offset + (j + 1) * self.n)

    def ua_slice(self, j: int) -> slice:
        j %= self.T
        return slice(self.ua_offset + j * self.m, self.ua_offset + (j + 1) * self.m)

    def to_dict(self) -> dict:
        blocks = {
            "xa": [self.xa_offset, self.n * self.T],
            "ua": [self.ua_offset, self.m * self.T],
        }
        if self.has_real:
            blocks["x"] = [self.x_offset, self.n * (self.N + 1)]
            blocks["u"] = [self.u_offset, self.m * self.N]
        return {"n": self.n, "m": self.m, "N": self.N, "T": self.T, "blocks": blocks}


class _Coo:
    """Accumulator for duplicate-summing COO assembly."""

    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, roff: int, coff: int, M: np.ndarray):
        M = np.asarray(M, dtype=float)
        r, c = np.nonzero(M)
        if r.size == 0:
            return
        self.rows.append(roff + r)
        self.cols.append(coff + c)
        self.vals.append(M[r, c])

    def build(self, shape) -> sp.csc_matrix:
        if not self.rows:
            return sp.csc_matrix(shape)
        return sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape,
        ).tocsc()


@dataclass
class TranscribedProblem:
    """A QP plus the metadata needed to interpret and reuse its solution."""

    qp: QpProblem
    layout: VariableLayout
    k: int
    offset: float
    eq_blocks: dict
    ineq_real_slices: tuple
    ineq_art_slices: tuple

    def objective_value(self, w: np.ndarray) -> float:
        """Objective including the constant carried outside the QP."""
        return self.qp.objective(w) + self.offset

    def extract_artificial(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lay = self.layout
        xa = w[lay.xa_offset : lay.xa_offset + lay.n * lay.T].reshape(lay.T, lay.n)
        ua = w[lay.ua_offset : lay.ua_offset + lay.m * lay.T].reshape(lay.T, lay.m)
        return xa.copy(), ua.copy()

    def extract_plan(self, w: np.ndarray) -> PlanPair:
        lay = self.layout
        if not lay.has_real:
            raise ValueError("reduced transcription has no predicted plan")
        xs = w[: lay.n * (lay.N + 1)].reshape(lay.N + 1, lay.n)
        us = w[lay.u_offset : lay.u_offset + lay.m * lay.N].reshape(lay.N, lay.m)
        xa, ua = self.extract_artificial(w)
        return PlanPair(k=self.k, x_states=xs.copy(), u_seq=us.copy(), xa_states=xa, ua_seq=ua)


def _art_terms_majorized(cost: EconomicCostModel, k, xa_hat, ua_hat, p):
    """Quadratic-with-center form of the majorized offset cost.

    Completing the square turns value + gradient + (rho/2)|.|^2 about the
    linearization point into (rho/2)|za - center|^2 + constant per stage.
    """
    xa_hat = np.atleast_2d(np.asarray(xa_hat, dtype=float))
    ua_hat = np.atleast_2d(np.asarray(ua_hat, dtype=float))
    T = xa_hat.shape[0]
    n = xa_hat.shape[1]
    vals, grads = cost.stage_batch(k, xa_hat, ua_hat, p)
    rho = cost.rho
    W = 0.5 * rho * np.eye(n + ua_hat.shape[1])
    terms = []
    for j in range(T):
        zhat = np.concatenate([xa_hat[j], ua_hat[j]])
        center = zhat - grads[j] / rho
        e = float(vals[j]) - float(grads[j] @ grads[j]) / (2.0 * rho)
        terms.append((W, center, e))
    return terms


def _art_terms_quadratic(weights: TrackingWeights, T: int):
    W = np.block(
        [
            [weights.Q, np.zeros((weights.n, weights.m))],
            [np.zeros((weights.m, weights.n)), weights.R],
        ]
    )
    c = np.zeros(weights.n + weights.m)
    return [(W, c, 0.0)] * T


def _art_terms_tracking(weights: TrackingWeights, ref_states, ref_inputs):
    ref_states = np.atleast_2d(np.asarray(ref_states, dtype=float))
    ref_inputs = np.atleast_2d(np.asarray(ref_inputs, dtype=float))
    W = np.block(
        [
            [weights.Q, np.zeros((weights.n, weights.m))],
            [np.zeros((weights.m, weights.n)), weights.R],
        ]
    )
    return [
        (W, np.concatenate([ref_states[j], ref_inputs[j]]), 0.0)
        for j in range(ref_states.shape[0])
    ]


def _art_terms_exact_quadratic(cost: EconomicCostModel, k: int, T: int, p):
    terms = []
    for j in range(T):
        form = cost.quadratic_form(k + j, p)
        if form is None:
            raise ValueError("cost model does not expose an exact quadratic form")
        terms.append(form)
    return terms


def _build(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    k: int,
    art_terms: Sequence[tuple[np.ndarray, np.ndarray, float]],
    *,
    weights: Optional[TrackingWeights] = None,
    x: Optional[np.ndarray] = None,
    N: Optional[int] = None,
) -> TranscribedProblem:
    n, m, T = system.n, system.m, system.T
    if constraints.T != T:
        raise ValueError("constraint period must match the system period")
    if len(art_terms) != T:
        raise ValueError("need one artificial objective term per phase")
    has_real = x is not None
    if has_real:
        N = T if N is None else int(N)
        if not 1 <= N <= T:
            raise ValueError("prediction horizon must satisfy 1 <= N <= T")
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != n:
            raise ValueError("initial state dimension mismatch")
        if weights is None:
            raise ValueError("tracking weights are required for the full transcription")
        if weights.n != n or weights.m != m:
            raise ValueError("weight dimensions must match the system")
    else:
        N = 0
    lay = VariableLayout(n=n, m=m, N=N, T=T, has_real=has_real)
    d = lay.d

    P = _Coo()
    q = np.zeros(d)
    const = 0.0

    if has_real:
        twoQ, twoR = 2.0 * weights.Q, 2.0 * weights.R
        for i in range(N):
            xs, us_ = lay.x_slice(i), lay.u_slice(i)
            xas, uas = lay.xa_slice(i), lay.ua_slice(i)
            P.add(xs.start, xs.start, twoQ)
            P.add(xas.start, xas.start, twoQ)
            P.add(xs.start, xas.start, -twoQ)
            P.add(xas.start, xs.start, -twoQ)
            P.add(us_.start, us_.start, twoR)
            P.add(uas.start, uas.start, twoR)
            P.add(us_.start, uas.start, -twoR)
            P.add(uas.start, us_.start, -twoR)

    for j, (W, c, e) in enumerate(art_terms):
        W = np.asarray(W, dtype=float)
        c = np.asarray(c, dtype=float).reshape(-1)
        xas, uas = lay.xa_slice(j), lay.ua_slice(j)
        P.add(xas.start, xas.start, 2.0 * W[:n, :n])
        P.add(xas.start, uas.start, 2.0 * W[:n, n:])
        P.add(uas.start, xas.start, 2.0 * W[n:, :n])
        P.add(uas.start, uas.start, 2.0 * W[n:, n:])
        Wc = W @ c
        q[xas] += -2.0 * Wc[:n]
        q[uas] += -2.0 * Wc[n:]
        const += float(c @ Wc) + float(e)

    # equality rows: real dynamics | artificial dynamics | x_0 = x |
    # periodicity wrap | terminal coupling
    Aeq = _Coo()
    eq_blocks = {}
    row = 0
    I_n = np.eye(n)
    if has_real:
        eq_blocks["real_dynamics"] = slice(0, N * n)
        for i in range(N):
            Aeq.add(row, lay.x_slice(i).start, system.A(k + i))
            Aeq.add(row, lay.u_slice(i).start, system.B(k + i))
            Aeq.add(row, lay.x_slice(i + 1).start, -I_n)
            row += n
    eq_blocks["artificial_dynamics"] = slice(row, row + (T - 1) * n)
    for j in range(T - 1):
        Aeq.add(row, lay.xa_slice(j).start, system.A(k + j))
        Aeq.add(row, lay.ua_slice(j).start, system.B(k + j))
        Aeq.add(row, lay.xa_slice(j + 1).start, -I_n)
        row += n
    if has_real:
        eq_blocks["initial_condition"] = slice(row, row + n)
        Aeq.add(row, lay.x_slice(0).start, I_n)
        row += n
    eq_blocks["periodicity"] = slice(row, row + n)
    Aeq.add(row, lay.xa_slice(T - 1).start, system.A(k + T - 1))
    Aeq.add(row, lay.ua_slice(T - 1).start, system.B(k + T - 1))
    Aeq.add(row, lay.xa_slice(0).start, -I_n)
    row += n
    if has_real:
        eq_blocks["terminal_coupling"] = slice(row, row + n)
        Aeq.add(row, lay.x_slice(N).start, I_n)
        Aeq.add(row, lay.xa_slice(N % T).start, -I_n)
        row += n
    n_eq = row
    beq = np.zeros(n_eq)
    if has_real:
        beq[eq_blocks["initial_condition"]] = x

    # inequality rows: predicted stages then artificial stages
    Ain = _Coo()
    bin_parts = []
    row = 0
    real_slices = []
    if has_real:
        for i in range(N):
            G, h = constraints.G(k + i), constraints.h(k + i)
            Ain.add(row, lay.x_slice(i).start, G[:, :n])
            Ain.add(row, lay.u_slice(i).start, G[:, n:])
            real_slices.append(slice(row, row + G.shape[0]))
            bin_parts.append(h)
            row += G.shape[0]
    art_slices = []
    for j in range(T):
        G, h = constraints.G(k + j), constraints.h(k + j)
        Ain.add(row, lay.xa_slice(j).start, G[:, :n])
        Ain.add(row, lay.ua_slice(j).start, G[:, n:])
        art_slices.append(slice(row, row + G.shape[0]))
        bin_parts.append(h)
        row += G.shape[0]
    n_in = row
    bin_ = np.concatenate(bin_parts) if bin_parts else np.zeros(0)

    problem = QpProblem(
        P=P.build((d, d)),
        q=q,
        Aeq=Aeq.build((n_eq, d)),
        beq=beq,
        Ain=Ain.build((n_in, d)),
        bin=bin_,
        layout=lay.to_dict(),
        validate=False,
    )
    return TranscribedProblem(
        qp=problem,
        layout=lay,
        k=k,
        offset=const,
        eq_blocks=eq_blocks,
        ineq_real_slices=tuple(real_slices),
        ineq_art_slices=tuple(art_slices),
    )


def build_single_layer_qp(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    weights: TrackingWeights,
    cost: EconomicCostModel,
    k: int,
    x: np.ndarray,
    xa_hat: np.ndarray,
    ua_hat: np.ndarray,
    p=None,
    N: Optional[int] = None,
) -> TranscribedProblem:
    """Single-layer problem: tracking cost plus majorized economic offset cost.

    ``(xa_hat, ua_hat)`` is the trajectory about which the economic cost is
    expanded; it enters the objective only, never the constraints.
    """
    xa_hat = np.atleast_2d(np.asarray(xa_hat, dtype=float))
    if xa_hat.shape[0] != system.T:
        raise ValueError("linearization trajectory must cover one full period")
    if cost.period != system.T:
        raise ValueError("cost period must match the system period")
    terms = _art_terms_majorized(cost, k, xa_hat, ua_hat, p)
    return _build(system, constraints, k, terms, weights=weights, x=x, N=N)


def build_initializer_qp(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    weights: TrackingWeights,
    k: int,
    x: np.ndarray,
    N: Optional[int] = None,
) -> TranscribedProblem:
    """Same constraints as the single-layer problem with a plain quadratic
    offset; its solution provides a feasible artificial trajectory."""
    terms = _art_terms_quadratic(weights, system.T)
    return _build(system, constraints, k, terms, weights=weights, x=x, N=N)


def build_tracking_qp(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    weights: TrackingWeights,
    k: int,
    x: np.ndarray,
    ref_states: np.ndarray,
    ref_inputs: np.ndarray,
    N: Optional[int] = None,
) -> TranscribedProblem:
    """Reference-tracking baseline: the artificial trajectory is pulled toward
    a given periodic reference instead of an economic objective.

    ``ref_states[j]``/``ref_inputs[j]`` must already be phased for anchor
    time k (entry j refers to absolute time k+j).
    """
    terms = _art_terms_tracking(weights, ref_states, ref_inputs)
    if len(terms) != system.T:
        raise ValueError("reference must cover one full period")
    return _build(system, constraints, k, terms, weights=weights, x=x, N=N)


def build_periodic_majorized_qp(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    cost: EconomicCostModel,
    k: int,
    xa_hat: np.ndarray,
    ua_hat: np.ndarray,
    p=None,
) -> TranscribedProblem:
    """Reduced problem over the artificial trajectory only, majorized economic
    objective; one iteration of the periodic-optimum solver."""
    terms = _art_terms_majorized(cost, k, xa_hat, ua_hat, p)
    return _build(system, constraints, k, terms)


def build_periodic_quadratic_qp(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    weights: TrackingWeights,
    k: int = 0,
) -> TranscribedProblem:
    """Reduced problem with a positive-definite quadratic objective; supplies
    a feasible periodic trajectory to start the periodic-optimum solver."""
    terms = _art_terms_quadratic(weights, system.T)
    return _build(system, constraints, k, terms)


def build_periodic_exact_quadratic_qp(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    cost: EconomicCostModel,
    k: int = 0,
    p=None,
) -> TranscribedProblem:
    """Reduced problem with the economic cost written exactly as a quadratic.

    Only valid for cost models exposing ``quadratic_form``; used as the
    one-shot reference against the iterated majorization solver.
    """
    terms = _art_terms_exact_quadratic(cost, k, system.T, p)
    return _build(system, constraints, k, terms)


def check_plan_feasibility(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    plan: PlanPair,
    x: Optional[np.ndarray] = None,
    tol: float = 1e-6,
) -> tuple[bool, dict]:
    """Independent feasibility audit of a plan via rollouts and set membership.

    Checks the predicted rollout, the artificial rollout with its periodic
    wrap, per-stage constraint membership, the initial condition (when ``x``
    is given) and the terminal coupling. Returns (feasible, worst violations
    per category).
    """
    k = plan.k
    rep: dict = {}
    xs = system.rollout(k, plan.x_states[0], plan.u_seq)
    rep["real_dynamics"] = float(np.max(np.abs(xs - plan.x_states)))
    xas = plan.artificial_rollout(system)
    rep["artificial_dynamics"] = float(np.max(np.abs(xas[:-1] - plan.xa_states)))
    rep["periodicity"] = float(np.max(np.abs(xas[-1] - plan.xa_states[0])))
    rep["initial_condition"] = (
        float(np.max(np.abs(plan.x_states[0] - np.asarray(x, dtype=float))))
        if x is not None
        else 0.0
    )
    rep["terminal_coupling"] = float(
        np.max(np.abs(plan.x_states[plan.N] - plan.xa_states[plan.N % plan.T]))
    )
    worst_real = 0.0
    for i in range(plan.N):
        _, v = constraints.contains(k + i, plan.x_states[i], plan.u_seq[i], tol=tol)
        worst_real = max(worst_real, v)
    rep["real_membership"] = worst_real
    worst_art = 0.0
    for j in range(plan.T):
        _, v = constraints.contains(k + j, plan.xa_states[j], plan.ua_seq[j], tol=tol)
        worst_art = max(worst_art, v)
    rep["artificial_membership"] = worst_art
    feasible = all(v <= tol for v in rep.values())
    return feasible, rep
