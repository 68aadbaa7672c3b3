"""Economic stage costs, tracking costs, and the majorized (quadratic
upper-bound) offset cost used by the single-layer controller.

A cost model evaluates a period-T family of stage costs ``l_k(x, u, p)``
together with its gradient in the stacked (x, u) variable, and declares a
Lipschitz constant ``rho`` for that gradient. The majorized offset cost
replaces the economic cost of the artificial periodic trajectory with its
first-order expansion about a reference trajectory plus ``rho/2`` times the
squared deviation, which upper-bounds the true offset cost whenever ``rho``
is a valid Lipschitz constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .ltv import PeriodicConstraintSet, PeriodicLTVSystem, sample_in_polytope

__all__ = [
    "TrackingWeights",
    "EconomicCostModel",
    "QuadraticReferenceCost",
    "InputPolynomialCost",
    "TableQuadraticCost",
    "CallableCost",
    "PlanPair",
    "tracking_stage_cost",
    "tracking_cost_S",
    "offset_cost_O",
    "approx_offset_cost",
    "majorization_gap",
    "estimate_rho",
    "grad_check",
]


def _check_spd(M: np.ndarray, name: str) -> np.ndarray:
    M = np.array(M, dtype=float, copy=True)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    eigmin = float(np.linalg.eigvalsh(M)[0])
    if eigmin <= 0.0:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {eigmin:g})")
    return M


@dataclass(frozen=True)
class TrackingWeights:
    """Positive-definite state/input weights of the tracking stage cost."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_spd(self.Q, "Q"))
        object.__setattr__(self, "R", _check_spd(self.R, "R"))

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]


class EconomicCostModel:
    """Base class: periodic economic stage cost with gradient and Lipschitz constant.

    Subclasses implement :meth:`stage` returning the value and the gradient
    stacked as one (n+m,) vector. ``rho`` must upper-bound the Lipschitz
    constant of that gradient over the relevant constraint set; the
    transcription uses it as the curvature of the majorized offset cost.
    """

    def __init__(self, period: int, n: int, m: int, rho: float):
        if period < 1:
            raise ValueError("period must be at least 1")
        if rho <= 0.0:
            raise ValueError("rho must be positive")
        self.period = int(period)
        self.n = int(n)
        self.m = int(m)
        self.rho = float(rho)

    def stage(self, k: int, x: np.ndarray, u: np.ndarray, p=None) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, k: int, x, u, p=None) -> float:
        return self.stage(k, x, u, p)[0]

    def gradient(self, k: int, x, u, p=None) -> np.ndarray:
        return self.stage(k, x, u, p)[1]

    def stage_batch(
        self, k0: int, xs: np.ndarray, us: np.ndarray, p=None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients along a trajectory; stage j uses time k0 + j."""
        xs = np.atleast_2d(xs)
        us = np.atleast_2d(us)
        L = xs.shape[0]
        vals = np.empty(L)
        grads = np.empty((L, self.n + self.m))
        for j in range(L):
            vals[j], grads[j] = self.stage(k0 + j, xs[j], us[j], p)
        return vals, grads

    def quadratic_form(self, k: int, p=None):
        """Exact representation ``(w - c)' W (w - c) + e`` over w = [x;u], or
        None when the stage cost is not quadratic."""
        return None


class QuadraticReferenceCost(EconomicCostModel):
    """Periodic quadratic state-reference cost ``|x - r_k|^2_E``.

    ``refs`` holds one reference state per phase. The exogenous parameter, when
    given, must be an n-vector added to every reference (a target shift).
    The gradient's Lipschitz constant is exactly 2 * lambda_max(E).
    """

    def __init__(self, E: np.ndarray, refs: np.ndarray, m: int):
        E = np.array(E, dtype=float, copy=True)
        refs = np.atleast_2d(np.array(refs, dtype=float, copy=True))
        n = E.shape[0]
        if E.shape != (n, n) or not np.allclose(E, E.T, atol=1e-12):
            raise ValueError("E must be square symmetric")
        if np.linalg.eigvalsh(E)[0] < -1e-12:
            raise ValueError("E must be positive semidefinite")
        if refs.shape[1] != n:
            raise ValueError("reference rows must match the state dimension")
        rho = 2.0 * float(np.linalg.eigvalsh(E)[-1])
        super().__init__(period=refs.shape[0], n=n, m=m, rho=max(rho, 1e-12))
        self.E = E
        self.refs = refs

    def _ref(self, k: int, p) -> np.ndarray:
        r = self.refs[k % self.period]
        if p is None:
            return r
        return r + np.asarray(p, dtype=float).reshape(-1)

    def stage(self, k, x, u, p=None):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        d = x - self._ref(k, p)
        Ed = self.E @ d
        grad = np.concatenate([2.0 * Ed, np.zeros(self.m)])
        return float(d @ Ed), grad

    def stage_batch(self, k0, xs, us, p=None):
        xs = np.atleast_2d(xs)
        L = xs.shape[0]
        idx = (k0 + np.arange(L)) % self.period
        refs = self.refs[idx]
        if p is not None:
            refs = refs + np.asarray(p, dtype=float).reshape(1, -1)
        d = xs - refs
        Ed = d @ self.E.T
        vals = np.einsum("ij,ij->i", d, Ed)
        grads = np.concatenate([2.0 * Ed, np.zeros((L, self.m))], axis=1)
        return vals, grads

    def quadratic_form(self, k, p=None):
        W = np.zeros((self.n + self.m, self.n + self.m))
        W[: self.n, : self.n] = self.E
        c = np.concatenate([self._ref(k, p), np.zeros(self.m)])
        return W, c, 0.0


def _poly_even_max_abs(coeffs: tuple[float, float, float], box: float) -> float:
    """Max of |2a + 12b t^2 + 30c t^4| over |t| <= box (second derivative of
    the even sextic a t^2 + b t^4 + c t^6), via stationary points + endpoints."""
    a, b, c = coeffs
    cand = [0.0, box]
    if abs(c) > 0:
        t2 = -b / (5.0 * c)  # root of the cubic third derivative
        if t2 > 0:
            t = np.sqrt(t2)
            if t <= box:
                cand.append(float(t))
    vals = [abs(2.0 * a + 12.0 * b * t * t + 30.0 * c * t**4) for t in cand]
    return max(vals)


class InputPolynomialCost(EconomicCostModel):
    """Quadratic state-reference cost plus an even sextic per-input penalty.

    The input term is ``sum_i a u_i^2 + b u_i^4 + c u_i^6`` (signs carried in
    the coefficients). Its gradient Lipschitz constant is computed
    analytically over a configurable operating box ``|u_i| <= input_box``;
    points outside the box may violate the declared bound, which the
    assumption validator reports. The exogenous parameter, when given, is a
    scalar in (0, 1] scaling the input term.
    """

    def __init__(
        self,
        E: np.ndarray,
        refs: np.ndarray,
        m: int,
        input_coeffs: tuple[float, float, float],
        input_box: float = 2.0,
    ):
        self._base = QuadraticReferenceCost(E, refs, m)
        if input_box <= 0.0:
            raise ValueError("input_box must be positive")
        rho_in = _poly_even_max_abs(input_coeffs, input_box)
        rho = max(self._base.rho, rho_in)
        super().__init__(period=self._base.period, n=self._base.n, m=m, rho=rho)
        self.E = self._base.E
        self.refs = self._base.refs
        self.input_coeffs = tuple(float(c) for c in input_coeffs)
        self.input_box = float(input_box)

    def input_term(self, u: np.ndarray, p=None) -> float:
        a, b, c = self.input_coeffs
        u = np.asarray(u, dtype=float).reshape(-1)
        scale = 1.0 if p is None else float(p)
        u2 = u * u
        return scale * float(np.sum(a * u2 + b * u2 * u2 + c * u2 * u2 * u2))

    def stage(self, k, x, u, p=None):
        val, grad = self._base.stage(k, x, u, None)
        a, b, c = self.input_coeffs
        u = np.asarray(u, dtype=float).reshape(-1)
        scale = 1.0 if p is None else float(p)
        u2 = u * u
        val += scale * float(np.sum(a * u2 + b * u2 * u2 + c * u2 * u2 * u2))
        grad = grad.copy()
        grad[self.n :] += scale * (2.0 * a * u + 4.0 * b * u2 * u + 6.0 * c * u2 * u2 * u)
        return val, grad

    def stage_batch(self, k0, xs, us, p=None):
        vals, grads = self._base.stage_batch(k0, xs, us, None)
        a, b, c = self.input_coeffs
        us = np.atleast_2d(us)
        scale = 1.0 if p is None else float(p)
        u2 = us * us
        vals = vals + scale * np.sum(a * u2 + b * u2 * u2 + c * u2 * u2 * u2, axis=1)
        grads = grads.copy()
        grads[:, self.n :] += scale * (2.0 * a * us + 4.0 * b * u2 * us + 6.0 * c * u2 * u2 * us)
        return vals, grads


class TableQuadraticCost(EconomicCostModel):
    """Table-driven time-varying quadratic ``(w - r_k)^T E_k (w - r_k)``, w = [x;u].

    One PSD matrix and one reference per phase. The exogenous parameter,
    when given, is an (n+m)-vector shifting every reference.
    """

    def __init__(self, E_list: Sequence[np.ndarray], ref_list: Sequence[np.ndarray], n: int, m: int):
        if len(E_list) != len(ref_list) or not E_list:
            raise ValueError("need one E and one reference per phase")
        d = n + m
        Es, refs = [], []
        lam = 0.0
        for E, r in zip(E_list, ref_list):
            E = np.array(E, dtype=float, copy=True)
            r = np.array(r, dtype=float, copy=True).reshape(-1)
            if E.shape != (d, d) or r.shape[0] != d:
                raise ValueError("table entries must act on the stacked (x,u) vector")
            if not np.allclose(E, E.T, atol=1e-12):
                raise ValueError("table matrices must be symmetric")
            w = np.linalg.eigvalsh(E)
            if w[0] < -1e-12:
                raise ValueError("table matrices must be positive semidefinite")
            lam = max(lam, float(w[-1]))
            Es.append(E)
            refs.append(r)
        super().__init__(period=len(Es), n=n, m=m, rho=max(2.0 * lam, 1e-12))
        self.E_list = Es
        self.ref_list = refs

    def stage(self, k, x, u, p=None):
        w = np.concatenate(
            [np.asarray(x, dtype=float).reshape(-1), np.asarray(u, dtype=float).reshape(-1)]
        )
        j = k % self.period
        r = self.ref_list[j]
        if p is not None:
            r = r + np.asarray(p, dtype=float).reshape(-1)
        d = w - r
        Ed = self.E_list[j] @ d
        return float(d @ Ed), 2.0 * Ed

    def quadratic_form(self, k, p=None):
        j = k % self.period
        r = self.ref_list[j]
        if p is not None:
            r = r + np.asarray(p, dtype=float).reshape(-1)
        return self.E_list[j].copy(), r.copy(), 0.0


class CallableCost(EconomicCostModel):
    """Adapter wrapping a (value, gradient) callable as a cost model."""

    def __init__(
        self,
        period: int,
        n: int,
        m: int,
        rho: float,
        fn: Callable[[int, np.ndarray, np.ndarray, object], tuple[float, np.ndarray]],
    ):
        super().__init__(period=period, n=n, m=m, rho=rho)
        self._fn = fn

    def stage(self, k, x, u, p=None):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        val, grad = self._fn(k % self.period, x, u, p)
        return float(val), np.asarray(grad, dtype=float).reshape(-1)


@dataclass(frozen=True)
class PlanPair:
    """Predicted plan over horizon N plus artificial periodic trajectory of period T.

    The predicted plan is the decision pair (x0, u_seq) together with its
    state rollout; the artificial trajectory stores the full per-phase state
    and input sequences. Both are anchored at time ``k``.
    """

    k: int
    x_states: np.ndarray  # (N+1, n) predicted states, x_states[0] = x0
    u_seq: np.ndarray  # (N, m)
    xa_states: np.ndarray  # (T, n)
    ua_seq: np.ndarray  # (T, m)

    def __post_init__(self):
        if self.N > self.T:
            raise ValueError("prediction horizon must not exceed the period")

    @property
    def N(self) -> int:
        return self.u_seq.shape[0]

    @property
    def T(self) -> int:
        return self.ua_seq.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.x_states[0]

    @property
    def xa0(self) -> np.ndarray:
        return self.xa_states[0]

    def artificial_rollout(self, system: PeriodicLTVSystem) -> np.ndarray:
        """States obtained by rolling the artificial inputs from xa0; (T+1, n)."""
        return system.rollout(self.k, self.xa_states[0], self.ua_seq)

    def is_dynamics_consistent(self, system: PeriodicLTVSystem, tol: float = 1e-7) -> bool:
        xs = system.rollout(self.k, self.x_states[0], self.u_seq)
        if np.max(np.abs(xs - self.x_states)) > tol:
            return False
        xas = self.artificial_rollout(system)
        if np.max(np.abs(xas[:-1] - self.xa_states)) > tol:
            return False
        return bool(np.max(np.abs(xas[-1] - self.xa_states[0])) <= tol)


def tracking_stage_cost(weights: TrackingWeights, v: np.ndarray, w: np.ndarray) -> float:
    """Weighted squared deviation ``v'Qv + w'Rw``."""
    v = np.asarray(v, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if v.shape[0] != weights.n or w.shape[0] != weights.m:
        raise ValueError("deviation dimensions must match the weights")
    return float(v @ weights.Q @ v + w @ weights.R @ w)


def tracking_cost_S(
    weights: TrackingWeights, plan: PlanPair, system: PeriodicLTVSystem
) -> float:
    """Total tracking cost between the predicted and artificial trajectories.

    Sums the stage cost of the deviations over the first N steps, using the
    dynamics rollouts of both trajectories.
    """
    xs = system.rollout(plan.k, plan.x_states[0], plan.u_seq)
    xas = plan.artificial_rollout(system)
    total = 0.0
    for i in range(plan.N):
        total += tracking_stage_cost(weights, xs[i] - xas[i], plan.u_seq[i] - plan.ua_seq[i])
    return total


def offset_cost_O(
    cost: EconomicCostModel, k: int, xa_states: np.ndarray, ua_seq: np.ndarray, p=None
) -> float:
    """Economic cost of the artificial trajectory summed over one period."""
    vals, _ = cost.stage_batch(k, np.atleast_2d(xa_states), np.atleast_2d(ua_seq), p)
    return float(np.sum(vals))


def approx_offset_cost(
    cost: EconomicCostModel,
    k: int,
    xa_states: np.ndarray,
    ua_seq: np.ndarray,
    xa_hat: np.ndarray,
    ua_hat: np.ndarray,
    p=None,
) -> float:
    """Majorized offset cost: first-order expansion about (xa_hat, ua_hat)
    plus rho/2 times the squared deviation, summed over one period."""
    W = np.concatenate([np.atleast_2d(xa_states), np.atleast_2d(ua_seq)], axis=1)
    What = np.concatenate([np.atleast_2d(xa_hat), np.atleast_2d(ua_hat)], axis=1)
    vals, grads = cost.stage_batch(k, np.atleast_2d(xa_hat), np.atleast_2d(ua_hat), p)
    D = W - What
    lin = np.einsum("ij,ij->i", grads, D)
    quad = 0.5 * cost.rho * np.einsum("ij,ij->i", D, D)
    return float(np.sum(vals + lin + quad))


def majorization_gap(
    cost: EconomicCostModel,
    k: int,
    xa_states: np.ndarray,
    ua_seq: np.ndarray,
    xa_hat: np.ndarray,
    ua_hat: np.ndarray,
    p=None,
) -> float:
    """Majorized minus true offset cost; nonnegative whenever rho is valid."""
    return approx_offset_cost(cost, k, xa_states, ua_seq, xa_hat, ua_hat, p) - offset_cost_O(
        cost, k, xa_states, ua_seq, p
    )


def estimate_rho(
    cost: EconomicCostModel,
    constraints: PeriodicConstraintSet,
    samples: int = 2000,
    rng: Optional[np.random.Generator] = None,
    safety: float = 1.1,
    p=None,
) -> float:
    """Sampled estimate of the gradient's Lipschitz constant.

    Draws point pairs inside each phase's polytope and returns the largest
    gradient-difference ratio times a safety factor. Cost models with an
    analytic constant should prefer it; this estimator converges from below.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = constraints.n
    per_phase = max(2, samples // constraints.T)
    worst = 0.0
    for k in range(constraints.T):
        pts = sample_in_polytope(constraints.G(k), constraints.h(k), rng, 2 * per_phase)
        for a, b in zip(pts[:per_phase], pts[per_phase:]):
            _, ga = cost.stage(k, a[:n], a[n:], p)
            _, gb = cost.stage(k, b[:n], b[n:], p)
            dist = float(np.linalg.norm(a - b))
            if dist > 1e-12:
                worst = max(worst, float(np.linalg.norm(ga - gb)) / dist)
    return safety * worst


def grad_check(
    cost: EconomicCostModel, k: int, x: np.ndarray, u: np.ndarray, p=None, h: float = 1e-4
) -> float:
    """Max abs error between the analytic gradient and central differences."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    w = np.concatenate([x, u])
    _, grad = cost.stage(k, x, u, p)
    n = x.shape[0]
    err = 0.0
    for i in range(w.shape[0]):
        e = np.zeros_like(w)
        e[i] = h
        wp, wm = w + e, w - e
        vp, _ = cost.stage(k, wp[:n], wp[n:], p)
        vm, _ = cost.stage(k, wm[:n], wm[n:], p)
        fd = (vp - vm) / (2.0 * h)
        err = max(err, abs(fd - grad[i]))
    return err
