"""Periodic linear time-varying dynamics, polytopic constraints, and
diagnostics for the standing assumptions of the control scheme."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "PeriodicLTVSystem",
    "PeriodicConstraintSet",
    "ControllabilityReport",
    "AssumptionReport",
    "controllability_check",
    "validate_assumptions",
    "sample_in_polytope",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class PeriodicLTVSystem:
    """Discrete-time system ``x+ = A_k x + B_k u`` with period-T matrix schedules.

    Schedules are stored densely (one matrix per phase) and indexed modulo T,
    so the system is defined for every integer time index. Instances are
    immutable after construction and safe to share between threads.
    """

    def __init__(self, A_sched: Sequence[np.ndarray], B_sched: Sequence[np.ndarray]):
        A_list = [np.array(A, dtype=float, copy=True) for A in A_sched]
        B_list = [np.array(B, dtype=float, copy=True) for B in B_sched]
        if not A_list or len(A_list) != len(B_list):
            raise ValueError("need one A and one B matrix per phase, at least one phase")
        n = A_list[0].shape[0]
        if A_list[0].shape != (n, n):
            raise ValueError(f"A matrices must be square, got {A_list[0].shape}")
        if B_list[0].ndim != 2 or B_list[0].shape[0] != n:
            raise ValueError(f"B matrices must have {n} rows, got {B_list[0].shape}")
        m = B_list[0].shape[1]
        for A, B in zip(A_list, B_list):
            if A.shape != (n, n) or B.shape != (n, m):
                raise ValueError("inconsistent matrix dimensions across the schedule")
        self.n = n
        self.m = m
        self.T = len(A_list)
        self._A = tuple(_freeze(A) for A in A_list)
        self._B = tuple(_freeze(B) for B in B_list)

    @classmethod
    def from_lti(cls, A: np.ndarray, B: np.ndarray, T: int) -> "PeriodicLTVSystem":
        """Embed a time-invariant pair as a period-T schedule."""
        if T < 1:
            raise ValueError("period must be at least 1")
        return cls([A] * T, [B] * T)

    def A(self, k: int) -> np.ndarray:
        return self._A[k % self.T]

    def B(self, k: int) -> np.ndarray:
        return self._B[k % self.T]

    def step(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Advance one sampling period: ``A_k x + B_k u``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.shape[0] != self.n or u.shape[0] != self.m:
            raise ValueError(
                f"state/input dimension mismatch: got {x.shape[0]}/{u.shape[0]}, "
                f"expected {self.n}/{self.m}"
            )
        return self.A(k) @ x + self.B(k) @ u

    def rollout(self, k: int, x0: np.ndarray, u_seq: np.ndarray) -> np.ndarray:
        """Roll the dynamics from ``x0`` through ``u_seq``; returns (L+1, n) states."""
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
        L = u_seq.shape[0]
        xs = np.empty((L + 1, self.n))
        xs[0] = np.asarray(x0, dtype=float).reshape(-1)
        for i in range(L):
            xs[i + 1] = self.step(k + i, xs[i], u_seq[i])
        return xs


class PeriodicConstraintSet:
    """Period-T schedule of polytopes ``Z_k = {(x,u) : G_k [x;u] <= h_k}``.

    Every polytope must contain the origin strictly in its interior
    (all h entries positive). Membership tolerance defaults to 1e-8,
    consistent with the QP solver feasibility tolerance.
    """

    def __init__(self, n: int, m: int, polytopes: Sequence[tuple[np.ndarray, np.ndarray]]):
        if not polytopes:
            raise ValueError("need at least one polytope")
        self.n = int(n)
        self.m = int(m)
        Gh = []
        for G, h in polytopes:
            G = np.array(G, dtype=float, copy=True)
            h = np.array(h, dtype=float, copy=True).reshape(-1)
            if G.ndim != 2 or G.shape[1] != n + m or G.shape[0] != h.shape[0]:
                raise ValueError(f"polytope rows must have {n + m} columns and matching h")
            if np.any(h <= 0.0):
                raise ValueError("each polytope must contain the origin strictly in its interior")
            Gh.append((_freeze(G), _freeze(h)))
        self.T = len(Gh)
        self._polytopes = tuple(Gh)

    @classmethod
    def from_bounds(
        cls,
        x_bound: np.ndarray,
        u_bound: np.ndarray,
        T: int,
    ) -> "PeriodicConstraintSet":
        """Box constraints ``|x_i| <= x_bound_i``, ``|u_i| <= u_bound_i`` replicated T times.

        Coordinates with a non-finite bound are left unconstrained.
        """
        x_bound = np.asarray(x_bound, dtype=float).reshape(-1)
        u_bound = np.asarray(u_bound, dtype=float).reshape(-1)
        n, m = x_bound.shape[0], u_bound.shape[0]
        rows, rhs = [], []
        for i, b in enumerate(np.concatenate([x_bound, u_bound])):
            if not np.isfinite(b):
                continue
            row = np.zeros(n + m)
            row[i] = 1.0
            rows.extend([row, -row])
            rhs.extend([b, b])
        G = np.array(rows)
        h = np.array(rhs)
        return cls(n, m, [(G, h)] * T)

    def G(self, k: int) -> np.ndarray:
        return self._polytopes[k % self.T][0]

    def h(self, k: int) -> np.ndarray:
        return self._polytopes[k % self.T][1]

    def contains(
        self, k: int, x: np.ndarray, u: np.ndarray, tol: float = 1e-8
    ) -> tuple[bool, float]:
        """Membership of (x, u) in Z_k; returns (inside, worst violation).

        The violation is ``max(G [x;u] - h)``; non-positive values mean the
        point is inside (possibly on the boundary).
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.shape[0] != self.n or u.shape[0] != self.m:
            raise ValueError("state/input dimension mismatch")
        G, h = self._polytopes[k % self.T]
        worst = float(np.max(G @ np.concatenate([x, u]) - h))
        return worst <= tol, worst


@dataclass(frozen=True)
class ControllabilityReport:
    """Result of the periodic reachability rank test.

    ``c_star`` is the smallest horizon extension c in [0, T-1] for which the
    reachability matrix has full rank n at every phase, or None if no such c
    exists. ``ranks`` holds the per-phase ranks at ``c_star`` (at c = T-1 when
    absent).
    """

    n: int
    c_star: Optional[int]
    ranks: tuple[int, ...]

    @property
    def controllable(self) -> bool:
        return self.c_star is not None


def controllability_check(
    system: PeriodicLTVSystem, rank_tol: Optional[float] = None
) -> ControllabilityReport:
    """Search for the smallest c such that rank(Gamma_k(c)) = n at every phase k.

    Gamma_k(c) stacks the influence of inputs u_k..u_{k+c} on the state at
    time k+c+1. Numerical rank uses singular values with the conventional
    threshold sigma_max * max(rows, cols) * machine epsilon unless
    ``rank_tol`` overrides it.
    """
    n, T = system.n, system.T
    # Gamma_k(c+1) = [A_{k+c+1} @ Gamma_k(c), B_{k+c+1}], grown incrementally.
    gammas = [np.array(system.B(k)) for k in range(T)]
    ranks = tuple(int(np.linalg.matrix_rank(g, tol=rank_tol)) for g in gammas)
    if all(r == n for r in ranks):
        return ControllabilityReport(n=n, c_star=0, ranks=ranks)
    for c in range(1, T):
        gammas = [
            np.hstack([system.A(k + c) @ gammas[k], system.B(k + c)]) for k in range(T)
        ]
        ranks = tuple(int(np.linalg.matrix_rank(g, tol=rank_tol)) for g in gammas)
        if all(r == n for r in ranks):
            return ControllabilityReport(n=n, c_star=c, ranks=ranks)
    return ControllabilityReport(n=n, c_star=None, ranks=ranks)


def sample_in_polytope(
    G: np.ndarray,
    h: np.ndarray,
    rng: np.random.Generator,
    count: int,
    default_half_width: float = 10.0,
    shrink: float = 1.0,
) -> np.ndarray:
    """Draw ``count`` points uniformly-ish inside {v : G v <= h} by rejection.

    A per-coordinate sampling box is derived from single-coefficient rows;
    coordinates the polytope leaves unbounded fall back to
    ``default_half_width``. ``shrink`` < 1 samples a scaled-down box, useful
    for strictly interior points. Raises RuntimeError when the acceptance
    rate suggests an empty (or vanishingly thin) set.
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float).reshape(-1)
    d = G.shape[1]
    lo = np.full(d, -default_half_width)
    hi = np.full(d, default_half_width)
    for r in range(G.shape[0]):
        nz = np.nonzero(G[r])[0]
        if nz.size != 1:
            continue
        i = nz[0]
        bound = h[r] / G[r, i]
        if G[r, i] > 0:
            hi[i] = min(hi[i], bound)
        else:
            lo[i] = max(lo[i], bound)
    if np.any(lo >= hi):
        raise RuntimeError("constraint set has empty sampling box")
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * shrink
    out = np.empty((count, d))
    got = 0
    attempts = 0
    while got < count:
        batch = max(count - got, 64)
        cand = mid + (2.0 * rng.random((batch, d)) - 1.0) * half
        ok = np.all(cand @ G.T <= h + 1e-12, axis=1)
        accepted = cand[ok]
        take = min(accepted.shape[0], count - got)
        out[got : got + take] = accepted[:take]
        got += take
        attempts += batch
        if attempts > 1000 * count + 10000:
            raise RuntimeError("rejection sampling failed; constraint set may be empty")
    return out


@dataclass
class AssumptionReport:
    """Pass/warn/fail status per standing assumption, with diagnostics.

    Deterministic checks (period agreement, controllability) report
    pass/fail; sampling-based checks (convexity, gradient Lipschitz bound,
    lower-boundedness) can only warn, never prove.
    """

    periodicity: str
    convexity: str
    lower_bounded: str
    lipschitz: str
    controllability: str
    notes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return "fail" not in (
            self.periodicity,
            self.convexity,
            self.lower_bounded,
            self.lipschitz,
            self.controllability,
        )


def validate_assumptions(
    system: PeriodicLTVSystem,
    constraints: PeriodicConstraintSet,
    cost,
    samples: int = 200,
    rng: Optional[np.random.Generator] = None,
    p=None,
) -> AssumptionReport:
    """Spot-check the scheme's standing assumptions on sampled points.

    Checks period agreement between system, constraints and cost; convexity
    of the economic stage cost along sampled segments; a sampled lower bound;
    sampled gradient-Lipschitz ratios against the cost's declared constant;
    and the periodic reachability rank condition.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    notes: dict = {}

    period_ok = system.T == constraints.T == cost.period
    notes["periods"] = (system.T, constraints.T, cost.period)
    periodicity = "pass" if period_ok else "fail"

    convexity = "pass"
    lipschitz = "pass"
    lower = "pass"
    sampled_min = np.inf
    if period_ok:
        n, m = system.n, system.m
        per_phase = max(4, samples // system.T)
        for k in range(system.T):
            pts = sample_in_polytope(constraints.G(k), constraints.h(k), rng, 2 * per_phase)
            a_pts, b_pts = pts[:per_phase], pts[per_phase:]
            for a, b in zip(a_pts, b_pts):
                va, ga = cost.stage(k, a[:n], a[n:], p)
                vb, gb = cost.stage(k, b[:n], b[n:], p)
                mid = 0.5 * (a + b)
                vm, _ = cost.stage(k, mid[:n], mid[n:], p)
                # midpoint convexity with a scale-aware slack
                slack = 1e-9 * (1.0 + abs(va) + abs(vb))
                if vm > 0.5 * (va + vb) + slack:
                    convexity = "warn"
                    notes.setdefault("convexity_violation", (k, float(vm - 0.5 * (va + vb))))
                dist = float(np.linalg.norm(a - b))
                if dist > 1e-12:
                    ratio = float(np.linalg.norm(ga - gb)) / dist
                    if ratio > cost.rho * (1.0 + 1e-7):
                        lipschitz = "warn"
                        notes.setdefault("lipschitz_excess", (k, ratio, cost.rho))
                sampled_min = min(sampled_min, va, vb, vm)
                # stage cost must repeat with the period on identical points
                vshift, _ = cost.stage(k + system.T, a[:n], a[n:], p)
                if abs(vshift - va) > 1e-9 * (1.0 + abs(va)):
                    periodicity = "fail"
                    notes.setdefault("cost_period_violation", k)
        if not np.isfinite(sampled_min):
            lower = "warn"
        notes["sampled_min"] = float(sampled_min)
    else:
        convexity = lipschitz = lower = "warn"

    ctrb = controllability_check(system)
    notes["c_star"] = ctrb.c_star
    controllability = "pass" if ctrb.controllable else "fail"

    return AssumptionReport(
        periodicity=periodicity,
        convexity=convexity,
        lower_bounded=lower,
        lipschitz=lipschitz,
        controllability=controllability,
        notes=notes,
    )
