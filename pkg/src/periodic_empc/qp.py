"""Sparse convex quadratic programming.

Two solution paths behind one problem type:

* :class:`QpSolver` / :func:`solve` — a first-order operator-splitting
  (ADMM) method with a cached sparse KKT factorization, warm starting,
  adaptive penalty, and an active-set polish step that refines the iterate
  to near-exact KKT residuals. Suited to the receding-horizon use where
  consecutive problems share their matrices.
* :func:`solve_oracle` — exhaustive active-set enumeration for tiny
  instances, exact up to linear-solve rounding. Used as an independent
  correctness reference in tests.

Problems are posed as ``min 1/2 w'Pw + q'w`` subject to ``Aeq w = beq`` and
``Ain w <= bin``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "OPTIMAL",
    "PRIMAL_INFEASIBLE",
    "MAX_ITERATIONS",
    "NUMERICAL_FAILURE",
    "QpProblem",
    "QpSolution",
    "SolverConfig",
    "WarmStart",
    "QpSolver",
    "solve",
    "solve_oracle",
    "condition_report",
    "dump_qp",
    "load_qp",
]

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal_infeasible"
MAX_ITERATIONS = "max_iterations"
NUMERICAL_FAILURE = "numerical_failure"


def _csc(M, shape=None) -> sp.csc_matrix:
    if M is None:
        M = sp.csc_matrix(shape)
    out = sp.csc_matrix(M)
    out.eliminate_zeros()
    out.sort_indices()
    return out


class QpProblem:
    """Standard-form sparse QP with split equality/inequality constraints.

    ``layout`` is an optional mapping from block names to (offset, length)
    pairs, carried through for diagnostics only.
    """

    def __init__(self, P, q, Aeq=None, beq=None, Ain=None, bin=None, layout=None,
                 validate: bool = True):
        self.q = np.asarray(q, dtype=float).reshape(-1)
        d = self.q.shape[0]
        self.P = _csc(P, (d, d))
        if self.P.shape != (d, d):
            raise ValueError(f"P must be {d}x{d}")
        self.Aeq = _csc(Aeq, (0, d))
        self.beq = (
            np.zeros(0) if beq is None else np.asarray(beq, dtype=float).reshape(-1)
        )
        self.Ain = _csc(Ain, (0, d))
        self.bin = (
            np.zeros(0) if bin is None else np.asarray(bin, dtype=float).reshape(-1)
        )
        if self.Aeq.shape != (self.beq.shape[0], d):
            raise ValueError("Aeq/beq dimensions inconsistent")
        if self.Ain.shape != (self.bin.shape[0], d):
            raise ValueError("Ain/bin dimensions inconsistent")
        self.layout = dict(layout) if layout else None
        if validate:
            self._validate()

    def _validate(self):
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-12 * (1.0 + abs(self.P).max()):
            raise ValueError("P must be symmetric")
        # PSD probe via dense Cholesky on small problems; larger instances are
        # built PSD by construction and skipped to keep setup cheap.
        if self.d <= 400:
            Pd = self.P.toarray()
            scale = max(1.0, float(np.abs(Pd).max()))
            try:
                np.linalg.cholesky(Pd + 1e-9 * scale * np.eye(self.d))
            except np.linalg.LinAlgError:
                raise ValueError("P must be positive semidefinite") from None

    @property
    def d(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.beq.shape[0]

    @property
    def n_in(self) -> int:
        return self.bin.shape[0]

    def objective(self, w: np.ndarray) -> float:
        w = np.asarray(w, dtype=float).reshape(-1)
        return float(0.5 * w @ (self.P @ w) + self.q @ w)


@dataclass
class QpSolution:
    w: np.ndarray
    status: str
    objective: float
    primal_residual: float
    dual_residual: float
    duals_eq: np.ndarray
    duals_in: np.ndarray
    iterations: int
    solve_time: float
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class WarmStart:
    w: np.ndarray
    duals_eq: np.ndarray
    duals_in: np.ndarray


@dataclass(frozen=True)
class SolverConfig:
    eps_feas: float = 1e-6
    eps_opt: float = 1e-6
    max_iterations: int = 20000
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    check_interval: int = 25
    infeas_tol: float = 1e-4
    polish: bool = True
    polish_reg: float = 1e-9
    polish_interval: int = 250  # mid-run exact-refinement attempts
    scaling_iters: int = 10
    warm_start: Optional[WarmStart] = None

    def __post_init__(self):
        if min(self.eps_feas, self.eps_opt) <= 0.0:
            raise ValueError("tolerances must be positive")

    def with_warm_start(self, ws: Optional[WarmStart]) -> "SolverConfig":
        return replace(self, warm_start=ws)


class QpSolver:
    """Operator-splitting QP solver with factorization reuse across solves.

    A solver instance owns a mutable workspace and must not be shared between
    threads; distinct instances are independent. When consecutive problems
    share P and the constraint matrices (the receding-horizon case), the KKT
    factorization and last penalty are reused automatically.
    """

    def __init__(self):
        self._kkt_key = None
        self._kkt_lu = None
        self._last_rho = None
        self._scale_key = None
        self._scaling = None

    # -- Ruiz equilibration (cached across solves sharing P and A) ----------

    def _get_scaling(self, P: sp.csc_matrix, A: sp.csc_matrix, iters: int):
        key = (
            P.data.tobytes(), P.indices.tobytes(), P.indptr.tobytes(),
            A.data.tobytes(), A.indices.tobytes(), A.indptr.tobytes(), iters,
        )
        if self._scale_key == key:
            return self._scaling
        d_dim = P.shape[0]
        mrows = A.shape[0]
        dvec = np.ones(d_dim)
        evec = np.ones(mrows)
        cost = 1.0
        Ps, As = P.copy(), A.copy()
        for _ in range(iters):
            colP = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(d_dim)
            colA = np.abs(As).max(axis=0).toarray().ravel() if (mrows and As.nnz) else np.zeros(d_dim)
            dv = np.maximum(colP, colA)
            dv[dv == 0.0] = 1.0
            dv = 1.0 / np.sqrt(dv)
            if mrows and As.nnz:
                de = np.abs(As).max(axis=1).toarray().ravel()
                de[de == 0.0] = 1.0
                de = 1.0 / np.sqrt(de)
            else:
                de = np.ones(mrows)
            Dv = sp.diags(dv)
            Ps = (Dv @ Ps @ Dv).tocsc()
            As = (sp.diags(de) @ As @ Dv).tocsc() if mrows else As
            dvec *= dv
            evec *= de
        # one-time cost normalization from P alone, so the scaling stays
        # independent of the (frequently updated) linear term
        colP = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(d_dim)
        mean_col = float(np.mean(colP[colP > 0.0])) if np.any(colP > 0.0) else 0.0
        if mean_col > 0.0:
            cost = float(np.clip(1.0 / mean_col, 1e-6, 1e6))
            Ps = (cost * Ps).tocsc()
        scaling = (Ps, As, dvec, evec, cost)
        self._scale_key = key
        self._scaling = scaling
        return scaling

    # -- factorization cache ------------------------------------------------

    def _factor(self, P, A, sigma, rho_vec):
        key = (
            P.data.tobytes(), P.indices.tobytes(), P.indptr.tobytes(),
            A.data.tobytes(), A.indices.tobytes(), A.indptr.tobytes(),
            float(sigma), rho_vec.tobytes(),
        )
        if self._kkt_key == key and self._kkt_lu is not None:
            return self._kkt_lu
        d = P.shape[0]
        mrows = A.shape[0]
        if mrows:
            K = sp.bmat(
                [
                    [P + sigma * sp.identity(d, format="csc"), A.T],
                    [A, -sp.diags(1.0 / rho_vec)],
                ],
                format="csc",
            )
        else:
            K = (P + sigma * sp.identity(d, format="csc")).tocsc()
        lu = spla.splu(K)
        self._kkt_key = key
        self._kkt_lu = lu
        return lu

    # -- main entry ---------------------------------------------------------

    def solve(self, problem: QpProblem, config: Optional[SolverConfig] = None) -> QpSolution:
        cfg = config if config is not None else SolverConfig()
        t0 = time.perf_counter()
        d = problem.d
        e, r = problem.n_eq, problem.n_in
        m = e + r
        A = sp.vstack([problem.Aeq, problem.Ain], format="csc") if m else _csc(None, (0, d))
        A.sort_indices()
        lb = np.concatenate([problem.beq, np.full(r, -np.inf)])
        ub = np.concatenate([problem.beq, problem.bin])

        # iterate on the Ruiz-equilibrated problem; all termination checks
        # are evaluated in original units
        if cfg.scaling_iters > 0:
            Ps, As, dvec, evec, cscale = self._get_scaling(problem.P, A, cfg.scaling_iters)
        else:
            Ps, As = problem.P, A
            dvec, evec, cscale = np.ones(d), np.ones(m), 1.0
        qs = cscale * (dvec * problem.q)
        lbs = evec * lb
        ubs = evec * ub
        inv_cd = 1.0 / (cscale * dvec)

        rho_scalar = cfg.rho if self._last_rho is None else self._last_rho
        rho_vec = np.full(m, rho_scalar)
        rho_vec[:e] *= cfg.rho_eq_scale

        if cfg.warm_start is not None:
            w0 = np.asarray(cfg.warm_start.w, dtype=float)
            y0 = np.concatenate(
                [np.asarray(cfg.warm_start.duals_eq, dtype=float),
                 np.asarray(cfg.warm_start.duals_in, dtype=float)]
            )
            if w0.shape[0] != d or y0.shape[0] != m:
                raise ValueError("warm start dimensions do not match the problem")
            w = w0 / dvec
            y = cscale * y0 / evec if m else np.zeros(0)
        else:
            w = np.zeros(d)
            y = np.zeros(m)
        z = np.clip(As @ w, lbs, ubs) if m else np.zeros(0)

        try:
            lu = self._factor(Ps, As, cfg.sigma, rho_vec)
        except RuntimeError:
            return self._failure(problem, dvec * w, evec * y / cscale if m else y, e, t0,
                                 "kkt factorization failed")

        status = MAX_ITERATIONS
        iters = 0
        infeas_cert = None
        early_polish = False
        for it in range(1, cfg.max_iterations + 1):
            iters = it
            if m:
                rhs = np.concatenate([cfg.sigma * w - qs, z - y / rho_vec])
                sol = lu.solve(rhs)
                w_tilde, nu = sol[:d], sol[d:]
                z_tilde = z + (nu - y) / rho_vec
                w_new = cfg.alpha * w_tilde + (1.0 - cfg.alpha) * w
                z_pre = cfg.alpha * z_tilde + (1.0 - cfg.alpha) * z
                z_new = np.clip(z_pre + y / rho_vec, lbs, ubs)
                y_new = y + rho_vec * (z_pre - z_new)
                dy = y_new - y
                w, z, y = w_new, z_new, y_new
            else:
                rhs = cfg.sigma * w - qs
                w = cfg.alpha * lu.solve(rhs) + (1.0 - cfg.alpha) * w
                dy = np.zeros(0)

            if it % cfg.check_interval and it != cfg.max_iterations:
                continue
            if not np.all(np.isfinite(w)):
                return self._failure(problem, dvec * w, evec * y / cscale if m else y,
                                     e, t0, "iterate diverged")
            # unscaled residuals
            Aw = (As @ w) / evec if m else np.zeros(0)
            zu = z / evec if m else np.zeros(0)
            Pw = (Ps @ w) * inv_cd
            Aty = (As.T @ y) * inv_cd if m else np.zeros(d)
            r_p = float(np.max(np.abs(Aw - zu))) if m else 0.0
            r_d = float(np.max(np.abs(Pw + problem.q + Aty)))
            s_p = max(float(np.max(np.abs(Aw))) if m else 0.0,
                      float(np.max(np.abs(zu))) if m else 0.0)
            s_d = max(float(np.max(np.abs(Pw))), float(np.max(np.abs(Aty))),
                      float(np.max(np.abs(problem.q))) if d else 0.0)
            if r_p <= cfg.eps_feas * (1.0 + s_p) and r_d <= cfg.eps_opt * (1.0 + s_d):
                status = OPTIMAL
                break
            # the split iteration identifies the active set long before its
            # residuals settle; a successful exact refinement of that guess
            # certifies optimality and ends the run early
            if cfg.polish and cfg.polish_interval and it % cfg.polish_interval == 0:
                active0 = (
                    np.flatnonzero(z[e:] >= ubs[e:] - 1e-12 * (1.0 + np.abs(ubs[e:])))
                    if r
                    else np.array([], dtype=int)
                )
                cand = self._polish(problem, A, ub, e, dvec * w,
                                    evec * y / cscale if m else y, cfg, active0=active0)
                if cand is not None and self._kkt_ok(problem, A, lb, ub, cand[0], cand[1], cfg):
                    w = cand[0] / dvec
                    y = cscale * cand[1] / evec if m else cand[1]
                    status = OPTIMAL
                    early_polish = True
                    break
            if m:
                dy_u = evec * dy / cscale
                norm_dy = float(np.max(np.abs(dy_u)))
                if norm_dy > 1e-12:
                    Atdy = (As.T @ dy) * inv_cd / norm_dy
                    cert = self._primal_infeasibility(
                        dy_u / norm_dy, Atdy, lb, ub, cfg.infeas_tol
                    )
                    if cert is not None:
                        status = PRIMAL_INFEASIBLE
                        infeas_cert = cert
                        break
            if cfg.adaptive_rho and m:
                ratio = np.sqrt(
                    (r_p / (s_p + 1e-10)) / max(r_d / (s_d + 1e-10), 1e-12)
                )
                new_rho = float(np.clip(rho_scalar * ratio, 1e-6, 1e6))
                if new_rho > 5.0 * rho_scalar or new_rho < rho_scalar / 5.0:
                    rho_scalar = new_rho
                    rho_vec = np.full(m, rho_scalar)
                    rho_vec[:e] *= cfg.rho_eq_scale
                    lu = self._factor(Ps, As, cfg.sigma, rho_vec)
        self._last_rho = rho_scalar

        # back to original units
        w = dvec * w
        y = evec * y / cscale if m else np.zeros(0)

        if status == PRIMAL_INFEASIBLE:
            return QpSolution(
                w=w, status=PRIMAL_INFEASIBLE, objective=np.nan,
                primal_residual=np.inf, dual_residual=np.inf,
                duals_eq=y[:e], duals_in=y[e:], iterations=iters,
                solve_time=time.perf_counter() - t0,
                info={"certificate": infeas_cert, "rho": rho_scalar},
            )

        polished = early_polish
        if cfg.polish and status == OPTIMAL and not early_polish:
            resid_now = self._kkt_residuals(problem, A, lb, ub, w, y)
            active0 = (
                np.flatnonzero(z[e:] >= ubs[e:] - 1e-12 * (1.0 + np.abs(ubs[e:])))
                if r
                else np.array([], dtype=int)
            )
            out = self._polish(problem, A, ub, e, w, y, cfg, active0=active0)
            if out is not None:
                w2, y2 = out
                resid_new = self._kkt_residuals(problem, A, lb, ub, w2, y2)
                if max(resid_new) <= max(resid_now):
                    w, y = w2, y2
                    polished = True

        Aw = A @ w if m else np.zeros(0)
        Pw = problem.P @ w
        Aty = A.T @ y if m else np.zeros(d)
        viol_up = np.maximum(Aw - ub, 0.0) if m else np.zeros(0)
        viol_lo = np.maximum(lb - Aw, 0.0) if m else np.zeros(0)
        r_p = float(max(viol_up.max() if m else 0.0, viol_lo.max() if m else 0.0))
        r_d = float(np.max(np.abs(Pw + problem.q + Aty)))
        s_p = max(float(np.max(np.abs(Aw))) if m else 0.0, 1e-30)
        s_d = max(float(np.max(np.abs(Pw))), float(np.max(np.abs(Aty))),
                  float(np.max(np.abs(problem.q))) if d else 0.0)

        return QpSolution(
            w=w,
            status=status,
            objective=problem.objective(w),
            primal_residual=r_p / (1.0 + s_p),
            dual_residual=r_d / (1.0 + s_d),
            duals_eq=y[:e],
            duals_in=y[e:],
            iterations=iters,
            solve_time=time.perf_counter() - t0,
            info={"rho": rho_scalar, "polished": polished},
        )

    # -- helpers ------------------------------------------------------------

    @staticmethod
    def _failure(problem, w, y, e, t0, msg) -> QpSolution:
        return QpSolution(
            w=w, status=NUMERICAL_FAILURE, objective=np.nan,
            primal_residual=np.inf, dual_residual=np.inf,
            duals_eq=y[:e], duals_in=y[e:], iterations=0,
            solve_time=time.perf_counter() - t0, info={"message": msg},
        )

    @staticmethod
    def _primal_infeasibility(v, Atv, lb, ub, tol):
        """Divergence certificate for an empty feasible set.

        ``v`` is the normalized dual-step direction and ``Atv`` the matching
        normalized constraint-transpose image, both in original units.
        """
        if float(np.max(np.abs(Atv))) > tol:
            return None
        pos = np.maximum(v, 0.0)
        neg = np.minimum(v, 0.0)
        unbounded_lo = ~np.isfinite(lb)
        if np.any(neg[unbounded_lo] < -tol):
            return None
        neg = np.where(unbounded_lo, 0.0, neg)
        support = float(ub @ pos + np.where(np.isfinite(lb), lb, 0.0) @ neg)
        if support <= -tol:
            return v
        return None

    @staticmethod
    def _kkt_ok(problem, A, lb, ub, w, y, cfg) -> bool:
        """Full KKT validation of a candidate in original units."""
        m = A.shape[0]
        d = problem.d
        Aw = A @ w if m else np.zeros(0)
        Pw = problem.P @ w
        Aty = A.T @ y if m else np.zeros(d)
        prim = float(max(np.max(np.maximum(Aw - ub, 0.0)) if m else 0.0,
                         np.max(np.maximum(lb - Aw, 0.0)) if m else 0.0))
        dual = float(np.max(np.abs(Pw + problem.q + Aty)))
        s_p = float(np.max(np.abs(Aw))) if m else 0.0
        s_d = max(float(np.max(np.abs(Pw))), float(np.max(np.abs(Aty))),
                  float(np.max(np.abs(problem.q))) if d else 0.0)
        e = problem.n_eq
        lam_ok = (not m) or float(np.min(y[e:], initial=0.0)) >= -cfg.eps_opt
        return (
            lam_ok
            and prim <= cfg.eps_feas * (1.0 + s_p)
            and dual <= cfg.eps_opt * (1.0 + s_d)
        )

    @staticmethod
    def _kkt_residuals(problem, A, lb, ub, w, y):
        m = A.shape[0]
        Aw = A @ w if m else np.zeros(0)
        prim = float(max(np.max(np.maximum(Aw - ub, 0.0)) if m else 0.0,
                         np.max(np.maximum(lb - Aw, 0.0)) if m else 0.0))
        dual = float(np.max(np.abs(problem.P @ w + problem.q + (A.T @ y if m else 0.0))))
        return prim, dual

    def _polish(self, problem, A, ub, e, w, y, cfg, active0=None):
        """Refine an iterate by solving the equality-constrained QP of a
        guessed active set, with regularized factorization and iterative
        refinement.

        The guess is corrected by adding all violated rows and dropping the
        single most negative multiplier per round (one-at-a-time drops avoid
        the oscillation bulk updates are prone to). Returns None when no
        trustworthy candidate emerges within the round budget.
        """
        r = A.shape[0] - e
        d = problem.d
        if active0 is not None:
            active = np.asarray(active0, dtype=int)
        elif r:
            y_in = y[e:]
            slack = ub[e:] - (A[e:] @ w)
            ytol = 1e-9 * max(1.0, float(np.max(np.abs(y_in))))
            active = np.flatnonzero(
                (y_in > ytol) | (slack <= 1e-6 * (1.0 + np.abs(ub[e:])))
            )
        else:
            active = np.array([], dtype=int)

        for _ in range(8):
            G = sp.vstack([A[:e], A[e:][active]], format="csc") if (e + active.size) else None
            b = np.concatenate([ub[:e], ub[e:][active]])
            na = b.shape[0]
            if na:
                K = sp.bmat(
                    [
                        [problem.P + cfg.polish_reg * sp.identity(d, format="csc"), G.T],
                        [G, -cfg.polish_reg * sp.identity(na, format="csc")],
                    ],
                    format="csc",
                )
                K_exact = sp.bmat([[problem.P, G.T], [G, None]], format="csc")
            else:
                K = (problem.P + cfg.polish_reg * sp.identity(d, format="csc")).tocsc()
                K_exact = problem.P.tocsc()
            rhs = np.concatenate([-problem.q, b])
            try:
                lu = spla.splu(K)
            except RuntimeError:
                return None
            sol = lu.solve(rhs)
            for _ in range(3):
                sol = sol + lu.solve(rhs - K_exact @ sol)
            if not np.all(np.isfinite(sol)):
                return None
            if float(np.max(np.abs(K_exact @ sol - rhs))) > 1e-6 * (
                1.0 + float(np.max(np.abs(rhs)))
            ):
                return None  # degenerate active set, refinement did not settle
            w2 = sol[:d]
            lam_act = sol[d + e :] if na else np.zeros(0)
            slack2 = ub[e:] - (A[e:] @ w2) if r else np.zeros(0)
            violated = (
                np.setdiff1d(
                    np.flatnonzero(slack2 < -1e-9 * (1.0 + np.abs(ub[e:]))), active
                )
                if r
                else np.array([], dtype=int)
            )
            if violated.size:
                active = np.union1d(active, violated)
                continue
            lam_scale = max(1.0, float(np.max(np.abs(lam_act))) if lam_act.size else 0.0)
            negative = np.flatnonzero(lam_act < -1e-9 * lam_scale)
            if negative.size:
                worst = negative[np.argmin(lam_act[negative])]
                active = np.delete(active, worst)
                continue
            y2 = np.zeros(A.shape[0])
            y2[:e] = sol[d : d + e]
            if active.size:
                y2[e + active] = np.maximum(lam_act, 0.0)
            return w2, y2
        return None


def solve(problem: QpProblem, config: Optional[SolverConfig] = None) -> QpSolution:
    """One-shot solve with a fresh workspace."""
    return QpSolver().solve(problem, config)


def solve_oracle(problem: QpProblem, feas_tol: float = 1e-8) -> QpSolution:
    """Exact reference solver for tiny QPs by active-set enumeration.

    Every subset of the inequality constraints is treated as equalities and
    the resulting KKT system solved directly; candidates are filtered by
    primal feasibility and dual sign, and the best objective wins. Ties go to
    the lexicographically smallest active set, which makes the result
    deterministic. Refuses instances beyond d = 12 variables or 16
    inequality rows.
    """
    t0 = time.perf_counter()
    d, e, r = problem.d, problem.n_eq, problem.n_in
    if d > 12 or r > 16:
        raise ValueError("oracle accepts at most 12 variables and 16 inequalities")
    P = problem.P.toarray()
    Aeq = problem.Aeq.toarray()
    Ain = problem.Ain.toarray()
    q, beq, bin_ = problem.q, problem.beq, problem.bin
    scale_b = 1.0 + (float(np.max(np.abs(bin_))) if r else 0.0)

    best = None  # (objective, active tuple, w, y_eq, lam_full)
    for mask in range(1 << r):
        act = tuple(i for i in range(r) if mask >> i & 1)
        G = np.vstack([Aeq, Ain[list(act)]]) if (e + len(act)) else np.zeros((0, d))
        b = np.concatenate([beq, bin_[list(act)]])
        na = b.shape[0]
        K = np.zeros((d + na, d + na))
        K[:d, :d] = P
        K[:d, d:] = G.T
        K[d:, :d] = G
        rhs = np.concatenate([-q, b])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if not np.all(np.isfinite(sol)):
            continue
        if float(np.max(np.abs(K @ sol - rhs))) > 1e-7 * (1.0 + float(np.max(np.abs(rhs)))):
            continue  # inconsistent active set
        w = sol[:d]
        lam = sol[d + e :]
        if np.any(lam < -1e-8):
            continue
        if e and float(np.max(np.abs(Aeq @ w - beq))) > feas_tol * scale_b:
            continue
        if r and float(np.max(Ain @ w - bin_)) > feas_tol * scale_b:
            continue
        obj = problem.objective(w)
        if (
            best is None
            or obj < best[0] - 1e-12 * (1.0 + abs(best[0]))
            or (abs(obj - best[0]) <= 1e-9 * (1.0 + abs(best[0])) and act < best[1])
        ):
            lam_full = np.zeros(r)
            lam_full[list(act)] = np.maximum(lam, 0.0)
            best = (obj, act, w, sol[d : d + e], lam_full)

    if best is None:
        return QpSolution(
            w=np.full(d, np.nan), status=PRIMAL_INFEASIBLE, objective=np.nan,
            primal_residual=np.inf, dual_residual=np.inf,
            duals_eq=np.zeros(e), duals_in=np.zeros(r), iterations=1 << r,
            solve_time=time.perf_counter() - t0, info={"method": "active-set enumeration"},
        )
    obj, act, w, y_eq, lam = best
    dual = float(np.max(np.abs(P @ w + q + Aeq.T @ y_eq + Ain.T @ lam))) if d else 0.0
    prim = 0.0
    if e:
        prim = max(prim, float(np.max(np.abs(Aeq @ w - beq))))
    if r:
        prim = max(prim, float(np.max(np.maximum(Ain @ w - bin_, 0.0))))
    return QpSolution(
        w=w, status=OPTIMAL, objective=obj, primal_residual=prim, dual_residual=dual,
        duals_eq=y_eq, duals_in=lam, iterations=1 << r,
        solve_time=time.perf_counter() - t0,
        info={"method": "active-set enumeration", "active_set": act},
    )


def condition_report(problem: QpProblem) -> dict:
    """Extreme eigenvalue estimates of P and constraint matrix norms."""
    d = problem.d
    if d <= 600:
        eigs = np.linalg.eigvalsh(problem.P.toarray())
        lam_min, lam_max = float(eigs[0]), float(eigs[-1])
    else:
        # deterministic power iteration for the extremes
        v = np.ones(d) / np.sqrt(d)
        for _ in range(100):
            v = problem.P @ v
            nrm = np.linalg.norm(v)
            if nrm < 1e-300:
                break
            v /= nrm
        lam_max = float(v @ (problem.P @ v))
        shifted = sp.identity(d, format="csc") * lam_max - problem.P
        v = np.ones(d) / np.sqrt(d)
        for _ in range(100):
            v = shifted @ v
            nrm = np.linalg.norm(v)
            if nrm < 1e-300:
                break
            v /= nrm
        lam_min = lam_max - float(v @ (shifted @ v))
    return {
        "lambda_min": lam_min,
        "lambda_max": lam_max,
        "ratio": lam_max / lam_min if lam_min > 0 else np.inf,
        "norm_Aeq": float(abs(problem.Aeq).max()) if problem.n_eq else 0.0,
        "norm_Ain": float(abs(problem.Ain).max()) if problem.n_in else 0.0,
        "nnz_P": int(problem.P.nnz),
    }


# -- text serialization (bit-exact) -----------------------------------------


def _dump_sparse(lines, name, M: sp.csc_matrix):
    coo = M.tocoo()
    lines.append(f"{name} {coo.nnz} {M.shape[0]} {M.shape[1]}")
    order = np.lexsort((coo.col, coo.row))
    for idx in order:
        lines.append(f"{coo.row[idx]} {coo.col[idx]} {float(coo.data[idx]).hex()}")


def _dump_vec(lines, name, v: np.ndarray):
    lines.append(f"{name} {v.shape[0]}")
    for x in v:
        lines.append(float(x).hex())


def dump_qp(problem: QpProblem) -> str:
    """Self-describing text form; floats in hex so round-trips are bit-exact."""
    lines = ["qpdump 1", f"dims {problem.d} {problem.n_eq} {problem.n_in}"]
    _dump_sparse(lines, "P", problem.P)
    _dump_vec(lines, "q", problem.q)
    _dump_sparse(lines, "Aeq", problem.Aeq)
    _dump_vec(lines, "beq", problem.beq)
    _dump_sparse(lines, "Ain", problem.Ain)
    _dump_vec(lines, "bin", problem.bin)
    if problem.layout is not None:
        lines.append("layout " + json.dumps(problem.layout, sort_keys=True))
    lines.append("end")
    return "\n".join(lines) + "\n"


def load_qp(text: str) -> QpProblem:
    lines = text.strip().splitlines()
    if lines[0].split() != ["qpdump", "1"]:
        raise ValueError("not a qpdump v1 payload")
    pos = 1
    tag, d, e, r = lines[pos].split()
    if tag != "dims":
        raise ValueError("missing dims header")
    d, e, r = int(d), int(e), int(r)
    pos += 1

    def read_sparse(pos):
        name, nnz, rows, cols = lines[pos].split()
        nnz, rows, cols = int(nnz), int(rows), int(cols)
        pos += 1
        ri = np.empty(nnz, dtype=int)
        ci = np.empty(nnz, dtype=int)
        vals = np.empty(nnz)
        for i in range(nnz):
            a, b, c = lines[pos + i].split()
            ri[i], ci[i], vals[i] = int(a), int(b), float.fromhex(c)
        M = sp.coo_matrix((vals, (ri, ci)), shape=(rows, cols)).tocsc()
        return M, pos + nnz

    def read_vec(pos):
        _, length = lines[pos].split()
        length = int(length)
        pos += 1
        v = np.array([float.fromhex(lines[pos + i]) for i in range(length)])
        return v, pos + length

    P, pos = read_sparse(pos)
    q, pos = read_vec(pos)
    Aeq, pos = read_sparse(pos)
    beq, pos = read_vec(pos)
    Ain, pos = read_sparse(pos)
    bin_, pos = read_vec(pos)
    layout = None
    if lines[pos].startswith("layout "):
        layout = json.loads(lines[pos][len("layout "):])
        pos += 1
    if lines[pos] != "end":
        raise ValueError("missing end marker")
    return QpProblem(P, q, Aeq, beq, Ain, bin_, layout=layout, validate=False)
