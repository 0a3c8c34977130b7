"""Dense/sparse convex QP solver used by both control layers.

Solves

    minimize   1/2 z' P z + q' z
    subject to l <= A z <= u

with an operator-splitting (ADMM) iteration, residual-based termination and
an optional active-set polishing step.  The KKT system is factorized once per
(P, A, rho) structure, so repeated solves with changing (q, l, u) — the MPC
use case — are cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

_RHO_EQ_SCALE = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6


class QpStatus(Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class QpProblem:
    """Problem data; ``p`` is symmetrized on construction."""

    p: np.ndarray
    q: np.ndarray
    a: np.ndarray
    l: np.ndarray
    u: np.ndarray
    variable_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        p = sp.csc_matrix(self.p)
        self.p = ((p + p.T) * 0.5).tocsc()
        self.a = sp.csc_matrix(self.a)
        self.q = np.asarray(self.q, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n = self.p.shape[0]
        m = self.a.shape[0]
        if self.q.shape != (n,) or self.a.shape[1] != n:
            raise ValueError("inconsistent dimensions")
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("bound vectors must have one entry per constraint row")
        if np.any(self.l > self.u):
            raise ValueError("l <= u must hold componentwise")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def m(self) -> int:
        return self.a.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.p @ z) + self.q @ z)


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho_interval: int = 50
    check_interval: int = 10
    scaling_iters: int = 10
    eps_infeas: float = 1e-8
    polish: bool = True
    polish_reg: float = 1e-9


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    polished: bool = False


class AdmmQpSolver:
    """Reusable solver bound to a fixed (P, A) structure.

    ``solve`` may be called repeatedly with new (q, l, u) and optional warm
    start; the scaled KKT factorization is reused across calls.
    """

    def __init__(self, p, a, settings: Optional[QpSettings] = None):
        self.settings = settings or QpSettings()
        p = sp.csc_matrix(p)
        self.p = ((p + p.T) * 0.5).tocsc()
        self.a = sp.csc_matrix(a)
        self.n = self.p.shape[0]
        self.m = self.a.shape[0]
        self._equilibrate()
        self._rho_scalar = self.settings.rho
        self._factor = None
        self._rho_vec = None

    # -- scaling ------------------------------------------------------------

    def _equilibrate(self):
        """Modified Ruiz equilibration of [[P, A'], [A, 0]]."""
        n, m = self.n, self.m
        d = np.ones(n)
        e = np.ones(m)
        p, a = self.p.copy(), self.a.copy()
        for _ in range(self.settings.scaling_iters):
            # column inf-norms of the scaled KKT blocks
            norm_cols_n = np.maximum(
                np.abs(p).max(axis=0).toarray().ravel() if p.nnz else np.zeros(n),
                np.abs(a).max(axis=0).toarray().ravel() if a.nnz else np.zeros(n),
            )
            norm_cols_m = (
                np.abs(a).max(axis=1).toarray().ravel() if a.nnz else np.zeros(m)
            )
            dd = 1.0 / np.sqrt(np.maximum(norm_cols_n, 1e-8))
            ee = 1.0 / np.sqrt(np.maximum(norm_cols_m, 1e-8))
            dmat = sp.diags(dd)
            emat = sp.diags(ee)
            p = (dmat @ p @ dmat).tocsc()
            a = (emat @ a @ dmat).tocsc()
            d *= dd
            e *= ee
        if p.nnz:
            col_norms = np.abs(p).max(axis=0).toarray().ravel()
            mean_norm = col_norms[col_norms > 0].mean() if np.any(col_norms > 0) else 1.0
            c = 1.0 / max(mean_norm, 1e-8)
        else:
            c = 1.0
        self._d, self._e, self._c = d, e, c
        self._ps = (p * c).tocsc()
        self._as = a.tocsc()

    def _build_rho(self, rho_scalar, l, u):
        rho = np.full(self.m, rho_scalar)
        eq = (u - l) < 1e-10
        rho[eq] = min(rho_scalar * _RHO_EQ_SCALE, _RHO_MAX)
        return rho

    def _factorize(self, rho_vec):
        kkt = sp.bmat(
            [
                [self._ps + self.settings.sigma * sp.eye(self.n), self._as.T],
                [self._as, -sp.diags(1.0 / rho_vec)],
            ],
            format="csc",
        )
        self._factor = spla.splu(kkt)
        self._rho_vec = rho_vec

    # -- main loop ----------------------------------------------------------

    def solve(self, q, l, u, z0=None, y0=None) -> QpSolution:
        st = self.settings
        n, m = self.n, self.m
        q = np.asarray(q, dtype=float)
        l = np.asarray(l, dtype=float)
        u = np.asarray(u, dtype=float)

        # scaled problem data
        qs = self._c * self._d * q
        ls = self._e * l
        us = self._e * u

        self._eq_mask = (us - ls) < 1e-10
        rho = self._build_rho(self._rho_scalar, ls, us)
        if self._factor is None or not np.array_equal(rho, self._rho_vec):
            self._factorize(rho)

        x = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float) / self._d
        y = (
            np.zeros(m)
            if y0 is None
            else np.asarray(y0, dtype=float) * self._c / self._e
        )
        zeta = np.clip(self._as @ x, ls, us)

        rhs = np.empty(n + m)
        status = QpStatus.MAX_ITER
        r_prim = r_dual = np.inf
        iters = 0
        for it in range(1, st.max_iter + 1):
            iters = it
            x_prev, zeta_prev, y_prev = x, zeta, y
            rhs[:n] = st.sigma * x - qs
            rhs[n:] = zeta - y / rho
            sol = self._factor.solve(rhs)
            x_tilde = sol[:n]
            zeta_tilde = zeta + (sol[n:] - y) / rho
            x = st.alpha * x_tilde + (1 - st.alpha) * x
            zt = st.alpha * zeta_tilde + (1 - st.alpha) * zeta
            zeta = np.clip(zt + y / rho, ls, us)
            y = y + rho * (zt - zeta)

            if it % st.check_interval == 0 or it == st.max_iter:
                z_un = self._d * x
                zeta_un = zeta / self._e
                y_un = y * self._e / self._c
                az = self.a @ z_un
                pz = self.p @ z_un
                aty = self.a.T @ y_un
                r_prim = np.max(np.abs(az - zeta_un)) if m else 0.0
                r_dual = np.max(np.abs(pz + q + aty))
                eps_prim = st.eps_abs + st.eps_rel * max(
                    np.max(np.abs(az)) if m else 0.0,
                    np.max(np.abs(zeta_un)) if m else 0.0,
                )
                eps_dual = st.eps_abs + st.eps_rel * max(
                    np.max(np.abs(pz)),
                    np.max(np.abs(aty)) if m else 0.0,
                    np.max(np.abs(q)),
                )
                if r_prim <= eps_prim and r_dual <= eps_dual:
                    status = QpStatus.SOLVED
                    break
                if self._primal_infeasible(y - y_prev, l, u):
                    status = QpStatus.PRIMAL_INFEASIBLE
                    break
                if self._dual_infeasible(x - x_prev, q, l, u):
                    status = QpStatus.DUAL_INFEASIBLE
                    break

            if st.adaptive_rho_interval and it % st.adaptive_rho_interval == 0:
                self._maybe_rescale(x, zeta, y, q, rho)
                rho = self._rho_vec

        z_un = self._d * x
        y_un = y * self._e / self._c
        sol = QpSolution(
            z=z_un,
            y=y_un,
            status=status,
            iterations=iters,
            primal_residual=float(r_prim),
            dual_residual=float(r_dual),
            objective=float(0.5 * z_un @ (self.p @ z_un) + q @ z_un),
        )
        if status == QpStatus.SOLVED and st.polish:
            self._polish(sol, q, l, u)
        return sol

    def _maybe_rescale(self, x, zeta, y, q, rho):
        z_un = self._d * x
        zeta_un = zeta / self._e
        y_un = y * self._e / self._c
        az = self.a @ z_un
        pz = self.p @ z_un
        aty = self.a.T @ y_un
        denom_p = max(np.max(np.abs(az), initial=0.0), np.max(np.abs(zeta_un), initial=0.0), 1e-10)
        denom_d = max(
            np.max(np.abs(pz), initial=0.0),
            np.max(np.abs(aty), initial=0.0),
            np.max(np.abs(q), initial=0.0),
            1e-10,
        )
        r_p = np.max(np.abs(az - zeta_un), initial=0.0) / denom_p
        r_d = np.max(np.abs(pz + q + aty)) / denom_d
        ratio = np.sqrt(r_p / max(r_d, 1e-12))
        if ratio > 5.0 or ratio < 0.2:
            new_rho = float(np.clip(self._rho_scalar * ratio, _RHO_MIN, _RHO_MAX))
            self._rho_scalar = new_rho
            rho_vec = np.full(self.m, new_rho)
            rho_vec[self._eq_mask] = min(new_rho * _RHO_EQ_SCALE, _RHO_MAX)
            self._factorize(rho_vec)

    # -- infeasibility certificates ----------------------------------------

    def _primal_infeasible(self, dy_scaled, l, u) -> bool:
        dy = dy_scaled * self._e / self._c
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-12:
            return False
        eps = self.settings.eps_infeas * norm
        if np.max(np.abs(self.a.T @ dy)) > eps:
            return False
        dy_pos = np.maximum(dy, 0.0)
        dy_neg = np.minimum(dy, 0.0)
        if np.any(dy_pos[np.isinf(u)] > eps) or np.any(-dy_neg[np.isinf(l)] > eps):
            return False
        ufin = np.where(np.isinf(u), 0.0, u)
        lfin = np.where(np.isinf(l), 0.0, l)
        return ufin @ dy_pos + lfin @ dy_neg < -eps

    def _dual_infeasible(self, dx_scaled, q, l, u) -> bool:
        dx = self._d * dx_scaled
        norm = np.max(np.abs(dx), initial=0.0)
        if norm < 1e-12:
            return False
        eps = self.settings.eps_infeas * norm
        if np.max(np.abs(self.p @ dx)) > eps:
            return False
        if q @ dx > -eps:
            return False
        adx = self.a @ dx
        ok_upper = np.isinf(u) | (adx <= eps)
        ok_lower = np.isinf(l) | (adx >= -eps)
        return bool(np.all(ok_upper & ok_lower))

    # -- polishing ----------------------------------------------------------

    def _polish(self, sol: QpSolution, q, l, u):
        """Solve the equality-constrained QP on the active set guessed from
        the dual signs; accept only if it improves both residuals."""
        y = sol.y
        eq = (u - l) < 1e-10
        tol = 1e-7 * (1.0 + np.max(np.abs(y), initial=0.0))
        lower = ((y < -tol) & np.isfinite(l)) | eq
        upper = (y > tol) & np.isfinite(u) & ~lower
        active = lower | upper
        if not np.any(active):
            return
        idx = np.flatnonzero(active)
        a_act = self.a[idx]
        # noisy duals can nominate linearly dependent (even mutually
        # inconsistent) rows; keep an independent subset via pivoted QR
        if a_act.shape[0] > 1:
            try:
                from scipy.linalg import qr
                _, r_qr, piv = qr(a_act.toarray().T, mode="economic",
                                  pivoting=True)
                diag = np.abs(np.diag(r_qr))
                rank = int(np.sum(diag > 1e-9 * max(diag[0], 1.0)))
                keep = np.sort(piv[:rank])
                idx = idx[keep]
                a_act = self.a[idx]
            except (MemoryError, ValueError):
                pass
        b_act = np.where(lower[idx], l[idx], u[idx])
        na = a_act.shape[0]
        reg = self.settings.polish_reg
        kkt = sp.bmat(
            [[self.p + reg * sp.eye(self.n), a_act.T], [a_act, -reg * sp.eye(na)]],
            format="csc",
        )
        rhs = np.concatenate([-q, b_act])
        try:
            factor = spla.splu(kkt)
        except RuntimeError:
            return
        sol_vec = factor.solve(rhs)
        # iterative refinement against the unregularized KKT
        kkt0 = sp.bmat(
            [[self.p, a_act.T], [a_act, sp.csc_matrix((na, na))]], format="csc"
        )
        for _ in range(5):
            resid = rhs - kkt0 @ sol_vec
            sol_vec = sol_vec + factor.solve(resid)
        z_new = sol_vec[: self.n]
        y_new = np.zeros(self.m)
        y_new[idx] = sol_vec[self.n:]
        az_new = self.a @ z_new
        r_prim_new = float(
            np.max(np.maximum(az_new - u, 0.0) + np.maximum(l - az_new, 0.0), initial=0.0)
        )
        r_dual_new = float(np.max(np.abs(self.p @ z_new + q + self.a.T @ y_new)))
        if not (np.isfinite(r_prim_new) and np.isfinite(r_dual_new)):
            return
        if r_prim_new <= max(sol.primal_residual, 1e-10) and r_dual_new <= max(
            sol.dual_residual, 1e-10
        ):
            sol.z = z_new
            sol.y = y_new
            sol.primal_residual = r_prim_new
            sol.dual_residual = r_dual_new
            sol.objective = float(0.5 * z_new @ (self.p @ z_new) + q @ z_new)
            sol.polished = True


def solve(
    problem: QpProblem,
    settings: Optional[QpSettings] = None,
    warm_start: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> QpSolution:
    """One-shot solve of a :class:`QpProblem`."""
    solver = AdmmQpSolver(problem.p, problem.a, settings)
    z0, y0 = warm_start if warm_start is not None else (None, None)
    return solver.solve(problem.q, problem.l, problem.u, z0=z0, y0=y0)


@dataclass
class KktReport:
    stationarity: float
    primal_violation: float
    comp_slackness: float
    dual_sign_violation: float
    n_equality_rows: int
    passed: bool
    notes: tuple[str, ...] = ()


def check_kkt(problem: QpProblem, solution: QpSolution, tol: float = 1e-6) -> KktReport:
    """Verify first-order optimality of a solved QP, with per-condition margins."""
    if solution.status != QpStatus.SOLVED:
        raise ValueError("KKT check requires a solved problem")
    z, y = solution.z, solution.y
    az = problem.a @ z
    stat = float(np.max(np.abs(problem.p @ z + problem.q + problem.a.T @ y), initial=0.0))
    prim = float(
        np.max(np.maximum(az - problem.u, 0.0) + np.maximum(problem.l - az, 0.0), initial=0.0)
    )
    eq = (problem.u - problem.l) < 1e-10
    notes = []
    if np.any(eq):
        notes.append(f"{int(eq.sum())} equality rows: dual sign condition vacuous")
    ineq = ~eq
    # complementary slackness: positive duals push on the upper bound,
    # negative duals on the lower bound
    y_pos = np.maximum(y, 0.0)
    y_neg = np.minimum(y, 0.0)
    gap_u = np.where(np.isfinite(problem.u), problem.u - az, 0.0)
    gap_l = np.where(np.isfinite(problem.l), az - problem.l, 0.0)
    comp = float(
        np.max(
            np.abs(y_pos[ineq] * gap_u[ineq]), initial=0.0
        )
        + np.max(np.abs(y_neg[ineq] * gap_l[ineq]), initial=0.0)
    )
    # dual feasibility: a positive multiplier on a row with u = +inf (or
    # negative with l = -inf) is a sign violation
    sign_viol = float(
        max(
            np.max(y_pos[ineq & np.isinf(problem.u)], initial=0.0),
            np.max(-y_neg[ineq & np.isinf(problem.l)], initial=0.0),
        )
    )
    scale = 1.0 + max(
        np.max(np.abs(y), initial=0.0), np.max(np.abs(az), initial=0.0)
    )
    passed = stat <= tol and prim <= tol and comp <= tol * scale and sign_viol <= tol
    return KktReport(
        stationarity=stat,
        primal_violation=prim,
        comp_slackness=comp,
        dual_sign_violation=sign_viol,
        n_equality_rows=int(eq.sum()),
        passed=passed,
        notes=tuple(notes),
    )


def dump_problem(problem: QpProblem, path) -> None:
    """Write a problem to a plain-text file for offline debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n {problem.n} m {problem.m}\n")
        for name, mat in (("P", problem.p.toarray()), ("A", problem.a.toarray())):
            fh.write(f"{name}\n")
            for row in mat:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        for name, vec in (("q", problem.q), ("l", problem.l), ("u", problem.u)):
            fh.write(f"{name}\n")
            fh.write(" ".join(f"{v:.17g}" for v in vec) + "\n")
