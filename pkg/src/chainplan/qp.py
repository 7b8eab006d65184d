"""Sparse convex QP solver (operator-splitting / ADMM).

Solves   minimize 1/2 x'Px + q'x   subject to  l <= Ax <= u

with P positive semidefinite. Ruiz equilibration tames mixed row scales
(unit box rows next to small constraint gradients), one quasi-definite KKT
factorization is reused across iterations, and warm starts carry across the
outer optimizer's trust-region and penalty updates, which only touch
q, l, u. Deterministic for fixed inputs: fixed update schedule, no
time-based logic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SOLVED = "solved"
MAX_ITER = "max_iter"


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float


def _ruiz(P, A, iters=10):
    """Symmetric equilibration of [[P, A'],[A, 0]]; returns diagonals (D, E)."""
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps = P.copy()
    As = A.copy()
    for _ in range(iters):
        cp = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        ca = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        cn = np.sqrt(np.clip(np.maximum(cp, ca), 1e-8, 1e8))
        d = 1.0 / cn
        rn = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        # a row's scale also sees the variable scaling applied this round
        e = 1.0 / np.sqrt(np.clip(rn, 1e-8, 1e8))
        Dd = sp.diags(d)
        Ee = sp.diags(e)
        Ps = Dd @ Ps @ Dd
        As = Ee @ As @ Dd
        D *= d
        E *= e
    return D, E


class BoxConeQP:
    """Reusable solver for one sparsity pattern; q, l, u swap at no cost."""

    def __init__(self, P, A, rho=0.1, sigma=1e-6, alpha=1.6):
        self.P = sp.csc_matrix(P)
        self.A = sp.csc_matrix(A)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        self.sigma = sigma
        self.alpha = alpha
        self.rho_base = rho
        self.D, self.E = _ruiz(self.P, self.A)
        self.Ps = sp.diags(self.D) @ self.P @ sp.diags(self.D)
        self.As = (sp.diags(self.E) @ self.A @ sp.diags(self.D)).tocsc()
        self._factor = None
        self._rho_vec = None
        self._eq_mask = None

    def _refactor(self, rho):
        rho_vec = np.full(self.m, rho)
        rho_vec[self._eq_mask] = rho * 1e3
        kkt = sp.bmat([
            [self.Ps + self.sigma * sp.eye(self.n, format="csc"), self.As.T],
            [self.As, -sp.diags(1.0 / rho_vec)],
        ], format="csc")
        self._factor = spla.splu(kkt)
        self._rho_vec = rho_vec
        self._rho = rho

    def _polish(self, qs, ls, us, x, y):
        """Solve the KKT system of the guessed active set exactly.

        Turns a moderate-accuracy ADMM iterate into a high-accuracy solution
        whenever the active-set guess is right; callers keep the unpolished
        iterate otherwise.
        """
        n = self.n
        act_l = (y < -1e-9) & ~self._eq_mask
        act_u = (y > 1e-9) | self._eq_mask
        rows = np.nonzero(act_l | act_u)[0]
        if rows.size == 0:
            try:
                K = (self.Ps + 1e-9 * sp.eye(n, format="csc")).tocsc()
                xs = spla.splu(K).solve(-qs)
            except RuntimeError:
                return None
            return xs, np.zeros(self.m)
        b = np.where(act_u[rows], us[rows], ls[rows])
        A_act = self.As[rows]
        k = rows.size
        K = sp.bmat([[self.Ps + 1e-9 * sp.eye(n, format="csc"), A_act.T],
                     [A_act, -1e-9 * sp.eye(k, format="csc")]], format="csc")
        rhs = np.concatenate([-qs, b])
        try:
            lu = spla.splu(K)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        # one step of iterative refinement against the unregularized system
        resid = np.concatenate([
            self.Ps @ sol[:n] + qs + A_act.T @ sol[n:],
            A_act @ sol[:n] - b])
        sol = sol - lu.solve(resid)
        y_new = np.zeros(self.m)
        y_new[rows] = sol[n:]
        return sol[:n], y_new

    def _try_polish(self, qs, ls, us, x, y, z, r_p, r_d):
        out = self._polish(qs, ls, us, x, y)
        if out is None:
            return x, y, z, r_p, r_d
        xp, yp = out
        if not (np.all(np.isfinite(xp)) and np.all(np.isfinite(yp))):
            return x, y, z, r_p, r_d
        err_old = self._kkt_error(qs, ls, us, x, y)
        err_new = self._kkt_error(qs, ls, us, xp, yp)
        if err_new < err_old:
            Axp = self.As @ xp
            return xp, yp, np.clip(Axp, ls, us), err_new, err_new
        return x, y, z, r_p, r_d

    def _kkt_error(self, qs, ls, us, x, y):
        Ax = self.As @ x
        r_p = float(np.max(np.abs((Ax - np.clip(Ax, ls, us)) / self.E))) if self.m else 0.0
        r_d = float(np.max(np.abs((self.Ps @ x + qs + self.As.T @ y) / self.D)))
        comp = 0.0
        if self.m:
            viol_u = np.where(y > 1e-9, np.abs(Ax - us), 0.0)
            viol_l = np.where(y < -1e-9, np.abs(Ax - ls), 0.0)
            comp = float(np.max(np.maximum(viol_u, viol_l) / np.maximum(np.abs(self.E), 1e-12)))
        return max(r_p, r_d, comp)

    def solve(self, q, l, u, x0=None, y0=None, eps_abs=1e-7, eps_rel=1e-7,
              max_iter=4000, polish=True) -> QPResult:
        n, m = self.n, self.m
        D, E = self.D, self.E
        qs = D * np.asarray(q, dtype=float)
        ls = E * np.asarray(l, dtype=float)
        us = E * np.asarray(u, dtype=float)
        eq = (np.asarray(u) - np.asarray(l)) < 1e-12
        if self._factor is None or not np.array_equal(eq, self._eq_mask):
            self._eq_mask = eq
            self._refactor(self.rho_base)
        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / D
        y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) / E
        rho_vec = self._rho_vec
        A, P = self.As, self.Ps
        z = np.clip(A @ x, ls, us)
        rhs = np.empty(n + m)
        alpha = self.alpha
        r_p = r_d = np.inf
        it = 0
        for it in range(1, max_iter + 1):
            rhs[:n] = self.sigma * x - qs
            rhs[n:] = z - y / rho_vec
            sol = self._factor.solve(rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y) / rho_vec
            x = alpha * x_t + (1.0 - alpha) * x
            z_relaxed = alpha * z_t + (1.0 - alpha) * z
            z = np.clip(z_relaxed + y / rho_vec, ls, us)
            y = y + rho_vec * (z_relaxed - z)
            if it % 10 == 0 or it == max_iter:
                Ax = A @ x
                Px = P @ x
                Aty = A.T @ y
                # residuals in the original (unscaled) problem
                r_p_vec = (Ax - z) / E
                r_d_vec = (Px + qs + Aty) / D
                r_p = float(np.max(np.abs(r_p_vec))) if m else 0.0
                r_d = float(np.max(np.abs(r_d_vec)))
                eps_p = eps_abs + eps_rel * max(
                    float(np.max(np.abs(Ax / E))) if m else 0.0,
                    float(np.max(np.abs(z / E))) if m else 0.0)
                eps_d = eps_abs + eps_rel * max(
                    float(np.max(np.abs(Px / D))), float(np.max(np.abs(qs / D))),
                    float(np.max(np.abs(Aty / D))) if m else 0.0)
                if r_p <= eps_p and r_d <= eps_d:
                    if polish:
                        x, y, z, r_p, r_d = self._try_polish(qs, ls, us, x, y, z, r_p, r_d)
                    return QPResult(D * x, E * y, z / E, SOLVED, it, r_p, r_d)
                # the active set often settles long before the iterates do;
                # an early exact polish then finishes the job
                if polish and it % 100 == 0:
                    xp, yp, zp, rp2, rd2 = self._try_polish(qs, ls, us, x, y, z, r_p, r_d)
                    # a correct active-set polish lands near machine precision
                    if max(rp2, rd2) <= min(eps_abs, 1e-9):
                        return QPResult(D * xp, E * yp, zp / E, SOLVED, it, rp2, rd2)
                if it % 100 == 0 and it < max_iter:
                    scale_p = max(float(np.max(np.abs(Ax))) if m else 1.0,
                                  float(np.max(np.abs(z))) if m else 1.0, 1e-9)
                    scale_d = max(float(np.max(np.abs(Px))), float(np.max(np.abs(qs))),
                                  float(np.max(np.abs(Aty))) if m else 1.0, 1e-9)
                    rp_s = float(np.max(np.abs(Ax - z))) if m else 0.0
                    rd_s = float(np.max(np.abs(Px + qs + Aty)))
                    ratio = np.sqrt((rp_s / scale_p) / max(rd_s / scale_d, 1e-16))
                    ratio = float(np.clip(ratio, 1e-3, 1e3))
                    if ratio > 5.0 or ratio < 0.2:
                        self._refactor(float(np.clip(self._rho * ratio, 1e-6, 1e6)))
                        rho_vec = self._rho_vec
        if polish:
            x, y, z, r_p, r_d = self._try_polish(qs, ls, us, x, y, z, r_p, r_d)
            eps_p = eps_abs + eps_rel * max(float(np.max(np.abs((self.As @ x) / self.E))) if m else 0.0,
                                            float(np.max(np.abs(z / self.E))) if m else 0.0)
            if r_p <= eps_p and r_d <= eps_p:
                return QPResult(D * x, E * y, z / E, SOLVED, it, r_p, r_d)
        return QPResult(D * x, E * y, z / E, MAX_ITER, it, r_p, r_d)


def solve_qp(P, q, A, l, u, **kwargs) -> QPResult:
    """One-shot convenience wrapper around BoxConeQP."""
    solver = BoxConeQP(P, A,
                       rho=kwargs.pop("rho", 0.1),
                       sigma=kwargs.pop("sigma", 1e-6),
                       alpha=kwargs.pop("alpha", 1.6))
    return solver.solve(q, l, u, **kwargs)
