"""Quadratic minimizations over the circulation space via Laplacian solves.

Every operation here reduces to one weighted-Laplacian solve: the correction
flow for a residual h with resistances r is f = (h + d(phi))/r where phi
solves the grounded system with conductances 1/r, and the routing energy is
the weighted quadratic cost of that flow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, SolverFailure

DENSE_LIMIT = 200      # dense Cholesky below, PCG above
PCG_TOL = 1e-10
RESISTANCE_FLOOR = 1e-14   # relative floor applied to resistances


SCALE_SPLIT = 1e-8     # conductance ratio below which the no-cancel path runs


def _laplacian_dense(n, tails, heads, cond, dtype=float):
    L = np.zeros((n, n), dtype=dtype)
    np.add.at(L, (tails, tails), cond)
    np.add.at(L, (heads, heads), cond)
    np.subtract.at(L, (tails, heads), cond)
    np.subtract.at(L, (heads, tails), cond)
    return L


class _GroundedNoCancelSolver:
    """Grounded Laplacian solve whose factorization never cancels.

    The interior point method produces conductances spanning fifteen-plus
    decades, where an assembled Cholesky silently drops the weak couplings.
    Eliminating vertices on the off-diagonal weight matrix directly (diagonals
    kept as implicit row sums, every update a product of positives) keeps
    entrywise relative accuracy regardless of conditioning; iterative
    refinement against an arc-level extended-precision residual does the rest.
    """

    def __init__(self, n, tails, heads, cond):
        self.n = n
        self.tails = tails
        self.heads = heads
        self.c_hi = np.asarray(cond, dtype=np.longdouble)
        size = n - 1
        W = np.zeros((size, size))
        g = np.zeros(size)
        for u, v, ce in zip(tails, heads, cond):
            if u == 0:
                g[v - 1] += ce
            elif v == 0:
                g[u - 1] += ce
            else:
                W[u - 1, v - 1] += ce
                W[v - 1, u - 1] += ce
        self.factors = np.zeros((size, size))
        self.d = np.zeros(size)
        for k in range(size):
            dk = g[k] + float(np.sum(W[k, k + 1:]))
            self.d[k] = dk if dk > 0 else 1.0
            col = W[k + 1:, k] / self.d[k]
            self.factors[k + 1:, k] = col
            g[k + 1:] += col * g[k]
            if len(col):
                W[k + 1:, k + 1:] += np.outer(col, W[k, k + 1:])
                np.fill_diagonal(W[k + 1:, k + 1:], 0.0)

    def _substitute(self, rhs):
        # factors hold positive weight ratios; the Laplacian's unit-triangular
        # factor carries them negated
        size = self.n - 1
        y = np.asarray(rhs, dtype=float).copy()
        for k in range(size - 1):
            y[k + 1:] += self.factors[k + 1:, k] * y[k]
        y /= self.d
        for k in range(size - 2, -1, -1):
            y[k] += self.factors[k + 1:, k] @ y[k + 1:]
        return y

    def _residual(self, phi_hi, b_hi):
        drop = phi_hi[self.tails] - phi_hi[self.heads]
        flows = self.c_hi * drop
        out = b_hi.copy()
        np.subtract.at(out, self.tails, flows)
        np.add.at(out, self.heads, flows)
        return out

    def solve(self, b, passes: int = 5) -> np.ndarray:
        """Longdouble potentials; casting them would lose the information the
        caller needs when their span dwarfs the flow scale."""
        b_hi = np.asarray(b, dtype=np.longdouble)
        phi = np.zeros(self.n, dtype=np.longdouble)
        phi[1:] = self._substitute(np.asarray(b[1:], dtype=float))
        for _ in range(passes):
            res = self._residual(phi, b_hi)
            rk = np.asarray(res[1:], dtype=float)
            if not np.all(np.isfinite(rk)) or not np.any(rk):
                break
            phi[1:] += self._substitute(rk)
        return phi


def _laplacian_sparse(n, tails, heads, cond):
    rows = np.concatenate([tails, heads, tails, heads])
    cols = np.concatenate([tails, heads, heads, tails])
    vals = np.concatenate([cond, cond, -cond, -cond])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def solve_potentials(n: int, tails: np.ndarray, heads: np.ndarray,
                     conductance: np.ndarray, injection: np.ndarray,
                     tol: float = PCG_TOL, balance_scale: float | None = None) -> np.ndarray:
    """Solve L(conductance) phi = injection with phi pinned to 0 at vertex 0.

    The injection must be balanced; ``balance_scale`` tells the check how much
    floating-point cancellation the caller's aggregation could legitimately
    leave behind. Small systems go through a dense factorization with one step
    of iterative refinement; larger ones use Jacobi-preconditioned CG with a
    direct sparse fallback, so the advertised residual bound
    ||L phi - b|| <= tol ||b|| holds either way.
    """
    return np.asarray(
        _solve_potentials_impl(n, tails, heads, conductance, injection,
                               tol, balance_scale), dtype=float)


def _solve_potentials_impl(n, tails, heads, conductance, injection,
                           tol=PCG_TOL, balance_scale=None):
    """As solve_potentials, but extended-precision injections survive into the
    scale-split path (whose potential span can dwarf what float64 resolves)."""
    b_in = np.asarray(injection)
    b = np.asarray(injection, dtype=float)
    if n == 1 or not np.any(b):
        return np.zeros(n)
    # cancellation when building injections from huge per-arc terms leaves a
    # tiny spurious mean; project it out, but reject genuine imbalance
    slack = max(float(np.abs(b).sum()), (balance_scale or 0.0) * 1e-9, 1e-300)
    if abs(float(b.sum())) > 1e-6 * slack:
        raise ContractViolation("injection is not balanced")
    b = b - float(b.sum()) / n
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n)
    conductance = np.asarray(conductance, dtype=float)
    if np.min(conductance) <= 0:
        raise ContractViolation("conductances must be positive")
    if float(np.min(conductance)) < SCALE_SPLIT * float(np.max(conductance)):
        # scales this far apart lose their weak couplings inside an assembled
        # factorization; route through the cancellation-free elimination
        b_hi = b_in.astype(np.longdouble)
        b_hi = b_hi - b_hi.sum() / n
        solver = _GroundedNoCancelSolver(n, tails, heads, conductance)
        phi = solver.solve(b_hi)
        resid = float(np.linalg.norm(np.asarray(
            solver._residual(phi, b_hi), dtype=float)))
        if resid > max(tol, 1e-8) * bnorm:
            raise SolverFailure("scale-split Laplacian solve stalled",
                                residual=resid)
        return phi

    if n <= DENSE_LIMIT:
        L = _laplacian_dense(n, tails, heads, conductance)
        Lr = L[1:, 1:]
        # symmetric Jacobi equilibration tames the wild conductance ranges the
        # interior point method produces near convergence
        d = np.sqrt(np.maximum(np.diag(Lr), 1e-300))
        Ls = Lr / d[:, None] / d[None, :]
        bs = b[1:] / d
        phi = np.zeros(n)
        try:
            cho = scipy.linalg.cho_factor(Ls, check_finite=False)
            x = scipy.linalg.cho_solve(cho, bs, check_finite=False)
            # iterative refinement with extra-precision residuals recovers an
            # accurate solution well beyond the plain factorization's
            # condition-number limit (the late-stage systems need it)
            Lhi = Ls.astype(np.longdouble)
            bhi = bs.astype(np.longdouble)
            for _ in range(3):
                r = np.asarray(bhi - Lhi @ x.astype(np.longdouble), dtype=float)
                if not np.all(np.isfinite(r)):
                    break
                x = x + scipy.linalg.cho_solve(cho, r, check_finite=False)
            x /= d
        except scipy.linalg.LinAlgError:
            x = np.linalg.lstsq(Lr, b[1:], rcond=None)[0]
        phi[1:] = x
        resid = np.linalg.norm(L @ phi - b)
        if resid > max(tol, 1e-9) * bnorm:
            x = np.linalg.lstsq(Lr, b[1:], rcond=None)[0]
            phi[1:] = x
            resid = np.linalg.norm(L @ phi - b)
            if resid > max(tol, 1e-8) * bnorm:
                raise SolverFailure("dense Laplacian solve stalled", residual=resid)
        return phi

    L = _laplacian_sparse(n, tails, heads, conductance)
    Lr = L[1:, :][:, 1:].tocsc()
    diag = Lr.diagonal()
    M = sp.diags(1.0 / np.maximum(diag, 1e-300))
    x, info = spla.cg(Lr, b[1:], rtol=tol, atol=0.0, maxiter=50 * n, M=M)
    phi = np.zeros(n)
    phi[1:] = x
    resid = np.linalg.norm(L @ phi - b)
    if info != 0 or resid > tol * bnorm * 10:
        # direct sparse factorization still satisfies the contract; prefer
        # finishing the solve over surfacing a preconditioner weakness
        try:
            lu = spla.splu(Lr.tocsc())
            phi[1:] = lu.solve(b[1:])
        except RuntimeError as exc:
            raise SolverFailure(f"sparse Laplacian solve failed: {exc}",
                                residual=resid) from None
        resid = np.linalg.norm(L @ phi - b)
        if resid > max(tol, 1e-8) * bnorm:
            raise SolverFailure("sparse Laplacian solve stalled", residual=resid)
    return phi


@dataclass
class CorrectionFlow:
    """One electrical solve: circulation, congestions, energy, potentials.

    ``flow_hi`` carries the extended-precision circulation; rounding it to
    double costs eps times the potential span, which dwarfs the flow itself
    in deep central-path states, so flow pushes and weight updates must
    consume this field.
    """

    flow: np.ndarray
    rho_plus: np.ndarray
    rho_minus: np.ndarray
    energy: float
    potentials: np.ndarray
    flow_hi: np.ndarray = None

    def __post_init__(self):
        if self.flow_hi is None:
            self.flow_hi = self.flow


def resistances(w_plus, w_minus, s_plus, s_minus) -> np.ndarray:
    """Per-arc quadratic coefficients w+/s+^2 + w-/s-^2, floored for safety.

    With unit-floored weights r >= 2 holds structurally, so the relative
    floor is capped at 1: it guards degenerate inputs without ever distorting
    legitimate resistances (late-stage r_max reaches 1e15+, where an uncapped
    relative floor would corrupt every well-conditioned arc).
    """
    r = w_plus / s_plus ** 2 + w_minus / s_minus ** 2
    if len(r):
        floor = min(RESISTANCE_FLOOR * float(np.max(r)), 1.0)
        r = np.maximum(r, floor)
    return r


def correction_flow(n, tails, heads, r, h, s_plus, s_minus,
                    w_plus=None, w_minus=None) -> CorrectionFlow:
    """Circulation f with r*f - h orthogonal to circulations, plus congestion.

    Solves the grounded system with conductances 1/r and injection -div(h/r),
    then reads f = (h + potential drop)/r. The energy reported is the weighted
    congestion form when weights are supplied, else sum r f^2 / 2 (equal in
    exact arithmetic).
    """
    m = len(r)
    if m == 0:
        z = np.zeros(0)
        return CorrectionFlow(z, z.copy(), z.copy(), 0.0, np.zeros(n))
    hp = np.longdouble
    hr = h.astype(hp) / r.astype(hp)
    injection = np.zeros(n, dtype=hp)
    np.add.at(injection, heads, hr)
    np.subtract.at(injection, tails, hr)
    phi = _solve_potentials_impl(n, tails, heads, 1.0 / r, injection,
                                 balance_scale=float(np.abs(hr).sum()))
    # the cancellation h + (potential drop) must happen at the potentials'
    # own precision
    flow_hi = (h.astype(hp) + phi[tails].astype(hp)
               - phi[heads].astype(hp)) / r.astype(hp)
    flow = np.asarray(flow_hi, dtype=float)
    rho_plus = flow / s_plus
    rho_minus = -flow / s_minus
    if w_plus is not None:
        energy = 0.5 * float(np.sum(w_plus * rho_plus ** 2 + w_minus * rho_minus ** 2))
    else:
        energy = 0.5 * float(np.sum(r * flow ** 2))
    return CorrectionFlow(flow, rho_plus, rho_minus, energy,
                          np.asarray(phi, dtype=float), flow_hi=flow_hi)


def emax(r: np.ndarray, h: np.ndarray) -> float:
    """Closed-form upper bound on the routing energy: sum h^2 / r / 2."""
    if len(r) == 0:
        return 0.0
    return 0.5 * float(np.sum(h ** 2 / r))


def project_out_potentials(n, tails, heads, g: np.ndarray) -> np.ndarray:
    """Component of g orthogonal to potential drops (unweighted projection).

    Zero exactly when g is a potential flow; the norm of the result is the
    working measure of centrality violation and of projected gradients.
    """
    if len(g) == 0:
        return g.copy()
    injection = np.zeros(n)
    np.subtract.at(injection, heads, g)
    np.add.at(injection, tails, g)
    phi = solve_potentials(n, tails, heads, np.ones(len(g)), injection,
                           balance_scale=float(np.abs(g).sum()))
    return g - (phi[tails] - phi[heads])
