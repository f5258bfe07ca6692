"""The interior-point iterate: flow, barrier weights, centrality parameter."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import electrical
from .errors import ContractViolation
from .graph import Problem

SLACK_FLOOR = 1e-12      # runtime assertion on every accepted state
CENTRALITY_TOL = 1e-8    # relative inf-norm tolerance for "exactly central"


@dataclass
class FlowState:
    """A strictly interior flow with per-side barrier weights and parameter mu.

    Slacks are s+ = 1 - f (room below capacity) and s- = f (room above zero);
    weights never drop below one and only ever increase across a solve.
    """

    problem: Problem
    flow: np.ndarray
    w_plus: np.ndarray
    w_minus: np.ndarray
    mu: float

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.w_plus = np.asarray(self.w_plus, dtype=float)
        self.w_minus = np.asarray(self.w_minus, dtype=float)
        self.check_interior()

    def check_interior(self):
        if self.mu <= 0:
            raise ContractViolation("mu must be positive")
        if self.problem.m == 0:
            return
        smin = min(float(np.min(self.flow)), float(np.min(1.0 - self.flow)))
        if smin < SLACK_FLOOR:
            raise ContractViolation(f"slack {smin:.3e} under floor {SLACK_FLOOR:g}")
        if np.min(self.w_plus) < 1.0 - 1e-9 or np.min(self.w_minus) < 1.0 - 1e-9:
            raise ContractViolation("barrier weights must stay >= 1")

    @property
    def s_plus(self) -> np.ndarray:
        return 1.0 - self.flow

    @property
    def s_minus(self) -> np.ndarray:
        return self.flow

    @property
    def weight_sum(self) -> float:
        return float(np.sum(self.w_plus) + np.sum(self.w_minus))

    @property
    def gap(self) -> float:
        """Duality gap certified by the central-path dual: mu * ||w||_1."""
        return self.mu * self.weight_sum

    def gradient(self) -> np.ndarray:
        """Barrier gradient direction w+/s+ - w-/s- (no cost term)."""
        return self.w_plus / self.s_plus - self.w_minus / self.s_minus

    def resistances(self) -> np.ndarray:
        return electrical.resistances(self.w_plus, self.w_minus,
                                      self.s_plus, self.s_minus)

    def residual(self, mu: float | None = None, shift: np.ndarray | None = None) -> np.ndarray:
        """Residual vector g with grad F = -C^T g for the (shifted) barrier at mu.

        ``shift`` is the residual perturbation absorbed later by weight
        updates; passing it makes corrections target the shifted objective.
        Evaluated in extended precision: the terms reach the cost scale over
        mu while their meaningful cancellation sits many digits below.
        """
        mu = self.mu if mu is None else mu
        hp = np.longdouble
        f = self.flow.astype(hp)
        g = -(self.w_plus.astype(hp) / (1.0 - f) - self.w_minus.astype(hp) / f
              + self.problem.costs.astype(hp) / hp(mu))
        if shift is not None:
            g = g + shift.astype(hp)
        return g

    def correction(self, g: np.ndarray) -> electrical.CorrectionFlow:
        """Electrical correction flow for residual g at the current state."""
        p = self.problem
        return electrical.correction_flow(
            p.n, p.tails, p.heads, self.resistances(), g,
            self.s_plus, self.s_minus, self.w_plus, self.w_minus)

    def correction_refined(self, g: np.ndarray) -> electrical.CorrectionFlow:
        """Correction flow with one residual-refinement pass.

        The congestion of this flow feeds weight updates, where leftover flow
        error gets amplified by the resistances; one refinement against the
        extended-precision leftover keeps that amplification harmless.
        """
        p = self.problem
        corr = self.correction(g)
        r = self.resistances()
        if p.m == 0 or float(np.max(r)) < 1e8 * float(np.min(r)):
            return corr
        hp = np.longdouble
        left = g.astype(hp) - r.astype(hp) * corr.flow.astype(hp)
        fix = electrical.correction_flow(
            p.n, p.tails, p.heads, r, left,
            self.s_plus, self.s_minus, self.w_plus, self.w_minus)
        flow = corr.flow + fix.flow
        rho_plus = flow / self.s_plus
        rho_minus = -flow / self.s_minus
        energy = 0.5 * float(np.sum(self.w_plus * rho_plus ** 2
                                    + self.w_minus * rho_minus ** 2))
        return electrical.CorrectionFlow(flow, rho_plus, rho_minus, energy,
                                         corr.potentials)

    def energy(self, g: np.ndarray) -> float:
        return self.correction(g).energy

    def emax(self, g: np.ndarray) -> float:
        return electrical.emax(self.resistances(), g)

    def centrality_error(self, mu: float | None = None,
                         shift: np.ndarray | None = None) -> float:
        """Relative inf-norm distance of the residual from the potential-flow space."""
        g = self.residual(mu, shift)
        scale = float(np.max(np.abs(g))) if len(g) else 0.0
        if scale == 0.0:
            return 0.0
        p = self.problem
        resid = electrical.project_out_potentials(p.n, p.tails, p.heads, g)
        return float(np.max(np.abs(resid))) / scale

    def is_central(self, tol: float = CENTRALITY_TOL, mu: float | None = None,
                   shift: np.ndarray | None = None) -> bool:
        return self.centrality_error(mu, shift) <= tol

    def with_flow(self, flow: np.ndarray) -> "FlowState":
        return replace(self, flow=flow)

    def routed_demand(self) -> np.ndarray:
        return self.problem.flow_demand(self.flow)

    def primal_cost(self) -> float:
        return float(np.dot(self.problem.costs, self.flow))


def gap_certificate(state: FlowState):
    """Measured duality gap against the dual built from y = mu * w / s.

    Returns (measured_gap, mu * ||w||_1, infeasibility) where infeasibility is
    the inf-norm violation of the dual equality constraint after fitting
    vertex potentials by least squares. For an exactly central state the
    measured gap matches mu * ||w||_1 and the infeasibility is ~0.
    """
    p = state.problem
    if p.m == 0:
        return 0.0, state.gap, 0.0
    mu = state.mu
    zeta = p.costs / mu + state.gradient()
    resid = electrical.project_out_potentials(p.n, p.tails, p.heads, zeta)
    # recover vertex potentials for the dual objective: pi = -mu * phi_vertex
    inj = np.zeros(p.n)
    np.add.at(inj, p.tails, zeta)
    np.subtract.at(inj, p.heads, zeta)
    phiv = electrical.solve_potentials(p.n, p.tails, p.heads,
                                       np.ones(p.m), inj,
                                       balance_scale=float(np.abs(zeta).sum()))
    pi = -mu * phiv
    y_plus_sum = mu * float(np.sum(state.w_plus / state.s_plus))
    dual_obj = float(np.dot(state.routed_demand(), pi)) - y_plus_sum
    measured = state.primal_cost() - dual_obj
    return measured, state.gap, mu * float(np.max(np.abs(resid)))
