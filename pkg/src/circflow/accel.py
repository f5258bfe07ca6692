"""Accelerated outer loops: weight balancing, perturbed correction steps,
the two progress-step flavors, and the demand-perturbation ledger.

The two flavors share a skeleton: rebalance weights, solve a regularized step
on the star-augmented graph, push the flow, then restore exact centrality by
a mix of vanilla corrections and weight absorption of the step's residual
perturbation. Every guarantee the analysis promises is re-measured at run
time; violations reject the step rather than silently continuing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigurationError, ContractViolation, NumericalFailure,
                     StepInfeasible)
from .graph import build_star_graph
from .mixed import (RegParams, choose_params, solve_barrier_step,
                    solve_regularized_step)
from .state import FlowState
from .vanilla import CorrectionTrace, correct_to_central, perfect_correction

WEIGHT_BUDGET_FACTOR = 3.0   # ||w||_1 <= 3 m enforced throughout


@dataclass
class AccelDiagnostics:
    """Per-iteration records plus the running invariant checks."""

    deltas: list = field(default_factory=list)
    rho_inf: list = field(default_factory=list)
    weight_added_balancing: float = 0.0
    weight_added_congested: float = 0.0
    weight_added_absorb: float = 0.0
    weight_added_perfect: float = 0.0
    balancing_events: int = 0
    step_demand: list = field(default_factory=list)
    low_congestion: list = field(default_factory=list)
    stretch_violations: int = 0
    dichotomy_violations: int = 0
    pcg_fallbacks: int = 0
    iterations: int = 0
    retries: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "retries": self.retries,
            "balancing_events": self.balancing_events,
            "weight_added": {
                "balancing": self.weight_added_balancing,
                "congested": self.weight_added_congested,
                "absorb": self.weight_added_absorb,
                "perfect": self.weight_added_perfect,
            },
            "max_rho_inf": max(self.rho_inf, default=0.0),
            "max_step_demand": max(self.step_demand, default=0.0),
            "max_low_congestion": max(self.low_congestion, default=0.0),
            "stretch_violations": self.stretch_violations,
            "dichotomy_violations": self.dichotomy_violations,
            "notes": self.notes,
        }


@dataclass
class PerturbedDemand:
    """What the maintained flow actually routes, against the original target."""

    target: np.ndarray
    current: np.ndarray
    total_perturbation: float = 0.0

    def record(self, added: np.ndarray):
        self.current = self.current + added
        self.total_perturbation += float(np.sum(np.abs(added)))

    def drift(self) -> float:
        return float(np.sum(np.abs(self.current - self.target)))

    def check(self, state: FlowState, tol: float = 1e-8):
        actual = state.routed_demand()
        err = float(np.max(np.abs(actual - self.current)))
        scale = max(1.0, float(np.max(np.abs(self.current))))
        if err > tol * scale:
            raise NumericalFailure(
                f"demand ledger out of sync with the flow by {err:.3e}")


def delta_schedule(m: int, method: str, scale: float = 1.0) -> float:
    """Step size for the accelerated methods, with the upper feasibility clamp.

    The nominal rates are m^(-3/8) and m^(-1/3) with logarithmic damping; the
    hard clamp delta <= ||w||_1^(-1/4)/2 ~ (2m)^(-1/4)/2 keeps the perturbed
    correction machinery inside its feasible range. The analysis' lower bounds
    on delta are mutually unsatisfiable at reachable sizes and are reported as
    notes rather than enforced (measured congestion takes their place).
    """
    if m < 2:
        return 0.25
    logm = math.log(m)
    if method == "eleven8":
        delta = m ** -0.375 / (10.0 * logm)
    elif method == "four3":
        delta = m ** (-1.0 / 3.0) / (10.0 * logm)
    else:
        raise ConfigurationError(f"unknown accel method {method!r}")
    delta *= scale
    upper = (2.0 * m + 1.0) ** -0.25 / 2.0
    return min(delta, upper)


def balanced_mask(state: FlowState, delta: float) -> np.ndarray:
    w1 = state.weight_sum
    hi = delta * w1
    lo = 96.0 * delta ** 4 * w1 ** 2
    big = np.maximum(state.w_plus, state.w_minus)
    small = np.minimum(state.w_plus, state.w_minus)
    return (big <= hi) | (small >= lo)


def _solve_balanced_flow(wp: float, wm: float, target: float) -> float:
    """Unique f in (0,1) with wp/(1-f) - wm/f = target, by bisection.

    The left side is continuous and increasing from -inf to +inf, so the
    root exists and bisection cannot fail.
    """
    lo, hi = 1e-15, 1.0 - 1e-15

    def g(t):
        return wp / (1.0 - t) - wm / t - target

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


def balance_weights(state: FlowState, delta: float):
    """Raise the light side of every imbalanced arc and re-solve its flow.

    The new flow value preserves the arc's barrier stationarity value, so
    centrality is untouched; the demand the flow routes moves by the flow
    change on the rebalanced arcs.
    """
    mask = ~balanced_mask(state, delta)
    if not mask.any():
        return state, 0.0, np.zeros(state.problem.n), 0
    w1 = state.weight_sum
    floor = 96.0 * delta ** 4 * w1 ** 2
    wp = state.w_plus.copy()
    wm = state.w_minus.copy()
    flow = state.flow.copy()
    grad = state.gradient()
    for e in np.where(mask)[0]:
        if wp[e] <= wm[e]:
            wp[e] = floor
        else:
            wm[e] = floor
        flow[e] = _solve_balanced_flow(wp[e], wm[e], grad[e])
    dw = float(np.sum(wp - state.w_plus) + np.sum(wm - state.w_minus))
    events = int(mask.sum())
    if dw > 96.0 * events * delta ** 4 * w1 ** 2 * (1 + 1e-9):
        raise NumericalFailure("balancing weight change exceeded its budget")
    new_state = FlowState(state.problem, flow, wp, wm, state.mu)
    added_demand = new_state.routed_demand() - state.routed_demand()
    return new_state, dw, added_demand, events


def absorb_residual_into_weights(state: FlowState, delta_h: np.ndarray) -> FlowState:
    """Cancel a residual of the form C^T delta_h by raising barrier weights."""
    wp = state.w_plus - state.s_plus * np.minimum(delta_h, 0.0)
    wm = state.w_minus + state.s_minus * np.maximum(delta_h, 0.0)
    dw = float(np.sum(wp - state.w_plus) + np.sum(wm - state.w_minus))
    if dw > float(np.sum(np.abs(delta_h))) * (1 + 1e-9) + 1e-12:
        raise NumericalFailure("absorption weight change exceeded ||dh||_1")
    return FlowState(state.problem, state.flow, wp, wm, state.mu)


def perturbed_correction(state: FlowState, sol, delta: float, mu_next: float,
                         params: RegParams, diag: AccelDiagnostics,
                         trace: CorrectionTrace | None = None) -> FlowState:
    """Push the step flow, reweight congested arcs, and re-center.

    After the flow update, arcs whose congestion reached the C_inf threshold
    get a weight bump that cancels their contribution to the next residual;
    the remaining perturbed residual must route with energy <= 1/4 (measured,
    else the step is rejected), after which vanilla corrections and the
    absorption of the step's perturbation restore exact centrality at mu_next.
    """
    if sol.rho_inf > 0.5 + 1e-9:
        raise StepInfeasible(f"congestion {sol.rho_inf:.3f} above 1/2")
    w1 = state.weight_sum
    c_inf = 1.0 / (2.0 * delta * math.sqrt(2.0 * w1))
    new_flow = state.flow + sol.flow
    sp_new = 1.0 - new_flow
    sm_new = new_flow
    wp = state.w_plus.copy()
    wm = state.w_minus.copy()
    hit_minus = np.abs(sol.rho_minus) >= c_inf
    hit_plus = np.abs(sol.rho_plus) >= c_inf
    wp[hit_minus] += (sp_new[hit_minus] / sm_new[hit_minus]) \
        * state.w_minus[hit_minus] * sol.rho_minus[hit_minus] ** 2
    wm[hit_plus] += (sm_new[hit_plus] / sp_new[hit_plus]) \
        * state.w_plus[hit_plus] * sol.rho_plus[hit_plus] ** 2
    dw = float(np.sum(wp - state.w_plus) + np.sum(wm - state.w_minus))
    gamma = delta ** 2 * w1 * 32.0 * math.sqrt(6.0) * math.log(max(w1, 3.0))
    dw_budget = 192.0 * math.sqrt(2.0) * gamma * (delta ** 2 * w1) ** 1.5
    if dw > dw_budget * (1 + 1e-9) + 1e-12:
        raise StepInfeasible(
            f"congested-arc reweighting {dw:.3e} above budget {dw_budget:.3e}")
    diag.weight_added_congested += dw
    # dichotomy diagnostic: every arc is either under the congestion threshold
    # or has low stretch
    stretch = (np.abs(state.w_plus * sol.rho_plus / state.s_plus)
               + np.abs(state.w_minus * sol.rho_minus / state.s_minus))
    over = np.maximum(np.abs(sol.rho_plus), np.abs(sol.rho_minus)) >= c_inf
    diag.dichotomy_violations += int(np.sum(over & (stretch > 6.0 * gamma * (1 + 1e-9))))

    moved = FlowState(state.problem, new_flow, wp, wm, state.mu)
    energy = moved.energy(moved.residual(mu=mu_next, shift=sol.delta_h))
    if energy > 0.25 + 1e-9:
        raise StepInfeasible(f"post-step energy {energy:.3e} above 1/4")
    before = moved.weight_sum
    centered = correct_to_central(moved, mu_next, shift=sol.delta_h, trace=trace)
    diag.weight_added_perfect += centered.weight_sum - before
    before = centered.weight_sum
    final = absorb_residual_into_weights(centered, sol.delta_h)
    diag.weight_added_absorb += final.weight_sum - before
    return final


def progress_step_1138(state: FlowState, delta: float,
                       diag: AccelDiagnostics,
                       trace: CorrectionTrace | None = None):
    """One regularized-Newton progress iteration (the 11/8-style step)."""
    state, dw, ddem, events = balance_weights(state, delta)
    diag.weight_added_balancing += dw
    diag.balancing_events += events
    balance_demand = ddem
    params = choose_params(state.weight_sum, state.problem.m, delta)
    star = build_star_graph(state.problem, state.w_plus, state.w_minus)
    h = delta * state.gradient()
    sol = solve_regularized_step(state, star, h, params, predictor_delta=delta)
    mu_next = state.mu / (1.0 + delta)
    out = perturbed_correction(state, sol, delta, mu_next, params, diag, trace)
    diag.rho_inf.append(sol.rho_inf)
    diag.step_demand.append(sol.routed_l1)
    if sol.diagnostics.get("stretch", {}).get("violations", 0):
        diag.stretch_violations += sol.diagnostics["stretch"]["violations"]
    return out, sol.routed + balance_demand


def progress_step_43(state: FlowState, delta: float,
                     diag: AccelDiagnostics,
                     trace: CorrectionTrace | None = None):
    """One smoothed-barrier progress iteration (the 4/3-style step)."""
    state, dw, ddem, events = balance_weights(state, delta)
    diag.weight_added_balancing += dw
    diag.balancing_events += events
    balance_demand = ddem
    if not balanced_mask(state, delta).all():
        raise ContractViolation("balancing left an imbalanced arc")
    w1 = state.weight_sum
    if delta <= 10.0 / math.sqrt(w1) and "delta-below-analysis-floor" not in diag.notes:
        # the analysis' lower bound is unsatisfiable at this size; congestion
        # is certified by measurement instead
        diag.notes.append("delta-below-analysis-floor")
    params = choose_params(w1, state.problem.m, delta)
    star = build_star_graph(state.problem, state.w_plus, state.w_minus)
    sol = solve_barrier_step(state, star, delta, params)
    diag.low_congestion.append(sol.diagnostics.get("low_congestion", 0.0))
    mu_next = state.mu / (1.0 + delta)
    moved = FlowState(state.problem, state.flow + sol.flow,
                      state.w_plus, state.w_minus, state.mu)
    before = moved.weight_sum
    absorbed = absorb_residual_into_weights(moved, sol.delta_h)
    diag.weight_added_absorb += absorbed.weight_sum - before
    dw_budget = (params.p * 1e12 * delta ** 4 * w1 ** (2 + 1.0 / params.p)
                 * math.log(max(w1, 3.0)) ** 2)
    if absorbed.weight_sum - before > dw_budget + 1e-9:
        raise StepInfeasible("barrier-step weight change above its stated budget")
    # fold residual solver leftovers into the weights via the usual machinery
    before = absorbed.weight_sum
    if absorbed.centrality_error(mu=mu_next) > 1e-10:
        out = correct_to_central(absorbed, mu_next, trace=trace)
    else:
        out = perfect_correction(absorbed, mu_next)
    diag.weight_added_perfect += out.weight_sum - before
    diag.rho_inf.append(sol.rho_inf)
    diag.step_demand.append(sol.routed_l1)
    if sol.diagnostics.get("stretch", {}).get("violations", 0):
        diag.stretch_violations += sol.diagnostics["stretch"]["violations"]
    return out, sol.routed + balance_demand


def accel_solve(state: FlowState, eps: float, method: str = "eleven8",
                delta_scale: float = 1.0, max_iters: int = 500_000,
                trace: CorrectionTrace | None = None):
    """Drive the gap below eps with the chosen progress step.

    Returns (state, ledger, diagnostics). The weight budget ||w||_1 <= 3m and
    componentwise weight monotonicity are asserted after every iteration; a
    budget breach aborts with diagnostics attached (the step size was too
    aggressive for this instance size).
    """
    p = state.problem
    diag = AccelDiagnostics()
    ledger = PerturbedDemand(target=p.demand.astype(float),
                             current=state.routed_demand())
    if p.m == 0:
        return state, ledger, diag
    if state.weight_sum > 2 * p.m + 1 + 1e-6:
        raise ContractViolation("accel needs a freshly initialized state")
    step = progress_step_1138 if method == "eleven8" else progress_step_43
    if method not in ("eleven8", "four3"):
        raise ConfigurationError(f"unknown accel method {method!r}")
    budget = WEIGHT_BUDGET_FACTOR * p.m
    base_delta = delta_schedule(p.m, method, delta_scale)
    for _ in range(max_iters):
        if state.gap <= eps:
            break
        delta = base_delta
        prev_wp, prev_wm = state.w_plus, state.w_minus
        try:
            nxt, moved = step(state, delta, diag, trace)
        except StepInfeasible as exc:
            diag.retries += 1
            try:
                nxt, moved = step(state, delta / 2.0, diag, trace)
            except StepInfeasible as exc2:
                raise NumericalFailure(
                    f"progress step failed twice: {exc}; retry: {exc2}") from exc2
        state = nxt
        ledger.record(moved)
        ledger.check(state)
        diag.iterations += 1
        if np.any(state.w_plus < prev_wp - 1e-12) or np.any(state.w_minus < prev_wm - 1e-12):
            raise NumericalFailure("weights decreased componentwise")
        if state.weight_sum > budget:
            raise NumericalFailure(
                f"weight budget breached: ||w||_1 = {state.weight_sum:.2f} > {budget:.1f} "
                f"(delta too large for m = {p.m}); diagnostics: {diag.to_dict()}")
        if not state.is_central():
            raise NumericalFailure("progress step left a non-central state")
        if diag.balancing_events > 1.5 / delta + 1:
            raise NumericalFailure("balancing events exceeded 3/(2 delta)")
    else:
        raise NumericalFailure("accel solve exceeded its iteration budget")
    return state, ledger, diag
