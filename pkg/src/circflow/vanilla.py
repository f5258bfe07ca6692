"""Central-path machinery: initialization, corrections, and the sqrt(m) driver.

The correction loop drives the residual-routing energy through the quadratic
contraction E -> 2 E^2 until it is negligible, after which the perfect
correction turns the leftover into an exact centrality certificate by
reweighting the barriers (and giving back a sliver of mu).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, NumericalFailure, SolverFailure
from .graph import AugmentedProblem
from .state import FlowState

ENERGY_TARGET_CAP = 1e-20   # strict correction target (may sit under the float floor)
ENERGY_STALL_CAP = 1e-4     # stalling above this is a numerical failure
CORRECTION_CAP = 80
PERFECT_CORRECTION_LIMIT = 1e-2


@dataclass
class CorrectionTrace:
    """Per-step energy pairs and give-backs recorded for the test harness."""

    energy_pairs: list = field(default_factory=list)   # (E, E') per vanilla step
    predictor_energies: list = field(default_factory=list)
    iterations: int = 0
    mu_history: list = field(default_factory=list)
    stall_events: int = 0   # corrections that bottomed out on solver noise


def energy_target(weight_sum: float) -> float:
    return min(ENERGY_TARGET_CAP, weight_sum ** -22 / 16.0)


def compute_residual(state: FlowState, mu_prime: float) -> np.ndarray:
    """Predictor residual h = delta * (w+/s+ - w-/s-) for the step to mu_prime."""
    delta = state.mu / mu_prime - 1.0
    return delta * state.gradient()


def perfect_correction(state: FlowState, mu: float,
                       shift: np.ndarray | None = None,
                       corr=None) -> FlowState:
    """Reweight so the current flow is exactly central at (roughly) mu.

    Reads the congestion of the residual's correction flow and applies
    w' = w (1 + rho) / (1 - ||rho||_inf), mu' = mu / (1 - ||rho||_inf), which
    cancels the residual identically. Requires residual energy <= 1/100.
    ``corr`` may carry a correction already computed for this exact state.
    """
    work = state if state.mu == mu else replace(state, mu=mu)
    if corr is None:
        corr = work.correction_refined(work.residual(shift=shift))
    eps = corr.energy
    if eps > PERFECT_CORRECTION_LIMIT:
        raise ContractViolation(
            f"perfect correction needs energy <= 1/100, got {eps:.3e}")
    if state.problem.m:
        rho_max = max(float(np.max(np.abs(corr.rho_plus))),
                      float(np.max(np.abs(corr.rho_minus))))
    else:
        rho_max = 0.0
    scale = 1.0 / (1.0 - rho_max)
    new_wp = state.w_plus * (1.0 + corr.rho_plus) * scale
    new_wm = state.w_minus * (1.0 + corr.rho_minus) * scale
    new_mu = mu * scale
    dw = float(np.sum(new_wp - state.w_plus) + np.sum(new_wm - state.w_minus))
    budget = 4.0 * math.sqrt(max(eps, 0.0)) * work.weight_sum + 1e-9
    if dw > budget:
        raise NumericalFailure(f"perfect-correction weight change {dw:.3e} "
                               f"exceeds budget {budget:.3e}")
    if new_mu > mu * (1.0 + 2.0 * math.sqrt(max(eps, 0.0))) + 1e-15:
        raise NumericalFailure("perfect-correction mu give-back exceeds bound")
    out = FlowState(state.problem, state.flow, new_wp, new_wm, new_mu)
    return out


def correct_to_central(state: FlowState, mu: float,
                       shift: np.ndarray | None = None,
                       trace: CorrectionTrace | None = None) -> FlowState:
    """Vanilla residual-correction loop followed by a perfect correction.

    Pushes electrical correction flows until the residual energy reaches the
    strict target (or stalls at the numerical floor below ENERGY_STALL_OK),
    then hands off to ``perfect_correction``. The entry energy must be <= 1/4.
    """
    work = replace(state, mu=mu)
    target = energy_target(work.weight_sum)
    g = work.residual(shift=shift)
    corr = work.correction(g)
    energy = corr.energy
    if energy > 0.25 + 1e-9:
        raise ContractViolation(f"correction loop entered with energy {energy:.4f} > 1/4")
    # cancellation noise in the residual puts a scale-dependent floor under
    # the measurable energy; stalling under the cap is treated as converged
    # (the perfect correction is exact algebra regardless), stalling above it
    # is a genuine numerical failure
    stall_ok = ENERGY_STALL_CAP
    stalls = 0
    for _ in range(CORRECTION_CAP):
        if energy <= target:
            break
        work = work.with_flow(work.flow + corr.flow)
        nxt = work.correction(work.residual(shift=shift))
        if trace is not None:
            trace.energy_pairs.append((energy, nxt.energy))
        if nxt.energy > 2.0 * energy * energy + 1e-12:
            stalls += 1
            if stalls >= 2:
                if nxt.energy <= stall_ok:
                    if trace is not None:
                        trace.stall_events += 1
                    corr, energy = nxt, nxt.energy
                    break
                raise NumericalFailure(
                    f"energy contraction stalled at {nxt.energy:.3e}")
        else:
            stalls = 0
        floored = energy <= stall_ok and nxt.energy > 1e-3 * energy
        corr, energy = nxt, nxt.energy
        if floored:
            if trace is not None:
                trace.stall_events += 1
            break
    else:
        if energy > stall_ok:
            raise NumericalFailure(
                f"correction loop hit iteration cap at energy {energy:.3e}")
    r = work.resistances()
    deep = len(r) and float(np.max(r)) >= 1e8 * float(np.min(r))
    # at deep conditioning the congestion must come from the refined solve
    return perfect_correction(work, mu, shift=shift,
                              corr=None if deep else corr)


def initialize(ap: AugmentedProblem, trace: CorrectionTrace | None = None) -> FlowState:
    """Exactly central start: half flow, unit weights, mu near ||c||_2."""
    p = ap.problem
    m = p.m
    cnorm = float(np.linalg.norm(p.costs))
    mu0 = cnorm if cnorm > 0 else 1.0
    state = FlowState(p, np.full(m, 0.5), np.ones(m), np.ones(m), mu0)
    if m == 0:
        return state
    try:
        state = correct_to_central(state, mu0, trace=trace)
    except (NumericalFailure, ContractViolation, SolverFailure) as exc:
        raise NumericalFailure(f"initial centering failed: {exc}") from exc
    if not state.is_central():
        raise NumericalFailure("initialization left a non-central state")
    return state


def vanilla_solve(state: FlowState, eps: float,
                  trace: CorrectionTrace | None = None,
                  max_iters: int = 200_000) -> FlowState:
    """Predictor-corrector loop at delta = 1/sqrt(2 ||w||_1) until gap <= eps.

    Accepts any predictor step whose congestion stays within 1/2 (slacks
    remain positive); otherwise the step is retried at half the delta, which
    scales the residual linearly because the state is exactly central.
    """
    if state.problem.m == 0:
        return state
    halvings_cap = 60
    for _ in range(max_iters):
        if state.gap <= eps:
            return state
        delta = 1.0 / math.sqrt(2.0 * state.weight_sum)
        h = delta * state.gradient()
        corr = state.correction(h)
        if trace is not None:
            trace.predictor_energies.append(corr.energy)
            trace.mu_history.append(state.mu)
            trace.iterations += 1
        accepted = None
        for _half in range(halvings_cap):
            rho_max = max(float(np.max(np.abs(corr.rho_plus))),
                          float(np.max(np.abs(corr.rho_minus))))
            if rho_max <= 0.5:
                accepted = (delta, corr)
                break
            delta *= 0.5
            h = delta * state.gradient()
            corr = state.correction(h)
        if accepted is None:
            raise SolverFailure("predictor congestion would not shrink below 1/2")
        delta, corr = accepted
        stepped = state.with_flow(state.flow + corr.flow)
        state = correct_to_central(stepped, state.mu / (1.0 + delta), trace=trace)
    raise SolverFailure("vanilla solve exceeded its iteration budget")
