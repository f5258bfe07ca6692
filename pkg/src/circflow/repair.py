"""Rounding a near-optimal central flow to an exact integral optimum.

The flow instance is rewritten as bipartite perfect b-matching: one left
vertex per graph vertex, one right vertex per arc, and a two-edge gadget per
arc whose split encodes the arc's flow value. The central state supplies
near-optimal duals; half-integral snapping, tight-cycle canceling, and
shortest augmenting paths then deliver exact primal-dual optimality for the
*original* demand, however far the maintained demand drifted.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .graph import AugmentedProblem, Problem
from .state import FlowState

TIGHT_EPS = 1e-9


@dataclass
class MatchingInstance:
    """Bipartite perfect b-matching encoding of a unit-capacity flow instance.

    Gadget for arc e = (u, v): edge (u, r_e) with the arc cost carrying
    x_tail, and edge (v, r_e) with cost zero carrying x_head; each right
    vertex demands exactly one unit, so x_tail + x_head = 1 throughout.
    """

    problem: Problem
    x_tail: np.ndarray
    x_head: np.ndarray
    y_left: np.ndarray    # duals on graph vertices
    y_right: np.ndarray   # duals on arc vertices
    b_left: np.ndarray    # left-side demands (right side is all ones)
    phases: int = 0

    def reduced_tail(self) -> np.ndarray:
        p = self.problem
        return p.costs - self.y_left[p.tails] - self.y_right

    def reduced_head(self) -> np.ndarray:
        return -self.y_left[self.problem.heads] - self.y_right

    def dual_feasible(self, tol=TIGHT_EPS) -> bool:
        return (self.reduced_tail().min(initial=0.0) >= -tol
                and self.reduced_head().min(initial=0.0) >= -tol)

    def left_sums(self) -> np.ndarray:
        p = self.problem
        sums = np.zeros(p.n)
        np.add.at(sums, p.tails, self.x_tail)
        np.add.at(sums, p.heads, self.x_head)
        return sums

    def duality_gap(self) -> float:
        return float(self.x_tail @ self.reduced_tail()
                     + self.x_head @ self.reduced_head())


def flow_to_matching(problem: Problem, state: FlowState,
                     hub: int | None = None) -> MatchingInstance:
    """Encode a central state as a feasible matching pair with gap mu*||w||_1.

    Left duals come from propagating the centrality relation
    y_u - y_v = mu w+/s+ - mu w-/s- + c_e over a spanning traversal; the
    relation must be consistent on every non-tree arc, which is exactly
    exact centrality and is checked to 1e-7.
    """
    p = problem
    m = p.m
    mu = state.mu
    if m == 0:
        return MatchingInstance(p, np.zeros(0), np.zeros(0), np.zeros(p.n),
                                np.zeros(0), np.zeros(p.n))
    if state.gap > m ** -2 * (1 + 1e-6):
        raise ContractViolation(
            f"matching conversion needs gap <= m^-2, got {state.gap:.3e}")
    rel = mu * state.gradient() + p.costs
    # spanning traversal ignoring orientation
    adj = [[] for _ in range(p.n)]
    for e in range(m):
        adj[p.tails[e]].append(e)
        adj[p.heads[e]].append(e)
    root = hub if hub is not None else 0
    y = np.full(p.n, np.nan)
    y[root] = 0.0
    stack = [root]
    while stack:
        u = stack.pop()
        for e in adj[u]:
            t, h = p.tails[e], p.heads[e]
            other = h if t == u else t
            if np.isnan(y[other]):
                y[other] = y[u] - rel[e] if t == u else y[u] + rel[e]
                stack.append(other)
    scale = max(1.0, float(np.max(np.abs(rel))), float(np.max(np.abs(y))))
    err = float(np.max(np.abs(y[p.tails] - y[p.heads] - rel)))
    if err > 1e-7 * scale:
        raise ContractViolation(
            f"potential propagation inconsistent by {err:.3e}; state not central")
    y_right = -y[p.tails] - mu * state.w_minus / state.s_minus + p.costs
    alt = -y[p.heads] - mu * state.w_plus / state.s_plus
    # the disagreement of the two formulas IS the propagation residual, so it
    # inherits the same tolerance as the consistency gate above
    if float(np.max(np.abs(y_right - alt))) > 1e-7 * scale:
        raise ContractViolation("the two right-dual formulas disagree")
    d_cur = state.routed_demand()
    b_left = p.in_degrees().astype(float) - d_cur
    inst = MatchingInstance(p, state.flow.copy(), 1.0 - state.flow, y,
                            y_right, b_left)
    gap = inst.duality_gap()
    # the identity holds to the precision the potential propagation achieved
    if abs(gap - state.gap) > 1e-9 * max(1.0, state.gap) + m * err:
        raise ContractViolation(
            f"matching gap {gap:.6e} disagrees with mu ||w||_1 = {state.gap:.6e}")
    return inst


def _snap_duals(inst: MatchingInstance) -> None:
    """Half-integral duals: round left, relabel right to the tightest feasible."""
    p = inst.problem
    inst.y_left = np.round(2.0 * inst.y_left) / 2.0
    inst.y_right = np.minimum(p.costs - inst.y_left[p.tails],
                              -inst.y_left[p.heads])


def _concentrate_on_tight(inst: MatchingInstance) -> None:
    """Move each gadget's mass onto its tight side(s); drops the tiny
    complementary-slackness violations left by the positive gap."""
    rt = inst.reduced_tail()
    rh = inst.reduced_head()
    tail_loose = rt > TIGHT_EPS
    head_loose = rh > TIGHT_EPS
    both = tail_loose & head_loose
    if both.any():
        raise ContractViolation("gadget with no tight edge after relabeling")
    inst.x_head[tail_loose] = 1.0
    inst.x_tail[tail_loose] = 0.0
    inst.x_tail[head_loose] = 1.0
    inst.x_head[head_loose] = 0.0


def _cancel_fractional_cycles(inst: MatchingInstance) -> None:
    """Push flow around cycles of doubly-tight fractional gadgets.

    Both directions around such a cycle cost nothing, so pushing toward
    integrality changes neither feasibility nor the objective; each push
    makes at least one gadget integral.
    """
    p = inst.problem
    eps = 1e-12

    def fractional_edges():
        return np.where((inst.x_tail > eps) & (inst.x_tail < 1 - eps))[0]

    while True:
        frac = fractional_edges()
        if len(frac) == 0:
            return
        adj = {}
        for e in frac:
            adj.setdefault(p.tails[e], []).append(e)
            adj.setdefault(p.heads[e], []).append(e)
        cycle = _find_cycle(adj, p)
        if cycle is None:
            return
        # cycle: list of (edge, from_vertex, to_vertex); shift one unit of
        # gadget mass from the from-side to the to-side, coherently
        room = []
        for e, a, b in cycle:
            xa = inst.x_tail[e] if a == p.tails[e] else inst.x_head[e]
            xb = inst.x_tail[e] if b == p.tails[e] else inst.x_head[e]
            room.append(min(xa, 1.0 - xb))
        push = min(room)
        for e, a, b in cycle:
            if a == p.tails[e]:
                inst.x_tail[e] -= push
                inst.x_head[e] += push
            else:
                inst.x_head[e] -= push
                inst.x_tail[e] += push


def _find_cycle(adj, p: Problem):
    """A simple cycle in the fractional-gadget multigraph, or None.

    Leaves are pruned first; in what remains every vertex has two incident
    gadgets, so a greedy walk that never immediately reverses must close on
    itself. Handles parallel gadgets (2-cycles).
    """
    alive = {e for edges in adj.values() for e in edges}
    deg = {v: len(edges) for v, edges in adj.items()}
    queue = [v for v, d in deg.items() if d <= 1]
    incident = {v: set(edges) for v, edges in adj.items()}
    while queue:
        v = queue.pop()
        for e in list(incident[v]):
            if e not in alive:
                continue
            alive.discard(e)
            w = p.heads[e] if p.tails[e] == v else p.tails[e]
            incident[w].discard(e)
            deg[w] -= 1
            if deg[w] == 1:
                queue.append(w)
        incident[v].clear()
        deg[v] = 0
    if not alive:
        return None
    start = min(v for v, d in deg.items() if d >= 2)
    walk = []            # (edge, from, to)
    position = {start: 0}
    v, came_by = start, None
    while True:
        choices = sorted(e for e in incident[v] if e != came_by)
        e = choices[0] if choices else came_by
        w = p.heads[e] if p.tails[e] == v else p.tails[e]
        walk.append((e, v, w))
        if w in position:
            return walk[position[w]:]
        position[w] = len(walk)
        v, came_by = w, e


def _round_fractional_forest(inst: MatchingInstance) -> None:
    """Independently round leftover fractional gadgets (a forest after the
    cycle pass); right-side conservation stays exact and the left-side error
    joins the imbalance repaired by the augmentation phases."""
    eps = 1e-12
    frac = (inst.x_tail > eps) & (inst.x_tail < 1 - eps)
    rounded = np.where(inst.x_tail[frac] >= 0.5, 1.0, 0.0)
    inst.x_tail[frac] = rounded
    inst.x_head[frac] = 1.0 - rounded


def fix_matching(inst: MatchingInstance, b_hat: np.ndarray):
    """Exact integral optimum for left demands ``b_hat``.

    Returns (instance, feasible). The instance's duals stay feasible after
    every phase; on success complementary slackness is exact. Infeasibility
    is a verdict, not an exception.
    """
    p = inst.problem
    b_hat = np.asarray(b_hat, dtype=float)
    if len(b_hat) != p.n or np.any(b_hat < -TIGHT_EPS) \
            or abs(float(b_hat.sum()) - p.m) > TIGHT_EPS \
            or np.max(np.abs(b_hat - np.round(b_hat)), initial=0.0) > TIGHT_EPS:
        return inst, False
    if p.m == 0:
        return inst, bool(np.all(np.abs(b_hat) < TIGHT_EPS))
    _snap_duals(inst)
    _concentrate_on_tight(inst)
    _cancel_fractional_cycles(inst)
    _round_fractional_forest(inst)
    excess = inst.left_sums() - b_hat
    excess = np.round(excess)

    by_tail = [[] for _ in range(p.n)]
    by_head = [[] for _ in range(p.n)]
    for e in range(p.m):
        by_tail[p.tails[e]].append(e)
        by_head[p.heads[e]].append(e)

    phases = 0
    while True:
        senders = np.where(excess > 0.5)[0]
        if len(senders) == 0:
            break
        dist, pred = _dijkstra_moves(inst, by_tail, by_head, senders)
        sinks = [int(v) for v in np.where(excess < -0.5)[0] if dist[v] < math.inf]
        if not sinks:
            return inst, False
        t = min(sinks, key=lambda v: (dist[v], v))
        _lift_duals(inst, dist, dist[t])
        v = t
        while pred[v] is not None and excess[v] <= 0.5:
            e, came_from = pred[v]
            if came_from == p.tails[e]:
                inst.x_tail[e], inst.x_head[e] = 0.0, 1.0
            else:
                inst.x_head[e], inst.x_tail[e] = 0.0, 1.0
            v = came_from
        excess[v] -= 1
        excess[t] += 1
        phases += 1
        if not inst.dual_feasible():
            raise ContractViolation("augmentation broke dual feasibility")
    inst.phases = phases
    return inst, True


def _dijkstra_moves(inst: MatchingInstance, by_tail, by_head, sources):
    """Shortest alternating moves between left vertices.

    Moving a unit from a to b through gadget e (a currently carries it) has
    reduced cost r_{b,e} >= 0; the carried side is tight, so these lengths
    are exactly the classical Hungarian quantities.
    """
    p = inst.problem
    rt = inst.reduced_tail()
    rh = inst.reduced_head()
    n = p.n
    dist = np.full(n, math.inf)
    pred = [None] * n
    heap = [(0.0, int(s)) for s in sources]
    for s in sources:
        dist[s] = 0.0
    heapq.heapify(heap)
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u] + 1e-12:
            continue
        for e in by_tail[u]:
            if inst.x_tail[e] > 0.5:  # move toward the head side
                v, w = p.heads[e], max(rh[e], 0.0)
                if d + w < dist[v] - 1e-12:
                    dist[v] = d + w
                    pred[v] = (e, u)
                    heapq.heappush(heap, (dist[v], int(v)))
        for e in by_head[u]:
            if inst.x_head[e] > 0.5:  # move toward the tail side
                v, w = p.tails[e], max(rt[e], 0.0)
                if d + w < dist[v] - 1e-12:
                    dist[v] = d + w
                    pred[v] = (e, u)
                    heapq.heappush(heap, (dist[v], int(v)))
    return dist, pred


def _lift_duals(inst: MatchingInstance, dist, dist_t) -> None:
    """Classical dual update after a Dijkstra phase.

    Left duals drop by (dist_t - dist)+ and right duals re-anchor at their
    carrier sides, which keeps every reduced cost nonnegative and makes the
    shortest-path gadgets tight for the upcoming augmentation.
    """
    p = inst.problem
    drop = dist_t - np.minimum(np.where(np.isfinite(dist), dist, dist_t), dist_t)
    inst.y_left = inst.y_left - drop
    carrier_tail = inst.x_tail > 0.5
    inst.y_right = np.where(carrier_tail,
                            p.costs - inst.y_left[p.tails],
                            -inst.y_left[p.heads])


def matching_to_flow(inst: MatchingInstance):
    """Integral flow plus dual slack certificate from an optimal matching."""
    p = inst.problem
    flow = np.round(inst.x_tail).astype(np.int64)
    z_minus = inst.reduced_tail()
    z_plus = inst.reduced_head()
    if z_minus.min(initial=0.0) < -TIGHT_EPS or z_plus.min(initial=0.0) < -TIGHT_EPS:
        raise ContractViolation("negative dual slack on an optimal matching")
    if p.m and (float(np.max(np.abs(flow * z_minus))) > 1e-7
                or float(np.max(np.abs((1 - flow) * z_plus))) > 1e-7):
        raise ContractViolation("complementary slackness violated")
    return flow, z_plus, z_minus


@dataclass
class RepairResult:
    status: str          # "optimal" | "infeasible"
    flow: np.ndarray | None
    cost: int | None
    phases: int = 0
    imbalance: float = 0.0


def repair_flow(ap: AugmentedProblem, state: FlowState) -> RepairResult:
    """End-to-end repair against the original (integral) demand.

    Fixes the matching for the augmented instance's demand, then inspects the
    auxiliary arcs: any that still carry flow certify that the base demand is
    unroutable under the unit capacities.
    """
    p = ap.problem
    base = ap.base
    if p.m == 0:
        feasible = not np.any(base.demand != 0)
        return RepairResult(status="optimal" if feasible else "infeasible",
                            flow=np.zeros(0, dtype=np.int64) if feasible else None,
                            cost=0 if feasible else None)
    inst = flow_to_matching(p, state, hub=ap.hub)
    b_hat = p.in_degrees().astype(float) - p.demand
    imbalance = float(np.sum(np.abs(inst.b_left - b_hat)))
    inst, ok = fix_matching(inst, b_hat)
    if not ok:
        return RepairResult(status="infeasible", flow=None, cost=None,
                            phases=inst.phases, imbalance=imbalance)
    flow, _, _ = matching_to_flow(inst)
    routed = p.flow_demand(flow)
    if np.max(np.abs(routed - p.demand)) > 1e-9:
        raise ContractViolation("repaired flow misses the target demand")
    if np.any(flow[p.aux_mask] != 0):
        return RepairResult(status="infeasible", flow=None, cost=None,
                            phases=inst.phases, imbalance=imbalance)
    base_flow = flow[:base.m]
    cost = int(np.dot(base.costs, base_flow))
    return RepairResult(status="optimal", flow=base_flow, cost=cost,
                        phases=inst.phases, imbalance=imbalance)
