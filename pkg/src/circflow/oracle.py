"""Ground-truth exact solvers used for differential testing.

``ssp_solve`` is successive shortest paths specialized to unit capacities:
residual presence is a bit per arc, no capacity arithmetic.
``brute_force_solve`` enumerates all 0/1 flows and is the oracle's oracle.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .graph import Problem

INF = float("inf")


@dataclass
class ExactSolution:
    status: str                      # "optimal" | "infeasible"
    flow: np.ndarray | None = None   # integral 0/1 flow when optimal
    cost: int | None = None
    potentials: np.ndarray | None = field(default=None)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _check_certificate(p: Problem, flow, pot) -> None:
    # reduced-cost nonnegativity on residual arcs certifies optimality
    red = p.costs + pot[p.tails] - pot[p.heads]
    forward_bad = (flow == 0) & (red < -1e-6)
    backward_bad = (flow == 1) & (red > 1e-6)
    if forward_bad.any() or backward_bad.any():
        raise AssertionError("ssp optimality certificate failed")


def ssp_solve(p: Problem) -> ExactSolution:
    """Exact integral optimum (or infeasibility) by successive shortest paths.

    Negative costs are handled by pre-saturating every negative arc, which
    makes every residual arc nonnegative; Dijkstra with potentials does the
    rest. Ties break by vertex index via the heap ordering.
    """
    n, m = p.n, p.m
    flow = (p.costs < 0).astype(np.int64)
    excess = p.flow_demand(flow) - p.demand
    pot = np.zeros(n)

    out_arcs = [[] for _ in range(n)]
    in_arcs = [[] for _ in range(n)]
    for e in range(m):
        out_arcs[p.tails[e]].append(e)
        in_arcs[p.heads[e]].append(e)

    def dijkstra(sources):
        dist = np.full(n, INF)
        pred = [None] * n  # (arc, +1 forward / -1 backward) into each vertex
        heap = [(0.0, int(s)) for s in sources]
        for s in sources:
            dist[s] = 0.0
        heapq.heapify(heap)
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u] + 1e-12:
                continue
            for e in out_arcs[u]:
                if flow[e] == 1:
                    continue
                v = p.heads[e]
                nd = d + p.costs[e] + pot[u] - pot[v]
                if nd < dist[v] - 1e-12:
                    dist[v] = nd
                    pred[v] = (e, +1)
                    heapq.heappush(heap, (nd, int(v)))
            for e in in_arcs[u]:
                if flow[e] == 0:
                    continue
                v = p.tails[e]
                nd = d - p.costs[e] + pot[u] - pot[v]
                if nd < dist[v] - 1e-12:
                    dist[v] = nd
                    pred[v] = (e, -1)
                    heapq.heappush(heap, (nd, int(v)))
        return dist, pred

    while True:
        senders = np.where(excess > 0)[0]
        if len(senders) == 0:
            break
        dist, pred = dijkstra(senders)
        sinks = [int(v) for v in np.where(excess < 0)[0] if dist[v] < INF]
        if not sinks:
            return ExactSolution(status="infeasible")
        t = min(sinks, key=lambda v: (dist[v], v))
        v = t
        while pred[v] is not None and excess[v] <= 0:
            e, direction = pred[v]
            flow[e] = 1 if direction > 0 else 0
            v = p.tails[e] if direction > 0 else p.heads[e]
        excess[v] -= 1
        excess[t] += 1
        pot += np.minimum(dist, dist[t])

    _check_certificate(p, flow, pot)
    cost = int(np.dot(p.costs, flow))
    return ExactSolution(status="optimal", flow=flow, cost=cost, potentials=pot)


def brute_force_solve(p: Problem) -> ExactSolution:
    """Enumerate all 2^m 0/1 flows; exact by construction. m <= 20 only."""
    if p.m > 20:
        raise ValidationError("brute force capped at 20 arcs")
    m = p.m
    if m == 0:
        if np.any(p.demand != 0):
            return ExactSolution(status="infeasible")
        return ExactSolution(status="optimal", flow=np.zeros(0, dtype=np.int64),
                             cost=0, potentials=np.zeros(p.n))
    best_cost = None
    best_flow = None
    block = 1 << 16
    for start in range(0, 1 << m, block):
        masks = np.arange(start, min(start + block, 1 << m), dtype=np.int64)
        bits = ((masks[:, None] >> np.arange(m)) & 1).astype(np.int64)
        net = np.zeros((len(masks), p.n), dtype=np.int64)
        for e in range(m):
            net[:, p.heads[e]] += bits[:, e]
            net[:, p.tails[e]] -= bits[:, e]
        ok = np.all(net == p.demand[None, :], axis=1)
        if not ok.any():
            continue
        costs = bits @ p.costs
        costs = np.where(ok, costs, np.iinfo(np.int64).max)
        i = int(np.argmin(costs))
        if best_cost is None or costs[i] < best_cost:
            best_cost = int(costs[i])
            best_flow = bits[i].copy()
    if best_cost is None:
        return ExactSolution(status="infeasible")
    return ExactSolution(status="optimal", flow=best_flow, cost=best_cost)
