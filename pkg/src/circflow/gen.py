"""Random instance generation for tests and the bench harness."""
from __future__ import annotations

import numpy as np

from .graph import Problem


def random_connected_arcs(n: int, m: int, rng: np.random.Generator):
    """m directed arcs over n vertices whose undirected skeleton is connected.

    Starts from a random spanning tree (random orientation) and fills the
    remainder with uniform non-loop pairs; needs m >= n - 1.
    """
    if m < n - 1:
        raise ValueError("need at least n-1 arcs for connectivity")
    tails, heads = [], []
    order = rng.permutation(n)
    for i in range(1, n):
        u = int(order[i])
        v = int(order[rng.integers(0, i)])
        if rng.random() < 0.5:
            u, v = v, u
        tails.append(u)
        heads.append(v)
    while len(tails) < m:
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        if u == v:
            continue
        tails.append(u)
        heads.append(v)
    return np.array(tails, dtype=np.int64), np.array(heads, dtype=np.int64)


def random_feasible_problem(n: int, m: int, max_cost: int,
                            rng: np.random.Generator,
                            demand_arcs: float = 0.5) -> Problem:
    """A feasible instance: the demand is what a random 0/1 flow routes.

    ``demand_arcs`` is the expected fraction of arcs saturated by the hidden
    witness flow, so total demand scales with m.
    """
    if n == 1:
        return Problem.from_arcs(1, [], [0])
    tails, heads = random_connected_arcs(n, m, rng)
    costs = rng.integers(-max_cost, max_cost + 1, size=m)
    witness = (rng.random(m) < demand_arcs).astype(np.int64)
    demand = np.zeros(n, dtype=np.int64)
    np.add.at(demand, heads, witness)
    np.subtract.at(demand, tails, witness)
    return Problem(n, tails, heads, costs, demand)


def random_problem(n: int, m: int, max_cost: int, rng: np.random.Generator,
                   feasible: bool = True) -> Problem:
    """Random instance; infeasible ones get a demand no 0/1 flow can route."""
    p = random_feasible_problem(n, m, max_cost, rng)
    if feasible or p.m == 0:
        return p
    demand = p.demand.copy()
    # overload one vertex beyond its degree so no unit-capacity flow exists
    v = int(rng.integers(0, n))
    deg_in = int(p.in_degrees()[v])
    bump = deg_in + 1 - int(demand[v])
    demand[v] += bump
    demand[(v + 1) % n] -= bump
    return Problem(n, p.tails, p.heads, p.costs, demand)
