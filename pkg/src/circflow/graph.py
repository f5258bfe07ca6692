"""Instance representation, validation, parsing, and the two graph transformations.

Conventions used throughout the package:

* vertices are 0-based integers; arc e = (tails[e], heads[e]) carries flow
  from tail to head, capacity interval [0, 1];
* the demand of a vertex is net inflow: d_u = inflow(u) - outflow(u);
* DIMACS node lines are supply-positive (net outflow), so d_u = -supply_u
  at the parse boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UnsupportedCapacityError, ValidationError


@dataclass
class Problem:
    """A unit-capacity minimum-cost-flow instance.

    Validated on construction: balanced integer demand, integer costs,
    no self-loops, and a connected underlying undirected graph
    (parallel arcs are allowed; the initialization augmentation needs them).
    """

    n: int
    tails: np.ndarray
    heads: np.ndarray
    costs: np.ndarray
    demand: np.ndarray
    aux_mask: np.ndarray = field(default=None)  # True on initialization arcs

    def __post_init__(self):
        self.tails = np.asarray(self.tails, dtype=np.int64)
        self.heads = np.asarray(self.heads, dtype=np.int64)
        self.costs = np.asarray(self.costs, dtype=np.int64)
        self.demand = np.asarray(self.demand, dtype=np.int64)
        if self.aux_mask is None:
            self.aux_mask = np.zeros(self.m, dtype=bool)
        else:
            self.aux_mask = np.asarray(self.aux_mask, dtype=bool)
        self._validate()

    @property
    def m(self) -> int:
        return len(self.tails)

    @property
    def max_cost(self) -> int:
        """Declared cost bound W (0 for costless instances)."""
        return int(np.max(np.abs(self.costs))) if self.m else 0

    def _validate(self):
        if self.n < 1:
            raise ValidationError("instance needs at least one vertex")
        if not (len(self.heads) == len(self.costs) == self.m):
            raise ValidationError("arc arrays disagree in length")
        if len(self.demand) != self.n:
            raise ValidationError("demand vector length != vertex count")
        if self.m:
            if self.tails.min() < 0 or self.tails.max() >= self.n:
                raise ValidationError("arc tail out of range")
            if self.heads.min() < 0 or self.heads.max() >= self.n:
                raise ValidationError("arc head out of range")
            if np.any(self.tails == self.heads):
                raise ValidationError("self-loops are not allowed")
        if int(self.demand.sum()) != 0:
            raise ValidationError("demands must sum to zero")
        if not self._connected():
            raise ValidationError(
                "underlying graph is disconnected; split the instance and "
                "solve the components separately")

    def _connected(self) -> bool:
        if self.n == 1:
            return True
        if self.m == 0:
            return False
        # union-find over undirected edges
        parent = np.arange(self.n)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for u, v in zip(self.tails, self.heads):
            ru, rv = find(u), find(v)
            if ru != rv:
                parent[ru] = rv
        root = find(0)
        return all(find(v) == root for v in range(self.n))

    # -- incidence helpers -------------------------------------------------

    def flow_demand(self, flow: np.ndarray) -> np.ndarray:
        """Net inflow per vertex routed by ``flow`` (d = A f)."""
        d = np.zeros(self.n)
        np.add.at(d, self.heads, flow)
        np.subtract.at(d, self.tails, flow)
        return d

    def pot_diff(self, phi: np.ndarray) -> np.ndarray:
        """Per-arc potential drop tail minus head (the image of the incidence operator)."""
        return phi[self.tails] - phi[self.heads]

    def div(self, x: np.ndarray) -> np.ndarray:
        """Adjoint of pot_diff: per-vertex signed sum of arc values."""
        out = np.zeros(self.n)
        np.add.at(out, self.tails, x)
        np.subtract.at(out, self.heads, x)
        return out

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.heads, minlength=self.n)

    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.tails, minlength=self.n)

    # -- serialization -----------------------------------------------------

    def to_dimacs(self) -> str:
        lines = [f"p min {self.n} {self.m}"]
        for v in range(self.n):
            supply = -int(self.demand[v])
            if supply != 0:
                lines.append(f"n {v + 1} {supply}")
        for t, h, c in zip(self.tails, self.heads, self.costs):
            lines.append(f"a {t + 1} {h + 1} 0 1 {c}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "n": self.n,
            "arcs": [[int(t), int(h), int(c)]
                     for t, h, c in zip(self.tails, self.heads, self.costs)],
            "demand": [int(d) for d in self.demand],
        })

    @classmethod
    def from_arcs(cls, n, arcs, demand) -> "Problem":
        """Build from a list of (tail, head, cost) triples."""
        arcs = list(arcs)
        tails = [a[0] for a in arcs]
        heads = [a[1] for a in arcs]
        costs = [a[2] for a in arcs]
        return cls(n, np.array(tails, dtype=np.int64), np.array(heads, dtype=np.int64),
                   np.array(costs, dtype=np.int64), np.asarray(demand, dtype=np.int64))


def parse_dimacs(text: str) -> Problem:
    """Parse the DIMACS minimum-cost-flow format into a Problem.

    Only unit capacities (``low`` 0, ``cap`` 1) are accepted; node lines are
    supply-positive and mapped to internal net-inflow demands.
    """
    n = m = None
    supplies = {}
    arcs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "p":
                if len(parts) != 4 or parts[1] != "min":
                    raise ParseError("expected 'p min <n> <m>'", lineno)
                if n is not None:
                    raise ParseError("duplicate problem line", lineno)
                n, m = int(parts[2]), int(parts[3])
            elif kind == "n":
                if len(parts) != 3:
                    raise ParseError("expected 'n <id> <supply>'", lineno)
                supplies[int(parts[1])] = supplies.get(int(parts[1]), 0) + int(parts[2])
            elif kind == "a":
                if len(parts) != 6:
                    raise ParseError("expected 'a <tail> <head> <low> <cap> <cost>'", lineno)
                t, h, low, cap, cost = (int(x) for x in parts[1:])
                if low != 0 or cap != 1:
                    raise UnsupportedCapacityError(
                        f"line {lineno}: only unit capacities are supported "
                        f"(got low={low}, cap={cap})")
                arcs.append((t - 1, h - 1, cost))
            else:
                raise ParseError(f"unknown line type {kind!r}", lineno)
        except ValueError as exc:
            raise ParseError(f"bad integer field ({exc})", lineno) from None
    if n is None:
        raise ParseError("missing problem line", 0)
    if m is not None and m != len(arcs):
        raise ParseError(f"problem line declares {m} arcs, found {len(arcs)}", 0)
    if sum(supplies.values()) != 0:
        raise ValidationError("node supplies do not sum to zero")
    demand = np.zeros(n, dtype=np.int64)
    for node, s in supplies.items():
        if not (1 <= node <= n):
            raise ValidationError(f"node id {node} out of range")
        demand[node - 1] = -s
    return Problem.from_arcs(n, arcs, demand)


def parse_json(text: str) -> Problem:
    """Parse the JSON instance dump produced by ``Problem.to_json``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), exc.lineno) from None
    return Problem.from_arcs(obj["n"], [tuple(a) for a in obj["arcs"]], obj["demand"])


def parse_problem(text: str) -> Problem:
    """Parse either format; JSON is detected by the leading brace."""
    if text.lstrip().startswith("{"):
        return parse_json(text)
    return parse_dimacs(text)


@dataclass
class AugmentedProblem:
    """A Problem plus high-cost initialization arcs through a hub vertex.

    ``problem`` is the combined instance on V + {v0}; its ``aux_mask`` marks
    the added arcs, all costed at (m + 1) * max |c| of the base instance.
    The combined instance always admits the all-halves flow for its demand.
    """

    base: Problem
    problem: Problem
    hub: int | None  # None when the half-flow already routes the demand

    @property
    def aux_cost(self) -> int:
        mask = self.problem.aux_mask
        return int(self.problem.costs[mask][0]) if mask.any() else 0


def augment_for_init(base: Problem) -> AugmentedProblem:
    """Add hub arcs so that pushing 1/2 on every arc routes the demand.

    The half-flow leaves an excess of inflow - outflow - d at each vertex of
    2*excess half-units; positive excess drains to the hub, negative excess
    draws from it. Excess magnitudes are bounded by vertex degrees only when
    |d_v| <= deg(v); larger demands still augment correctly and are caught as
    infeasible after the solve.
    """
    n, m = base.n, base.m
    hub = n
    half_net = 0.5 * (base.in_degrees() - base.out_degrees())
    excess = half_net - base.demand  # flow surplus at v under the half-flow
    counts = np.rint(2 * np.abs(excess)).astype(np.int64)
    c_inf = (m + 1) * base.max_cost
    tails = list(base.tails)
    heads = list(base.heads)
    costs = list(base.costs)
    for v in range(n):
        k = int(counts[v])
        if k == 0:
            continue
        if excess[v] > 0:
            tails += [v] * k
            heads += [hub] * k
        else:
            tails += [hub] * k
            heads += [v] * k
        costs += [c_inf] * k
    if not counts.any():
        # half-flow already routes d; no hub needed (it would be isolated)
        return AugmentedProblem(base=base, problem=base, hub=None)
    demand = np.concatenate([base.demand, [0]])
    aux = np.zeros(len(tails), dtype=bool)
    aux[m:] = True
    combined = Problem(n + 1, np.array(tails), np.array(heads),
                       np.array(costs), demand, aux_mask=aux)
    half = np.full(combined.m, 0.5)
    gap = combined.flow_demand(half) - demand
    if np.max(np.abs(gap)) > 1e-9:
        raise ValidationError("augmentation failed to balance the half-flow")
    return AugmentedProblem(base=base, problem=combined, hub=hub)


@dataclass
class StarGraph:
    """Preconditioning star: ceil(weighted degree) parallel edges v -> v_star.

    Star edges are oriented toward the extra vertex; flows on them are signed,
    which is equivalent to the undirected reading since only magnitudes and
    even powers of star flows enter any objective.
    """

    n: int                 # base vertex count; the star vertex has index n
    edge_from: np.ndarray  # base endpoint of each star edge

    @property
    def count(self) -> int:
        return len(self.edge_from)


def build_star_graph(problem: Problem, w_plus: np.ndarray, w_minus: np.ndarray) -> StarGraph:
    """Star preconditioner for the given barrier weights (all positive)."""
    if problem.m and (np.min(w_plus) <= 0 or np.min(w_minus) <= 0):
        raise ValidationError("star construction needs strictly positive weights")
    wd = np.zeros(problem.n)
    per_arc = w_plus + w_minus
    np.add.at(wd, problem.tails, per_arc)
    np.add.at(wd, problem.heads, per_arc)
    counts = np.maximum(np.ceil(wd - 1e-12).astype(np.int64), 0)  # guard exact integers
    edge_from = np.repeat(np.arange(problem.n), counts)
    return StarGraph(n=problem.n, edge_from=edge_from)
