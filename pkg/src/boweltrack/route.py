"""Path-finding on the supervoxel graph.

Provides plain Dijkstra (the shortcut-prone baseline), an exact must-pass
solver over (node, visited-bitmask) states, the normalized simplified graph
over {start, end} + must-pass nodes, a dummy-node TSP solved by the
nearest-fragment heuristic with optional 2-opt refinement, and the expansion
of a tour back into a node path and polyline.
"""

from __future__ import annotations

import dataclasses
import heapq

import numpy as np

from .errors import InfeasibleError, InvariantError
from .rag import Rag
from .sampling import MustPassSet
from .volume_io import Polyline

MAX_EXACT_MUST_PASS = 20


@dataclasses.dataclass
class Route:
    """A realized path: graph nodes, their centroid polyline, diagnostics."""

    nodes: list
    polyline: Polyline
    total_cost: float
    legs: list = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if not self.nodes:
            raise InvariantError("route has no nodes")


@dataclasses.dataclass
class SimplifiedGraph:
    """Complete graph over V' = {start} + must-pass + {end}.

    costs[m, n] is the branch-normalized cost: shortest-path cost / M for
    pairs closer than delta, Euclidean distance / delta for far pairs, and
    distance / delta + 1 for near-but-unreachable pairs."""

    members: np.ndarray      # rag node index per V' position; [0]=start, [-1]=end
    positions: np.ndarray    # (n, 3) mm
    costs: np.ndarray        # (n, n) symmetric, zero diagonal
    cached_paths: dict       # (m, n) with m < n -> list of rag node indices
    normalizer: float
    delta: float

    def __post_init__(self):
        n = len(self.members)
        if self.costs.shape != (n, n):
            raise InvariantError("cost matrix shape mismatch")
        if not np.allclose(self.costs, self.costs.T):
            raise InvariantError("cost matrix must be symmetric")
        if np.any(np.diag(self.costs) != 0):
            raise InvariantError("cost matrix diagonal must be zero")
        if np.any(~np.isfinite(self.costs)) or np.any(self.costs < 0):
            raise InvariantError("costs must be finite and non-negative")

    @property
    def n_nodes(self):
        return len(self.members)


def dijkstra(rag: Rag, source: int):
    """Single-source shortest paths; ties resolved to the smallest
    predecessor id, making the returned tree canonical."""
    n = rag.n_nodes
    if not (0 <= source < n):
        raise ValueError(f"source {source} outside 0..{n - 1}")
    indptr, nbr, weight = rag.adjacency()
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, w in zip(nbr[indptr[u] : indptr[u + 1]], weight[indptr[u] : indptr[u + 1]]):
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, int(v)))
            elif nd == dist[v] and 0 <= u < pred[v]:
                pred[v] = u
    return dist, pred


def path_from_predecessors(pred: np.ndarray, source: int, target: int) -> list:
    path = [int(target)]
    while path[-1] != source:
        p = int(pred[path[-1]])
        if p < 0:
            raise InfeasibleError(f"node {target} unreachable from {source}")
        path.append(p)
    path.reverse()
    return path


def _route_from_nodes(rag: Rag, nodes: list, legs=None) -> Route:
    lookup = rag.edge_lookup()
    total = 0.0
    for a, b in zip(nodes, nodes[1:]):
        key = (min(a, b), max(a, b))
        if key in lookup:
            total += lookup[key][0]
    return Route(
        nodes=list(nodes),
        polyline=Polyline(rag.centroids[np.asarray(nodes, dtype=int)].copy()),
        total_cost=total,
        legs=legs or [],
    )


def shortest_path_baseline(rag: Rag, v_st: int, v_ed: int) -> Route:
    """Plain minimal-cost path; shortcuts through touching walls happily."""
    for node in (v_st, v_ed):
        if not (0 <= node < rag.n_nodes):
            raise ValueError(f"node {node} outside graph")
    dist, pred = dijkstra(rag, v_st)
    if not np.isfinite(dist[v_ed]):
        raise InfeasibleError(f"end node {v_ed} unreachable from start {v_st}")
    nodes = path_from_predecessors(pred, v_st, v_ed)
    route = _route_from_nodes(rag, nodes, legs=[{"pair": (v_st, v_ed), "source": "dijkstra"}])
    route.total_cost = float(dist[v_ed])
    return route


def constrained_dijkstra_exact(rag: Rag, v_st: int, v_ed: int, must_pass) -> Route:
    """Globally minimal walk from v_st to v_ed visiting every must-pass node,
    via Dijkstra over (node, visited-subset) states; revisits allowed."""
    mp_nodes = list(dict.fromkeys(int(v) for v in _must_pass_ids(must_pass)))
    if len(mp_nodes) > MAX_EXACT_MUST_PASS:
        raise ValueError(
            f"{len(mp_nodes)} must-pass nodes exceed the exact-solver limit "
            f"{MAX_EXACT_MUST_PASS}; state space grows as 2^k"
        )
    for node in (v_st, v_ed, *mp_nodes):
        if not (0 <= node < rag.n_nodes):
            raise ValueError(f"node {node} outside graph")

    bit_of = {node: 1 << k for k, node in enumerate(mp_nodes)}
    full = (1 << len(mp_nodes)) - 1
    indptr, nbr, weight = rag.adjacency()

    start_mask = bit_of.get(v_st, 0)
    best = {(v_st, start_mask): 0.0}
    pred = {}
    heap = [(0.0, v_st, start_mask)]
    goal = None
    while heap:
        d, u, mask = heapq.heappop(heap)
        if d > best.get((u, mask), np.inf):
            continue
        if u == v_ed and mask == full:
            goal = (u, mask)
            break
        for v, w in zip(nbr[indptr[u] : indptr[u + 1]],
                        weight[indptr[u] : indptr[u + 1]]):
            v = int(v)
            nmask = mask | bit_of.get(v, 0)
            nd = d + w
            state = (v, nmask)
            if nd < best.get(state, np.inf):
                best[state] = nd
                pred[state] = (u, mask)
                heapq.heappush(heap, (nd, v, nmask))
    if goal is None:
        missing = [n for n in mp_nodes + [v_ed]]
        raise InfeasibleError(
            f"no walk from {v_st} to {v_ed} covers all must-pass nodes {missing}"
        )

    states = [goal]
    while states[-1] in pred:
        states.append(pred[states[-1]])
    states.reverse()
    nodes = [s[0] for s in states]
    route = _route_from_nodes(rag, nodes, legs=[{"pair": (v_st, v_ed), "source": "exact"}])
    route.total_cost = float(best[goal])
    return route


def _must_pass_ids(must_pass):
    if must_pass is None:
        return []
    if isinstance(must_pass, MustPassSet):
        return [int(v) for v in must_pass.node_ids]
    return [int(v) for v in must_pass]


def build_simplified_graph(
    rag: Rag, v_st: int, v_ed: int, must_pass, delta: float
) -> SimplifiedGraph:
    """Metric-closure-style graph over start/must-pass/end nodes: near pairs
    carry normalized shortest-path cost, far pairs carry distance / delta."""
    if not (delta > 0):
        raise ValueError(f"delta must be positive, got {delta}")
    mp_nodes = [n for n in dict.fromkeys(_must_pass_ids(must_pass)) if n not in (v_st, v_ed)]
    members = np.asarray([v_st] + mp_nodes + [v_ed], dtype=np.int64)
    if len(members) < 2 or v_st == v_ed:
        raise ValueError("simplified graph needs at least distinct start and end")
    for node in members:
        if not (0 <= node < rag.n_nodes):
            raise ValueError(f"node {node} outside graph")

    n = len(members)
    positions = rag.centroids[members].copy()
    diff = positions[:, None, :] - positions[None, :, :]
    eucl = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    sp_cost = np.full((n, n), np.inf)
    cached = {}
    preds = []
    for k, node in enumerate(members):
        dist, pred = dijkstra(rag, int(node))
        sp_cost[k] = dist[members]
        preds.append(pred)

    near = eucl <= delta
    reachable = np.isfinite(sp_cost)
    store = near & reachable
    finite_near = sp_cost[store & ~np.eye(n, dtype=bool)]
    normalizer = float(finite_near.max()) if len(finite_near) else 0.0

    costs = np.zeros((n, n))
    for m in range(n):
        for k in range(m + 1, n):
            if near[m, k] and reachable[m, k]:
                costs[m, k] = sp_cost[m, k] / normalizer if normalizer > 0 else 0.0
                cached[(m, k)] = path_from_predecessors(
                    preds[m], int(members[m]), int(members[k])
                )
            elif near[m, k]:
                costs[m, k] = eucl[m, k] / delta + 1.0
            else:
                costs[m, k] = eucl[m, k] / delta
            costs[k, m] = costs[m, k]

    return SimplifiedGraph(
        members=members,
        positions=positions,
        costs=costs,
        cached_paths=cached,
        normalizer=normalizer,
        delta=delta,
    )


def solve_tsp(simplified: SimplifiedGraph, refine: bool = True) -> list:
    """Order V' from start to end via the dummy-node cycle construction.

    The dummy joins the endpoints with zero cost and everything else with a
    prohibitive-but-finite sentinel, so the cheapest cycle corresponds to an
    open start-to-end path.  Fragments are merged greedily by cheapest
    endpoint pair; optional 2-opt never worsens the tour."""
    n = simplified.n_nodes
    if n == 2:
        return [0, 1]

    sentinel = (n + 1) * (float(simplified.costs.max()) + 1.0)
    aug = np.full((n + 1, n + 1), sentinel)
    aug[:n, :n] = simplified.costs
    dummy = n
    aug[dummy, 0] = aug[0, dummy] = 0.0
    aug[dummy, n - 1] = aug[n - 1, dummy] = 0.0
    np.fill_diagonal(aug, 0.0)

    # The dummy's zero-cost edges are part of the construction, not choices;
    # join them up front so endpoint degree can't be exhausted by cost ties.
    order = _nearest_fragment_cycle(aug, prejoined=[(0, dummy), (n - 1, dummy)])
    at = order.index(dummy)
    path = order[at + 1 :] + order[:at]
    if path[0] != 0:
        path.reverse()
    if path[0] != 0 or path[-1] != n - 1:
        raise InvariantError("dummy-node cycle did not isolate the endpoints")

    if refine:
        path = _two_opt(path, simplified.costs)
    return path


def _nearest_fragment_cycle(cost: np.ndarray, prejoined=()) -> list:
    """Greedy cycle: repeatedly join the globally cheapest pair of fragment
    endpoints (ties to the lowest index pair), then close the last gap."""
    n = len(cost)
    fragment_of = np.arange(n)
    degree = np.zeros(n, dtype=np.int64)
    link = {k: [] for k in range(n)}

    def join(i, j):
        link[i].append(j)
        link[j].append(i)
        degree[i] += 1
        degree[j] += 1
        fragment_of[fragment_of == fragment_of[j]] = fragment_of[i]

    joins = 0
    for i, j in prejoined:
        join(i, j)
        joins += 1

    while joins < n - 1:
        open_end = degree < 2
        allowed = (
            open_end[:, None]
            & open_end[None, :]
            & (fragment_of[:, None] != fragment_of[None, :])
        )
        masked = np.where(allowed, cost, np.inf)
        flat = int(np.argmin(masked))         # C order: ties fall to lowest (i, j)
        i, j = divmod(flat, n)
        if not np.isfinite(masked[i, j]):
            raise InvariantError("fragment merging stalled")
        join(min(i, j), max(i, j))
        joins += 1

    tips = np.flatnonzero(degree < 2)
    if len(tips) != 2:
        raise InvariantError(f"open cycle has {len(tips)} endpoints")
    join(int(tips[0]), int(tips[1]))

    order = [0]
    prev = None
    while len(order) < n:
        nxt = [v for v in link[order[-1]] if v != prev]
        prev = order[-1]
        order.append(nxt[0])
    return order


def _two_opt(path: list, cost: np.ndarray) -> list:
    """Reverse interior segments while it strictly lowers the path cost;
    endpoints stay fixed."""
    path = list(path)
    n = len(path)
    improved = True
    while improved:
        improved = False
        for i in range(1, n - 2):
            for j in range(i + 1, n - 1):
                a, b = path[i - 1], path[i]
                c, d = path[j], path[j + 1]
                delta = (cost[a, c] + cost[b, d]) - (cost[a, b] + cost[c, d])
                if delta < -1e-12:
                    path[i : j + 1] = path[i : j + 1][::-1]
                    improved = True
    return path


def path_cost(order: list, costs: np.ndarray) -> float:
    return float(sum(costs[a, b] for a, b in zip(order, order[1:])))


def expand_tour(rag: Rag, order: list, simplified: SimplifiedGraph) -> Route:
    """Realize consecutive V' pairs as node paths: cached shortest paths when
    available, fresh Dijkstra otherwise, straight flagged segment as a last
    resort."""
    nodes = [int(simplified.members[order[0]])]
    legs = []
    for m, k in zip(order, order[1:]):
        a, b = int(simplified.members[m]), int(simplified.members[k])
        key = (min(m, k), max(m, k))
        seq = simplified.cached_paths.get(key)
        if seq is not None:
            seq = seq if seq[0] == a else seq[::-1]
            source = "cached"
        else:
            dist, pred = dijkstra(rag, a)
            if np.isfinite(dist[b]):
                seq = path_from_predecessors(pred, a, b)
                source = "dijkstra"
            else:
                seq = [a, b]
                source = "straight"
        legs.append({"pair": (a, b), "source": source, "n_nodes": len(seq)})
        nodes.extend(seq[1:])
    return _route_from_nodes(rag, nodes, legs=legs)
