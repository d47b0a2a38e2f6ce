"""Exact 1-Wasserstein distance between empirical feature distributions.

Distances are computed by an exact transportation-simplex solver on the
bipartite graph with uniform marginals 1/n and 1/m, Euclidean ground costs.
Used as the task-group metric: clouds are invariant features of observation
buffers, so symmetric task variants collapse to (near) zero distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FeatureCloud:
    """n points in R^d with uniform weights 1/n."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("FeatureCloud needs an (n, d) array with n >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("FeatureCloud entries must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class TransportPlan:
    """Optimal coupling gamma_plan (n x m) and its total cost."""

    gamma_plan: np.ndarray
    cost: float


def cost_matrix(x: FeatureCloud, y: FeatureCloud) -> np.ndarray:
    """M[i, l] = Euclidean distance between x_i and y_l."""
    if x.dim != y.dim:
        raise ValueError(f"feature dimensions differ: {x.dim} vs {y.dim}")
    diff = x.points[:, None, :] - y.points[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    """Initial basic feasible solution: n+m-1 cells tracing the NW path."""
    n, m = len(a), len(b)
    ra = a.copy()
    rb = b.copy()
    flows = {}
    i = j = 0
    while True:
        f = min(ra[i], rb[j])
        flows[(i, j)] = f
        ra[i] -= f
        rb[j] -= f
        if i == n - 1 and j == m - 1:
            break
        if ra[i] <= rb[j] and i < n - 1:
            i += 1
        elif j < m - 1:
            j += 1
        else:
            i += 1
    return flows


class _BasisTree:
    """Spanning tree of the transportation basis with incremental updates.

    Nodes 0..n-1 are rows, n..n+m-1 columns; the tree is rooted at node 0.
    Potentials satisfy u_i + v_j = c_ij on every basis edge.  A pivot swaps
    one edge and only re-hangs the subtree cut off by the leaving edge.
    """

    def __init__(self, cost: np.ndarray, flows: dict):
        self.cost = cost
        self.n, self.m = cost.shape
        total = self.n + self.m
        self.adj: list[dict[int, None]] = [{} for _ in range(total)]
        for (i, j) in flows:
            self.adj[i][self.n + j] = None
            self.adj[self.n + j][i] = None
        self.parent = np.full(total, -1, dtype=np.intp)
        self.depth = np.zeros(total, dtype=np.intp)
        self.pot = np.zeros(total)
        self._rebuild_from(0, -1)

    def _edge_cost(self, x: int, y: int) -> float:
        if x < self.n:
            return self.cost[x, y - self.n]
        return self.cost[y, x - self.n]

    def _rebuild_from(self, start: int, new_parent: int):
        """Set parent/depth/potential over the component reachable from
        `start` without crossing back into `new_parent`."""
        if new_parent < 0:
            self.parent[start] = -1
            self.depth[start] = 0
            self.pot[start] = 0.0
        else:
            self.parent[start] = new_parent
            self.depth[start] = self.depth[new_parent] + 1
            self.pot[start] = self._edge_cost(start, new_parent) - self.pot[new_parent]
        stack = [start]
        while stack:
            node = stack.pop()
            for nxt in self.adj[node]:
                if nxt != self.parent[node] and self.parent[nxt] != node:
                    self.parent[nxt] = node
                    self.depth[nxt] = self.depth[node] + 1
                    self.pot[nxt] = self._edge_cost(nxt, node) - self.pot[node]
                    stack.append(nxt)

    def cycle_nodes(self, row: int, col_node: int) -> list[int]:
        """Node sequence row -> ... -> LCA -> ... -> col_node via tree edges."""
        pa, pb = [row], [col_node]
        na, nb = row, col_node
        while self.depth[na] > self.depth[nb]:
            na = self.parent[na]
            pa.append(na)
        while self.depth[nb] > self.depth[na]:
            nb = self.parent[nb]
            pb.append(nb)
        while na != nb:
            na = self.parent[na]
            pa.append(na)
            nb = self.parent[nb]
            pb.append(nb)
        return pa + pb[:-1][::-1]

    def pivot(self, entering_nodes: tuple[int, int], leaving_nodes: tuple[int, int]):
        la, lb = leaving_nodes
        child = la if self.depth[la] > self.depth[lb] else lb
        del self.adj[la][lb]
        del self.adj[lb][la]
        ea, eb = entering_nodes
        self.adj[ea][eb] = None
        self.adj[eb][ea] = None
        # which entering endpoint hangs in the cut-off subtree of `child`:
        # walk up from each endpoint; the one whose root-path passes `child`
        s_end = None
        for cand in (ea, eb):
            node = cand
            while node != -1:
                if node == child:
                    s_end = cand
                    break
                node = self.parent[node]
            if s_end is not None:
                break
        r_end = eb if s_end == ea else ea
        # clear parent marks inside the subtree so the re-hang DFS can roam
        sub = [child]
        seen = {child}
        stack = [child]
        while stack:
            node = stack.pop()
            for nxt in self.adj[node]:
                if self.parent[nxt] == node and nxt not in seen:
                    seen.add(nxt)
                    sub.append(nxt)
                    stack.append(nxt)
        for node in sub:
            self.parent[node] = -2  # orphan marker
        self._rebuild_from(s_end, r_end)


def _solve_transportation(cost: np.ndarray, a: np.ndarray | None = None,
                          b: np.ndarray | None = None):
    """Exact min-cost transportation plan; marginals default to uniform."""
    n, m = cost.shape
    if a is None:
        a = np.full(n, 1.0 / n)
    if b is None:
        b = np.full(m, 1.0 / m)
    flows = _northwest_corner(a, b)
    tree = _BasisTree(cost, flows)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-12 * scale
    max_dantzig = 60 * (n + m) + 400
    iteration = 0
    while True:
        iteration += 1
        u = tree.pot[:n]
        v = tree.pot[n:]
        reduced = cost - u[:, None] - v[None, :]
        basis = np.array(list(flows), dtype=np.intp)
        reduced[basis[:, 0], basis[:, 1]] = 0.0
        if iteration <= max_dantzig:
            flat = int(np.argmin(reduced))
            entering = (flat // m, flat % m)
            if reduced[entering] >= -tol:
                break
        else:
            # Bland's rule: lowest-index improving cell, guarantees termination
            cand = np.argwhere(reduced < -tol)
            if cand.size == 0:
                break
            entering = (int(cand[0][0]), int(cand[0][1]))
        nodes = tree.cycle_nodes(entering[0], n + entering[1])
        cells = [entering]
        for x, y in zip(nodes, nodes[1:]):
            cells.append((x, y - n) if x < n else (y, x - n))
        minus = cells[1::2]
        theta = min(flows[c] for c in minus)
        leaving = min((c for c in minus if flows[c] <= theta))
        for idx, c in enumerate(cells):
            if idx == 0:
                flows[c] = theta
            elif idx % 2 == 1:
                flows[c] = max(flows[c] - theta, 0.0)
            else:
                flows[c] = flows[c] + theta
        del flows[leaving]
        tree.pivot((entering[0], n + entering[1]), (leaving[0], n + leaving[1]))
    plan = np.zeros((n, m))
    for (i, j), f in flows.items():
        plan[i, j] = f
    total = float((plan * cost).sum())
    return plan, total


def _consolidate(points: np.ndarray):
    """Merge bitwise-identical support points, aggregating their uniform mass.

    Lossless for the transport problem: duplicated rows carry zero ground
    cost among themselves, so solving on the distinct support and splitting
    flows back evenly yields an optimal plan of the original problem.
    """
    uniq, inverse, counts = np.unique(points, axis=0, return_inverse=True,
                                      return_counts=True)
    weights = counts / len(points)
    return uniq, np.asarray(inverse).ravel(), counts, weights


def w1_distance(x: FeatureCloud, y: FeatureCloud) -> tuple[float, TransportPlan]:
    """Optimal value of the uniform-marginal transportation LP, plus a plan."""
    ux, inv_x, cnt_x, wx = _consolidate(x.points)
    uy, inv_y, cnt_y, wy = _consolidate(y.points)
    m_small = cost_matrix(FeatureCloud(ux), FeatureCloud(uy))
    plan_small, total = _solve_transportation(m_small, wx, wy)
    # expand back to one row/column per original point
    split = plan_small / np.outer(cnt_x, cnt_y)
    plan = split[np.ix_(inv_x, inv_y)]
    return total, TransportPlan(gamma_plan=plan, cost=total)


def buffer_distance(frames_o, frames_b, extractor) -> float:
    """Wasserstein distance between two observation buffers.

    Features for both buffers come from the given extractor's invariant
    output, so a buffer and its group-transformed twin coincide.
    """
    o = list(getattr(frames_o, "frames", frames_o))
    b = list(getattr(frames_b, "frames", frames_b))
    if not o or not b:
        raise ValueError("buffer_distance requires non-empty buffers")
    feats_o = FeatureCloud(extractor.invariant_batch(o))
    feats_b = FeatureCloud(extractor.invariant_batch(b))
    dist, _ = w1_distance(feats_o, feats_b)
    return dist
