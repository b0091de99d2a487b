"""Device graphs, Metropolis-Hastings mixing matrices and their spectral gap."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConstructionError, InputError

MAX_RETRIES = 1000


@dataclass(frozen=True)
class DeviceGraph:
    adjacency: np.ndarray  # symmetric bool, zero diagonal
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InputError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise InputError("adjacency must be symmetric")
        if a.diagonal().any():
            raise InputError("self-loops are not allowed")
        object.__setattr__(self, "adjacency", a)

    @property
    def m(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return np.flatnonzero(self.adjacency[i]).tolist()

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency))
        return list(zip(i.tolist(), j.tolist()))

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        while frontier:
            i = frontier.pop()
            for j in self.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == self.m

    def to_csv(self, path) -> None:
        np.savetxt(path, self.adjacency.astype(int), fmt="%d", delimiter=",")


def _from_edges(m: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    a = np.zeros((m, m), dtype=bool)
    for i, j in edges:
        if not (0 <= i < m and 0 <= j < m) or i == j:
            raise InputError(f"bad edge ({i}, {j}) for m={m}")
        a[i, j] = a[j, i] = True
    return a


def read_edge_list(path) -> list[tuple[int, int]]:
    """Plain-text edge list, one ``i j`` pair (0-indexed) per line; ``#`` comments."""
    edges = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            i, j = line.split()
            edges.append((int(i), int(j)))
    return edges


def build_graph(
    kind: str,
    m: int,
    seed: int = 0,
    radius: float = 0.8,
    edges: Optional[Iterable[tuple[int, int]]] = None,
    max_retries: int = MAX_RETRIES,
) -> DeviceGraph:
    """Build a connected graph: ``complete``, ``ring``, ``random_geometric`` or ``custom``."""
    if m < 2:
        raise InputError("need at least two devices")
    if kind == "complete":
        g = DeviceGraph(~np.eye(m, dtype=bool))
    elif kind == "ring":
        g = DeviceGraph(_from_edges(m, [(i, (i + 1) % m) for i in range(m)]))
    elif kind == "custom":
        if edges is None:
            raise InputError("custom graph needs an edge list")
        g = DeviceGraph(_from_edges(m, edges))
    elif kind == "random_geometric":
        rng = np.random.default_rng(seed)
        for _ in range(max_retries):
            pts = rng.uniform(size=(m, 2))
            dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            adj = dist <= radius
            np.fill_diagonal(adj, False)
            g = DeviceGraph(adj, pts)
            if g.is_connected():
                return g
        raise ConstructionError(f"no connected random geometric graph (m={m}, r={radius}) after {max_retries} draws")
    else:
        raise InputError(f"unknown graph kind {kind!r}")
    if not g.is_connected():
        raise ConstructionError(f"{kind} graph on {m} nodes is not connected")
    return g


def metropolis_weights(g: DeviceGraph) -> np.ndarray:
    """``W_ij = 1 / (1 + max(deg_i, deg_j))`` on edges; diagonal fills rows to 1."""
    deg = g.degrees()
    W = np.zeros((g.m, g.m))
    for i, j in g.edges():
        W[i, j] = W[j, i] = 1.0 / (1 + max(deg[i], deg[j]))
    np.fill_diagonal(W, 0.0)
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


def check_mixing_matrix(W: np.ndarray, g: Optional[DeviceGraph] = None, tol: float = 1e-12) -> list[str]:
    """Return a list of violated properties (empty when W is a valid mixing matrix)."""
    problems = []
    W = np.asarray(W)
    if not np.allclose(W, W.T, atol=tol, rtol=0):
        problems.append("not symmetric")
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > tol:
        problems.append("rows do not sum to 1")
    if np.max(np.abs(W.sum(axis=0) - 1.0)) > tol:
        problems.append("columns do not sum to 1")
    if (W < -tol).any():
        problems.append("negative entries")
    if g is not None:
        off = ~np.eye(g.m, dtype=bool)
        if ((W[off] > 0) != g.adjacency[off]).any():
            problems.append("support differs from graph edges")
    return problems


def spectral_gap(W: np.ndarray) -> tuple[float, float]:
    """Second-largest eigenvalue magnitude ``rho`` of a symmetric W and ``1 - rho``."""
    W = np.asarray(W, dtype=np.float64)
    try:
        ev = np.linalg.eigvalsh(W)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise ArithmeticError(f"eigensolver failed: {exc}") from exc
    mags = np.sort(np.abs(ev))[::-1]
    rho = float(mags[1]) if len(mags) > 1 else 0.0
    return rho, 1.0 - rho


def mixing_to_csv(W: np.ndarray, path) -> None:
    np.savetxt(path, W, delimiter=",", fmt="%.17g")
