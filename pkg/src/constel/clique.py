"""
Exact maximum clique by branch and bound.

Vertex sets are Python ints used as bitsets. The search follows the
classic colour-bound scheme: candidates are greedily coloured, and a branch
is cut as soon as ``|R| + colours(P)`` cannot beat the incumbent. Vertices
adjacent to every other vertex belong to every maximum clique and are
fixed before the search starts.

Among maximum cliques, the one with the smallest total edge cost wins, then
the lexicographically smallest sorted vertex tuple.
"""
from __future__ import annotations

import numpy as np

DEFAULT_MAX_NODES = 200_000


class _Budget(Exception):
    pass


def max_clique(adjacency, cost=None, max_nodes: int = DEFAULT_MAX_NODES) -> tuple[list[int], bool]:
    """Find a maximum clique.

    Parameters
    ----------
    adjacency : (n, n) bool array_like
        Symmetric adjacency matrix; the diagonal is ignored.
    cost : (n, n) array_like, optional
        Non-negative symmetric edge costs for tie-breaking.
    max_nodes : int
        Search-node budget. When exhausted the best clique found so far is
        returned and the ``exact`` flag is False.

    Returns
    -------
    clique : list of int
        Sorted vertex indices.
    exact : bool
        Whether optimality (including the tie-break) was proven.
    """
    A = np.asarray(adjacency, dtype=bool)
    n = len(A)
    if n == 0:
        return [], True
    A = A & A.T
    np.fill_diagonal(A, False)
    W = np.zeros((n, n)) if cost is None else np.asarray(cost, dtype=float)
    Wl = W.tolist()

    deg = A.sum(axis=1)
    universal = [v for v in range(n) if deg[v] == n - 1]
    rest = [v for v in range(n) if deg[v] < n - 1]
    # high degree first: gives tighter colourings
    order = sorted(rest, key=lambda v: (-int(deg[v]), v))
    pos = {v: i for i, v in enumerate(order)}
    nbr = [0] * len(order)
    for v in order:
        m = 0
        for u in np.flatnonzero(A[v]):
            j = pos.get(int(u))
            if j is not None:
                m |= 1 << j
        nbr[pos[v]] = m

    base = list(universal)
    base_cost = sum(Wl[a][b] for i, a in enumerate(base) for b in base[i + 1:])
    best = {"size": -1, "cost": np.inf, "key": (), "set": []}
    nodes = [0]

    def consider(R: list[int], rcost: float):
        size = len(R)
        if size < best["size"]:
            return
        key = tuple(sorted(R))
        if size > best["size"] or rcost < best["cost"] or (rcost == best["cost"] and key < best["key"]):
            best.update(size=size, cost=rcost, key=key, set=list(key))

    def colour(P: int) -> list[tuple[int, int]]:
        out = []
        c = 0
        U = P
        while U:
            c += 1
            Q = U
            while Q:
                low = Q & -Q
                j = low.bit_length() - 1
                Q &= ~nbr[j] & ~low
                U &= ~low
                out.append((j, c))
        return out

    def expand(R: list[int], rcost: float, P: int):
        nodes[0] += 1
        if nodes[0] > max_nodes:
            raise _Budget
        for j, c in reversed(colour(P)):
            bound = len(R) + c
            if bound < best["size"] or (bound == best["size"] and rcost > best["cost"]):
                return
            v = order[j]
            vcost = rcost + sum(Wl[v][r] for r in R)
            R.append(v)
            newP = P & nbr[j]
            if newP:
                expand(R, vcost, newP)
            else:
                consider(R, vcost)
            R.pop()
            P &= ~(1 << j)

    exact = True
    try:
        if order:
            expand(base[:], base_cost, (1 << len(order)) - 1)
        else:
            consider(base[:], base_cost)
    except _Budget:
        exact = False
    return best["set"], exact
