"""Brute-force reference implementations used by the test-suite.

Written with plain Python loops and the ``math`` module only, sharing no code
with the production modules, so agreement between the two is evidence.
"""
import itertools
import math


def _dot(a, b) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def oracle_weights(S) -> tuple[list[list[float]], list[list[float]]]:
    n = len(S)
    row_sums = [math.fsum(float(S[i][k]) for k in range(n) if k != i) for i in range(n)]
    col_sums = [math.fsum(float(S[k][s]) for k in range(n) if k != s) for s in range(n)]
    row = [[1.0] * n for _ in range(n)]
    col = [[1.0] * n for _ in range(n)]
    for i in range(n):
        for s in range(n):
            if i == s:
                continue
            row[i][s] = (n - 1) * float(S[i][s]) / row_sums[i]
            col[i][s] = (n - 1) * float(S[i][s]) / col_sums[s]
    return row, col


def oracle_loss(e_img, e_shape, w_row, w_col, scale: float) -> float:
    n = len(e_img)
    logits = [[scale * _dot(e_img[i], e_shape[s]) for s in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        denom = sum(w_row[i][s] * math.exp(logits[i][s]) for s in range(n))
        total -= math.log(math.exp(logits[i][i]) / denom)
    for s in range(n):
        denom = sum(w_col[i][s] * math.exp(logits[i][s]) for i in range(n))
        total -= math.log(math.exp(logits[s][s]) / denom)
    return total / (2 * n)


def oracle_retrieval(queries, gallery, ground_truth, ks=(1, 5)) -> dict[int, float]:
    hits = {k: 0 for k in ks}
    for q, target in zip(queries, ground_truth):
        scored = [(-_dot(q, g), j) for j, g in enumerate(gallery)]
        scored.sort()
        rank = [j for _, j in scored].index(int(target))
        for k in ks:
            if rank < k:
                hits[k] += 1
    return {k: hits[k] / len(queries) for k in ks}


def _dist(p, q) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)))


def oracle_emd_exhaustive(p, q) -> float:
    """Minimum over all permutations; only for tiny sets."""
    n = len(p)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(_dist(p[i], q[perm[i]]) for i in range(n))
        best = min(best, cost)
    return best / n


def hungarian_min(cost) -> list[int]:
    """Kuhn-Munkres with potentials for a square cost matrix; returns row -> column."""
    n = len(cost)
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = [-1] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment


def oracle_emd_assignment(p, q) -> float:
    n = len(p)
    cost = [[_dist(p[i], q[j]) for j in range(n)] for i in range(n)]
    assignment = hungarian_min(cost)
    return sum(cost[i][assignment[i]] for i in range(n)) / n
