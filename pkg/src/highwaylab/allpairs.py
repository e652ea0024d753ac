"""Pairwise combinatorial test construction over discrete parameter levels.

Greedy, one row at a time: each row is seeded with the value pair that has
the most uncovered combinations left, then filled parameter by parameter to
maximize newly covered pairs. Deterministic given the parameter ordering
(ties break toward the lowest index).
"""

from __future__ import annotations

from itertools import combinations


def allpairs(level_counts: list[int]) -> list[tuple[int, ...]]:
    """Rows of level indices covering every pair of parameter levels.

    A single parameter degenerates to one row per level.
    """
    n = len(level_counts)
    if n == 0:
        return []
    if any(k < 1 for k in level_counts):
        raise ValueError("every parameter needs at least one level")
    if n == 1:
        return [(v,) for v in range(level_counts[0])]

    uncovered: set = set()
    for pi, pj in combinations(range(n), 2):
        for vi in range(level_counts[pi]):
            for vj in range(level_counts[pj]):
                uncovered.add((pi, vi, pj, vj))

    rows: list[tuple[int, ...]] = []
    while uncovered:
        tup, covered = _best_candidate_row(uncovered, level_counts)
        rows.append(tup)
        for pi, pj in combinations(range(n), 2):
            uncovered.discard((pi, tup[pi], pj, tup[pj]))
    return rows


N_CANDIDATES = 8


def _best_candidate_row(uncovered, level_counts):
    """Build a few candidate rows from the hottest seeds; keep the best."""
    n = len(level_counts)
    seeds = _seed_rows(uncovered, n)
    best_tup, best_gain = None, -1
    for offset, seed in enumerate(seeds):
        row = dict(seed)
        # fill remaining parameters, rotating the fill order per candidate
        order = [p for p in range(n) if p not in row]
        order = order[offset % max(len(order), 1):] + order[:offset % max(len(order), 1)]
        for p in order:
            best_v, best_vg = 0, -1
            for v in range(level_counts[p]):
                gain = sum(1 for q, vq in row.items()
                           if _key(p, v, q, vq) in uncovered)
                if gain > best_vg:
                    best_v, best_vg = v, gain
            row[p] = best_v
        tup = tuple(row[p] for p in range(n))
        gain = sum(1 for pi, pj in combinations(range(n), 2)
                   if (pi, tup[pi], pj, tup[pj]) in uncovered)
        if gain > best_gain:
            best_tup, best_gain = tup, gain
    return best_tup, best_gain


def _seed_rows(uncovered, n) -> list:
    """Up to N_CANDIDATES seed pairs, hottest parameter pairs first."""
    counts: dict = {}
    for pi, vi, pj, vj in uncovered:
        counts[(pi, pj)] = counts.get((pi, pj), 0) + 1
    pairs = sorted(counts, key=lambda k: (-counts[k], k))
    seeds = []
    for pair in pairs:
        combos = sorted((vi, vj) for pi, vi, pj, vj in uncovered
                        if (pi, pj) == pair)
        for vi, vj in combos:
            seeds.append({pair[0]: vi, pair[1]: vj})
            if len(seeds) >= N_CANDIDATES:
                return seeds
    return seeds


def _key(p, v, q, vq):
    return (p, v, q, vq) if p < q else (q, vq, p, v)


def verify_pair_coverage(level_counts: list[int],
                         rows: list[tuple[int, ...]]) -> bool:
    """Brute-force check that every parameter-level pair appears in some row."""
    n = len(level_counts)
    if n < 2:
        return all(any(r[0] == v for r in rows) for v in range(level_counts[0])) if n else True
    seen = {(pi, r[pi], pj, r[pj]) for r in rows
            for pi, pj in combinations(range(n), 2)}
    for pi, pj in combinations(range(n), 2):
        for vi in range(level_counts[pi]):
            for vj in range(level_counts[pj]):
                if (pi, vi, pj, vj) not in seen:
                    return False
    return True
