"""Video-free segment tracking across consecutive frames.

Query embeddings from consecutive frames are matched with a minimum-cost
assignment on 1 - cosine similarity, optionally blended with a Euclidean
center-distance term. Matched non-empty slots inherit the previous track id;
everything else gets a fresh, never-reused id.

The assignment solver is written here rather than delegated so that ties
resolve to the lexicographically smallest (prev, cur) pair set: the solver
first computes an optimal dual via shortest augmenting paths, then picks the
lexicographically smallest perfect matching inside the tight-edge subgraph
(complementary slackness guarantees every matching there is optimal).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .decoder import QuerySet

__all__ = [
    "MatchConfig",
    "TrackAssignment",
    "cosine_cost",
    "position_cost",
    "combine_costs",
    "hungarian",
    "propagate_ids",
    "SequenceTracker",
]


@dataclass(frozen=True)
class MatchConfig:
    """Weight of the position term and which slots participate in matching."""

    alpha_position: float = 0.0
    match_scope: str = "all-slots"      # or "non-empty-only"

    def __post_init__(self):
        if not np.isfinite(self.alpha_position) or self.alpha_position < 0:
            raise ValueError(f"alpha_position must be finite and >= 0, "
                             f"got {self.alpha_position}")
        if self.match_scope not in ("all-slots", "non-empty-only"):
            raise ValueError(f"unknown match_scope {self.match_scope!r}")


@dataclass
class TrackAssignment:
    """Result of matching one frame pair and propagating ids."""

    pairs: list[tuple[int, int]]                 # (prev slot, cur slot)
    pair_costs: list[float]
    track_ids: list[Optional[int]]               # per current slot; None = empty
    fresh_track_ids: list[int]
    next_id: int


def _embeddings(q) -> np.ndarray:
    e = q.embeddings if isinstance(q, QuerySet) else np.asarray(q, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {e.shape}")
    return e


def cosine_cost(q_prev, q_cur) -> np.ndarray:
    """1 - cosine similarity between every (prev, cur) embedding pair.

    Zero-norm embeddings have no direction, so they cost 1 against
    everything. Entries lie in [0, 2].
    """
    a = _embeddings(q_prev)
    b = _embeddings(q_cur)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    cos = np.zeros((a.shape[0], b.shape[0]))
    ok = denom > 0
    dots = a @ b.T
    cos[ok] = dots[ok] / denom[ok]
    return 1.0 - np.clip(cos, -1.0, 1.0)


def position_cost(centers_prev: np.ndarray, centers_cur: np.ndarray) -> np.ndarray:
    """Euclidean distance between normalised centers; entries in [0, sqrt(2)]."""
    a = np.asarray(centers_prev, dtype=np.float64)
    b = np.asarray(centers_cur, dtype=np.float64)
    for name, c in (("centers_prev", a), ("centers_cur", b)):
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError(f"{name} must be (N, 2), got {c.shape}")
        if c.size and (c.min() < 0 or c.max() > 1):
            raise ValueError(f"{name} must lie in [0, 1]^2")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def combine_costs(appearance: np.ndarray, position: np.ndarray,
                  cfg: MatchConfig) -> np.ndarray:
    """appearance + alpha * position; alpha == 0 returns appearance unchanged."""
    a = np.asarray(appearance, dtype=np.float64)
    p = np.asarray(position, dtype=np.float64)
    if a.shape != p.shape:
        raise ValueError(f"cost shapes differ: {a.shape} vs {p.shape}")
    if cfg.alpha_position == 0.0:
        return a.copy()
    return a + cfg.alpha_position * p


# --- assignment solver --------------------------------------------------------

def _shortest_path_duals(cost: list[list[float]], n: int):
    """Optimal assignment of an n x n matrix via successive shortest paths.

    Returns (col_to_row, u, v) where u, v are optimal dual potentials with
    u[i] + v[j] <= cost[i][j] everywhere and equality on assigned pairs.
    """
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)           # p[j]: row (1-based) assigned to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
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
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_to_row = [p[j] - 1 for j in range(1, n + 1)]
    return col_to_row, u[1:], v[1:]


def _matching_feasible(adj: list[list[int]], rows: Sequence[int],
                       used_cols: list[bool]) -> bool:
    """Can every row in `rows` be matched into the unused columns?"""
    match_col: dict[int, int] = {}

    def try_row(r: int, seen: set[int]) -> bool:
        for c in adj[r]:
            if used_cols[c] or c in seen:
                continue
            seen.add(c)
            if c not in match_col or try_row(match_col[c], seen):
                match_col[c] = r
                return True
        return False

    for r in rows:
        if not try_row(r, set()):
            return False
    return True


def _lex_min_matching(adj: list[list[int]]) -> list[int]:
    """Lexicographically smallest perfect matching: row 0 takes the smallest
    admissible column, then row 1, and so on."""
    n = len(adj)
    used = [False] * n
    chosen = [-1] * n
    for i in range(n):
        rest = range(i + 1, n)
        for j in adj[i]:
            if used[j]:
                continue
            used[j] = True
            if _matching_feasible(adj, rest, used):
                chosen[i] = j
                break
            used[j] = False
        if chosen[i] < 0:
            raise AssertionError("tight subgraph lost a perfect matching")
    return chosen


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment of a finite cost matrix.

    Rectangular inputs are padded to square with a cost strictly above every
    real entry, and pad matches are dropped, so exactly min(rows, cols) pairs
    are returned. Among equal-cost optima the lexicographically smallest
    (prev, cur) pair set is returned, making ties deterministic.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    rows, cols = c.shape
    if rows == 0 or cols == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    n = max(rows, cols)
    pad_value = float(c.max()) + 1.0
    padded = np.full((n, n), pad_value)
    padded[:rows, :cols] = c

    col_to_row, u, v = _shortest_path_duals(padded.tolist(), n)
    # every optimal assignment uses only edges tight under one optimal dual
    tol = 1e-9 * max(1.0, float(np.abs(padded).max()))
    slack = padded - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    adj = [list(np.nonzero(slack[i] <= tol)[0]) for i in range(n)]
    for j, i in enumerate(col_to_row):
        if j not in adj[i]:        # guard against tol rounding out the primal
            adj[i].append(j)
            adj[i].sort()
    chosen = _lex_min_matching(adj)
    jv_total = sum(padded[i, j] for j, i in enumerate(col_to_row))
    lex_total = sum(padded[i, chosen[i]] for i in range(n))
    if not lex_total <= jv_total + n * tol:
        raise AssertionError(
            f"tie refinement worsened the assignment ({lex_total} > {jv_total})")
    return [(i, int(j)) for i, j in enumerate(chosen) if i < rows and j < cols]


def propagate_ids(pairs: Sequence[tuple[int, int]],
                  prev_ids: Mapping[int, Optional[int]],
                  non_empty_cur: Sequence[bool],
                  id_counter: int,
                  pair_costs: Optional[Sequence[float]] = None) -> TrackAssignment:
    """Carry track ids one frame forward.

    A matched, non-empty current slot inherits its previous slot's id when
    that slot had one; any other non-empty slot opens a fresh id. Empty
    current slots get no id. Ids increase monotonically and are never reused.
    """
    non_empty = list(non_empty_cur)
    cur_to_prev: dict[int, int] = {}
    for prev_slot, cur_slot in pairs:
        if prev_slot not in prev_ids:
            raise ValueError(f"prev slot {prev_slot} missing from prev_ids")
        if cur_slot in cur_to_prev:
            raise ValueError(f"current slot {cur_slot} matched twice")
        cur_to_prev[cur_slot] = prev_slot
    track_ids: list[Optional[int]] = [None] * len(non_empty)
    fresh: list[int] = []
    next_id = id_counter
    for cur_slot in range(len(non_empty)):
        if not non_empty[cur_slot]:
            continue
        prev_slot = cur_to_prev.get(cur_slot)
        inherited = None if prev_slot is None else prev_ids[prev_slot]
        if inherited is not None:
            track_ids[cur_slot] = inherited
        else:
            track_ids[cur_slot] = next_id
            fresh.append(next_id)
            next_id += 1
    assigned = [t for t in track_ids if t is not None]
    if len(assigned) != len(set(assigned)):
        raise AssertionError("track id assigned to two slots in one frame")
    costs = list(pair_costs) if pair_costs is not None else [float("nan")] * len(pairs)
    return TrackAssignment(list(pairs), costs, track_ids, fresh, next_id)


@dataclass
class SequenceTracker:
    """Frame-by-frame tracker state for one sequence."""

    cfg: MatchConfig = field(default_factory=MatchConfig)
    next_id: int = 1
    _prev: Optional[QuerySet] = None
    _prev_ids: Optional[dict[int, Optional[int]]] = None

    def update(self, queries: QuerySet) -> TrackAssignment:
        """Match `queries` against the previous frame and assign track ids."""
        non_empty = queries.non_empty_mask()
        if self._prev is None:
            assignment = propagate_ids([], {}, non_empty, self.next_id)
        else:
            prev_non_empty = self._prev.non_empty_mask()
            appearance = cosine_cost(self._prev, queries)
            if self.cfg.alpha_position > 0:
                if self._prev.centers is None or queries.centers is None:
                    raise ValueError("position-weighted matching requires centers")
                cost = combine_costs(
                    appearance, position_cost(self._prev.centers, queries.centers),
                    self.cfg)
            else:
                cost = appearance
            if self.cfg.match_scope == "non-empty-only":
                prev_idx = np.nonzero(prev_non_empty)[0]
                cur_idx = np.nonzero(non_empty)[0]
                sub = cost[np.ix_(prev_idx, cur_idx)]
                pairs = [(int(prev_idx[i]), int(cur_idx[j])) for i, j in hungarian(sub)]
            else:
                pairs = hungarian(cost)
            costs = [float(cost[i, j]) for i, j in pairs]
            assignment = propagate_ids(pairs, self._prev_ids, non_empty,
                                       self.next_id, costs)
        self._prev = queries
        self._prev_ids = {i: assignment.track_ids[i] for i in range(queries.num_queries)}
        self.next_id = assignment.next_id
        return assignment


def track_report(assignments: Sequence[TrackAssignment],
                 query_sets: Sequence[QuerySet]) -> dict:
    """tracks.json payload: per frame, one row per slot with stable keys."""
    frames = []
    for t, (assignment, qs) in enumerate(zip(assignments, query_sets)):
        cost_by_cur = {c: cost for (p, c), cost in
                       zip(assignment.pairs, assignment.pair_costs)}
        slots = []
        for slot in range(qs.num_queries):
            tid = assignment.track_ids[slot]
            if tid is None:
                continue
            center = None
            if qs.centers is not None:
                center = [float(qs.centers[slot, 0]), float(qs.centers[slot, 1])]
            cost = cost_by_cur.get(slot)
            slots.append({
                "slot": slot,
                "track_id": tid,
                "cost": None if cost is None or not np.isfinite(cost) else cost,
                "center": center,
            })
        frames.append({"frame": t, "queries": slots})
    return {"version": 1, "frames": frames}
