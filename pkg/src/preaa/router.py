"""Keep / merge / prune routing of patch tokens ahead of the backbone.

Per frame the top ``ceil(P * r)`` tokens by score are kept. The clip-level
merge budget ``B = min(floor(gamma * N * P), sum |non-kept|)`` is spread over
frames in proportion to the mean residual score of each frame, capped at the
frame's non-kept count, and integerised by largest remainder. Each frame's
top-``M_f`` non-kept tokens merge into their most cosine-similar keep token;
the rest are dropped.

All ties go to the lower flat index. Ratios (``r``, ``gamma``) are read as
the decimal they print as, so ``ceil(10 * 0.3)`` is 3, not 4.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("three-way", "pure-prune", "full-merge", "uniform-alloc")


def as_fraction(x) -> Fraction:
    """Exact rational for the shortest decimal that round-trips ``x``."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(repr(float(x)))


def keep_count(n_patches: int, r) -> int:
    r = as_fraction(r)
    if not 0 < r <= 1:
        raise ValueError(f"keep ratio must lie in (0, 1], got {float(r)}")
    return math.ceil(n_patches * r)


def merge_budget(gamma, n_frames: int, n_patches: int, residual_sizes: Sequence[int]) -> int:
    return min(math.floor(as_fraction(gamma) * n_frames * n_patches), int(sum(residual_sizes)))


@dataclass
class FramePlan:
    keep: np.ndarray
    merge: np.ndarray
    prune: np.ndarray
    dst: np.ndarray       # keep flat index receiving each merge token
    importance: float
    merge_count: int


@dataclass
class RoutingPlan:
    frames: list[FramePlan]
    n_patches: int
    keep_ratio: float
    merge_fraction: float
    mode: str
    budget: int
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def keep_per_frame(self) -> int:
        return len(self.frames[0].keep)

    def keep_indices(self) -> np.ndarray:
        return np.stack([fp.keep for fp in self.frames])

    def merge_counts(self) -> np.ndarray:
        return np.array([fp.merge_count for fp in self.frames])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "keep_ratio": self.keep_ratio, "merge_fraction": self.merge_fraction,
            "n_patches": self.n_patches, "budget": self.budget,
            "frames": [{
                "keep": fp.keep.tolist(), "merge": fp.merge.tolist(), "prune": fp.prune.tolist(),
                "merge_count": fp.merge_count, "importance": fp.importance,
                "dst": [[int(m), int(d)] for m, d in zip(fp.merge, fp.dst)],
            } for fp in self.frames],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def validate(self) -> None:
        """Raise ``AssertionError`` if any structural invariant is broken."""
        K = keep_count(self.n_patches, self.keep_ratio)
        assert sum(fp.merge_count for fp in self.frames) == self.budget
        for fp in self.frames:
            assert len(fp.keep) == K
            allidx = np.concatenate([fp.keep, fp.merge, fp.prune])
            assert np.array_equal(np.sort(allidx), np.arange(self.n_patches))
            assert len(fp.merge) == fp.merge_count <= self.n_patches - K
            assert np.isin(fp.dst, fp.keep).all()


def _rank(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """``candidates`` ordered by score descending, then index ascending."""
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def select_keep(S, r) -> np.ndarray:
    """``[N, K]`` kept flat indices per frame, ascending."""
    S = np.atleast_2d(np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64))
    K = keep_count(S.shape[1], r)
    idx = np.arange(S.shape[1])
    return np.stack([np.sort(_rank(row, idx)[:K]) for row in S])


def frame_importance(S, keep: np.ndarray) -> np.ndarray:
    """Mean score over each frame's non-kept tokens; 0 for an empty residual."""
    S = np.atleast_2d(np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64))
    out = np.zeros(S.shape[0])
    for f, row in enumerate(S):
        mask = np.ones(S.shape[1], dtype=bool)
        mask[keep[f]] = False
        if mask.any():
            out[f] = row[mask].mean()
    return out


def _largest_remainder(shares: dict[int, Fraction], total: int) -> dict[int, int]:
    base = {f: math.floor(s) for f, s in shares.items()}
    extra = total - sum(base.values())
    order = sorted(shares, key=lambda f: (-(shares[f] - base[f]), f))
    for f in order[:extra]:
        base[f] += 1
    return base


def allocate_merge_budget(importance, gamma, residual_sizes, n_patches: int) -> np.ndarray:
    """Per-frame merge counts summing exactly to the clip budget.

    Proportional shares over frames that are still below their cap; frames
    whose share exceeds the cap are pinned to it and the freed budget is
    re-shared among the rest, until no cap is violated. If the remaining
    frames all have zero importance, they share uniformly. The surviving
    fractional shares are then rounded by largest remainder.
    """
    if not 0 <= as_fraction(gamma) < 1:
        raise ValueError(f"merge fraction must lie in [0, 1), got {gamma}")
    caps = [int(c) for c in residual_sizes]
    n = len(caps)
    total = merge_budget(gamma, n, n_patches, caps)
    weights = [as_fraction(p) for p in importance]
    if any(w < 0 for w in weights):
        raise ValueError("frame importance must be non-negative")
    alloc: dict[int, int] = {}
    active = [f for f in range(n)]
    remaining = Fraction(total)
    while True:
        wsum = sum(weights[f] for f in active)
        w = {f: (weights[f] if wsum > 0 else Fraction(1)) for f in active}
        wsum = sum(w.values())
        shares = {f: remaining * w[f] / wsum for f in active} if wsum > 0 else {}
        over = [f for f in active if shares[f] > caps[f]]
        if not over:
            break
        for f in over:
            alloc[f] = caps[f]
            remaining -= caps[f]
            active.remove(f)
        if not active:
            shares = {}
            break
    alloc.update(_largest_remainder(shares, int(remaining)))
    return np.array([alloc.get(f, 0) for f in range(n)], dtype=int)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity; any pair involving a zero vector scores 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = np.outer(na, nb)
    dots = a @ b.T
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def assign_merge_destinations(F: np.ndarray, keep: np.ndarray, merge: np.ndarray) -> np.ndarray:
    """Flat index of the most cosine-similar keep token for each merge token."""
    keep = np.sort(np.asarray(keep, dtype=int))
    merge = np.asarray(merge, dtype=int)
    if merge.size == 0:
        return np.zeros(0, dtype=int)
    if keep.size == 0:
        raise ValueError("cannot merge into an empty keep set")
    sims = cosine_matrix(F[merge], F[keep])
    return keep[np.argmax(sims, axis=1)]


def merge_scatter_add(F: np.ndarray, S, plan: RoutingPlan) -> Tensor:
    """Reduced ``[N, K, D]`` keep features with merge tokens absorbed.

    ``F_k <- (F_k + sum_m S_m F_m) / (1 + sum_m S_m)`` over the merge tokens
    routed to ``k``; rows with nothing routed in are passed through untouched.
    Scores enter the graph only through the merge weights.
    """
    F = np.asarray(F, dtype=np.float64)
    N, P, D = F.shape
    keep = plan.keep_indices()
    K = keep.shape[1]
    keep_flat = (np.arange(N)[:, None] * P + keep).reshape(-1)
    Fk = F.reshape(N * P, D)[keep_flat]
    m_flat, rows = [], []
    for f, fp in enumerate(plan.frames):
        pos = np.searchsorted(fp.keep, fp.dst)
        m_flat.append(f * P + fp.merge)
        rows.append(f * K + pos)
    m_flat = np.concatenate(m_flat).astype(int)
    rows = np.concatenate(rows).astype(int)
    if m_flat.size == 0:
        return Tensor(Fk.reshape(N, K, D))
    S = ad.as_tensor(S).reshape(N * P)
    w = ad.take(S, m_flat)
    numer = ad.scatter_add(w.reshape(-1, 1) * F.reshape(N * P, D)[m_flat], rows, N * K)
    denom = ad.scatter_add(w, rows, N * K)
    merged = (Fk + numer) / (denom.reshape(-1, 1) + 1.0)
    touched = np.zeros(N * K, dtype=bool)
    touched[rows] = True
    out = ad.where(touched[:, None], merged, Fk)
    return out.reshape(N, K, D)


def build_plan(F: np.ndarray, S, r, gamma, mode: str = "three-way") -> RoutingPlan:
    if mode not in MODES:
        raise ValueError(f"unknown routing mode {mode!r}; expected one of {MODES}")
    scores = np.atleast_2d(np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64))
    N, P = scores.shape
    if mode == "pure-prune":
        gamma = 0.0
    keep = select_keep(scores, r)
    phi = frame_importance(scores, keep)
    residual = []
    for f in range(N):
        mask = np.ones(P, dtype=bool)
        mask[keep[f]] = False
        residual.append(np.flatnonzero(mask))
    sizes = [len(x) for x in residual]
    if mode == "full-merge":
        counts = np.array(sizes)
    elif mode == "uniform-alloc":
        per = math.ceil(as_fraction(gamma) * P)
        counts = np.array([min(per, s) for s in sizes])
    else:
        # exact rational means so remainder ties are decided without rounding
        exact = [sum(map(Fraction, scores[f, residual[f]].tolist()), Fraction(0)) / sizes[f] if sizes[f]
                 else Fraction(0) for f in range(N)]
        counts = allocate_merge_budget(exact, gamma, sizes, P)
    frames = []
    for f in range(N):
        ranked = _rank(scores[f], residual[f])
        merge = np.sort(ranked[:counts[f]])
        prune = np.sort(ranked[counts[f]:])
        dst = assign_merge_destinations(F[f], keep[f], merge)
        frames.append(FramePlan(keep[f], merge, prune, dst, float(phi[f]), int(counts[f])))
    return RoutingPlan(frames, P, float(r), float(gamma), mode, int(counts.sum()))


def route(F: np.ndarray, S, r, gamma, mode: str = "three-way") -> tuple[RoutingPlan, Tensor]:
    """Plan the routing for a clip and build the reduced keep sequence.

    ``F`` is ``[N, P, D]`` frame features, ``S`` the ``[N, P]`` scores (a
    tensor when gradients through the merge weights are wanted).
    """
    F = np.asarray(F, dtype=np.float64)
    plan = build_plan(F, S, r, gamma, mode)
    return plan, merge_scatter_add(F, S, plan)
