"""Attention-derived supervision targets for the token scorer.

Both scores average the captured global-attention weights over layers and
heads first. ``camera_anchoring`` reads the row of a frame's own camera token;
``cross_view_matching`` takes, for every patch token, the largest weight it
sends to any *other patch token* in the clip. ``blend_target`` min-max
normalises each per frame and mixes them with weight ``alpha`` on the camera
term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import CAMERA, PATCH, AttentionTrace


@dataclass
class SaliencyMap:
    values: np.ndarray  # [N, P]
    role: str           # "target" or "predicted"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.role not in ("target", "predicted"):
            raise ValueError(f"unknown saliency role {self.role!r}")


def _patch_positions(trace: AttentionTrace, frame: int) -> np.ndarray:
    """Sequence positions of ``frame``'s patch tokens, sorted by flat patch index."""
    pos = np.flatnonzero((trace.frames == frame) & (trace.roles == PATCH))
    return pos[np.argsort(trace.patch_index[pos], kind="stable")]


def camera_anchoring(trace: AttentionTrace, frame: int, mean_attn: np.ndarray | None = None) -> np.ndarray:
    if not 0 <= frame < trace.n_frames:
        raise IndexError(f"frame {frame} out of range")
    A = trace.mean_attention() if mean_attn is None else mean_attn
    cam = np.flatnonzero((trace.frames == frame) & (trace.roles == CAMERA))
    if cam.size != 1:
        raise ValueError(f"frame {frame} has {cam.size} camera tokens")
    return A[cam[0], _patch_positions(trace, frame)]


def cross_view_matching(trace: AttentionTrace, mean_attn: np.ndarray | None = None) -> np.ndarray:
    """``[N, P]`` scores; candidates exclude the token itself and special tokens."""
    A = trace.mean_attention() if mean_attn is None else mean_attn
    patches = np.flatnonzero(trace.roles == PATCH)
    sub = A[np.ix_(patches, patches)].copy()
    np.fill_diagonal(sub, -np.inf)
    best = sub.max(axis=1) if len(patches) > 1 else np.zeros(len(patches))
    by_pos = dict(zip(patches, best))
    return np.stack([[by_pos[p] for p in _patch_positions(trace, f)] for f in range(trace.n_frames)])


def minmax_per_frame(x: np.ndarray) -> np.ndarray:
    """Min-max normalise each row; a constant row maps to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    span = x.max(axis=-1, keepdims=True) - lo
    flat = span <= 0
    out = (x - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def blend_target(s_cam: np.ndarray, s_global: np.ndarray, alpha: float) -> SaliencyMap:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    s_cam, s_global = np.atleast_2d(s_cam), np.atleast_2d(s_global)
    if s_cam.shape != s_global.shape:
        raise ValueError("score maps are not aligned")
    target = alpha * minmax_per_frame(s_cam) + (1.0 - alpha) * minmax_per_frame(s_global)
    return SaliencyMap(np.clip(target, 0.0, 1.0), "target")


def saliency_target(trace: AttentionTrace, alpha: float) -> SaliencyMap:
    A = trace.mean_attention()
    s_cam = np.stack([camera_anchoring(trace, f, A) for f in range(trace.n_frames)])
    return blend_target(s_cam, cross_view_matching(trace, A), alpha)


def write_saliency_csv(path, target: SaliencyMap, predicted: SaliencyMap | None = None) -> None:
    """One row per token: ``frame, token, target, predicted``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pred = predicted.values if predicted is not None else np.full(target.values.shape, np.nan)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "token", "target", "predicted"])
        for f in range(target.values.shape[0]):
            for i in range(target.values.shape[1]):
                writer.writerow([f, i, repr(float(target.values[f, i])), repr(float(pred[f, i]))])
