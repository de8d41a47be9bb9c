"""Rebuild the dense per-frame output grid from the backbone's keep-token outputs.

The learned path is one multi-head cross-attention per frame: queries come
from the full-resolution input features, keys from the kept input features,
values from the backbone outputs at the kept positions. Two fixed baselines
(zero fill, inverse-distance fill) share the same call signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FlopCounter

VARIANTS = ("cross-attn", "zero-fill", "bilinear")
IDW_NEIGHBOURS = 4


@dataclass
class RestorationParams:
    dim_in: int
    dim_out: int
    dim: int
    heads: int
    tensors: dict[str, Tensor]

    @classmethod
    def init(cls, dim_in: int, dim_out: int, dim: int = 32, heads: int = 4, seed: int = 0) -> "RestorationParams":
        if dim % heads:
            raise ValueError(f"shared dim {dim} is not divisible by {heads} heads")
        rng = np.random.default_rng([seed, 6007])
        t = {
            "q.w": rng.normal(0, 1 / np.sqrt(dim_in), (dim_in, dim)), "q.b": np.zeros(dim),
            "k.w": rng.normal(0, 1 / np.sqrt(dim_in), (dim_in, dim)), "k.b": np.zeros(dim),
            "v.w": rng.normal(0, 1 / np.sqrt(dim_out), (dim_out, dim)), "v.b": np.zeros(dim),
            "o.w": np.zeros((dim, dim_out)), "o.b": np.zeros(dim_out),
        }  # zero output projection: an untrained restorer emits zeros
        tensors = {k: Tensor(v, requires_grad=True, name=f"restore.{k}") for k, v in t.items()}
        return cls(dim_in, dim_out, dim, heads, tensors)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"restore.{k}": t.data for k, t in self.tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data = np.array(state[f"restore.{k}"], dtype=np.float64)


def _check_alignment(F_full: np.ndarray, F_keep: np.ndarray, keep: np.ndarray) -> None:
    keep = np.asarray(keep)
    if keep.ndim != 1 or np.any(np.diff(keep) <= 0):
        raise ValueError("keep indices must be strictly ascending")
    if F_keep.shape[0] != keep.size or not np.array_equal(F_full[keep], F_keep):
        raise ValueError("keep features are misaligned with the keep indices")


def restore_frames(F_full, F_keep, G_keep, params: RestorationParams, flops: FlopCounter | None = None,
                   return_weights: bool = False):
    """Cross-attention restoration over ``[N, P, D]`` / ``[N, K, D]`` / ``[N, K, D']``.

    Frames are independent batch entries. Returns ``[N, P, D']`` (and the
    ``[N, H, P, K]`` attention weights when asked).
    """
    F_full, F_keep, G_keep = ad.as_tensor(F_full), ad.as_tensor(F_keep), ad.as_tensor(G_keep)
    N, P, _ = F_full.shape
    K = F_keep.shape[1]
    if G_keep.shape[:2] != (N, K):
        raise ValueError(f"backbone outputs {G_keep.shape[:2]} do not match keep features {(N, K)}")
    p, H, d = params.tensors, params.heads, params.dim
    dh = d // H

    def heads(x, T):
        return x.reshape(N, T, H, dh).transpose(0, 2, 1, 3)

    q = heads(F_full @ p["q.w"] + p["q.b"], P)
    k = heads(F_keep @ p["k.w"] + p["k.b"], K)
    v = heads(G_keep @ p["v.w"] + p["v.b"], K)
    out, weights = ad.attention(q, k, v, 1.0 / np.sqrt(dh), keep_weights=return_weights)
    out = out.transpose(0, 2, 1, 3).reshape(N, P, d) @ p["o.w"] + p["o.b"]
    if flops is not None:
        flops.add("restore_proj", 2 * N * d * (P * params.dim_in + K * params.dim_in
                                               + K * params.dim_out + P * params.dim_out))
        flops.add("restore_attn", 2 * 2 * N * P * K * d)
    return (out, weights) if return_weights else out


def restore_dense(F_full, F_keep, G_keep, params: RestorationParams, keep=None,
                  flops: FlopCounter | None = None) -> Tensor:
    """Single-frame restoration: ``[P, D]``, ``[K, D]``, ``[K, D']`` -> ``[P, D']``."""
    F_full, F_keep, G_keep = ad.as_tensor(F_full), ad.as_tensor(F_keep), ad.as_tensor(G_keep)
    if keep is not None:
        _check_alignment(F_full.data, F_keep.data, keep)
    out = restore_frames(F_full.reshape((1,) + F_full.shape), F_keep.reshape((1,) + F_keep.shape),
                         G_keep.reshape((1,) + G_keep.shape), params, flops)
    return out.reshape(out.shape[1:])


def idw_matrix(keep: np.ndarray, grid: tuple[int, int], neighbours: int = IDW_NEIGHBOURS) -> np.ndarray:
    """``[P, K]`` row-stochastic fill weights over the kept grid positions.

    Kept positions copy themselves; every other position averages its
    ``neighbours`` nearest kept positions with weights ``1 / distance``
    (distance ties go to the lower flat index).
    """
    h, w = grid
    keep = np.asarray(keep, dtype=int)
    coords = np.stack(np.divmod(np.arange(h * w), w), axis=-1).astype(np.float64)
    dist = np.linalg.norm(coords[:, None, :] - coords[keep][None, :, :], axis=-1)
    W = np.zeros((h * w, keep.size))
    n = min(neighbours, keep.size)
    for i in range(h * w):
        order = np.lexsort((keep, dist[i]))[:n]
        if dist[i, order[0]] == 0:
            W[i, order[0]] = 1.0
            continue
        inv = 1.0 / dist[i, order]
        W[i, order] = inv / inv.sum()
    return W


def restore_variant(mode: str, F_full, keep, G_keep, params: RestorationParams | None = None,
                    grid: tuple[int, int] | None = None, flops: FlopCounter | None = None) -> Tensor:
    """Restore a clip with ``mode``: ``[N, P, D]`` features, ``[N, K]`` keep indices, ``[N, K, D']``.

    When every patch is kept the outputs are placed back unchanged, whatever
    the mode.
    """
    if mode not in VARIANTS:
        raise ValueError(f"unknown restoration variant {mode!r}; expected one of {VARIANTS}")
    F_full = np.asarray(F_full.data if isinstance(F_full, Tensor) else F_full, dtype=np.float64)
    G_keep = ad.as_tensor(G_keep)
    keep = np.asarray(keep, dtype=int)
    N, P, _ = F_full.shape
    K, Dp = keep.shape[1], G_keep.shape[-1]
    rows = (np.arange(N)[:, None] * P + keep).reshape(-1)
    if K == P or mode == "zero-fill":
        placed = ad.scatter_add(G_keep.reshape(N * K, Dp), rows, N * P)
        return placed.reshape(N, P, Dp)
    if mode == "bilinear":
        if grid is None or grid[0] * grid[1] != P:
            raise ValueError("bilinear fill needs the patch grid shape")
        W = np.stack([idw_matrix(keep[f], grid) for f in range(N)])
        return Tensor(W) @ G_keep
    if params is None:
        raise ValueError("cross-attention restoration needs parameters")
    F_keep = np.take_along_axis(F_full, keep[..., None], axis=1)
    return restore_frames(F_full, F_keep, G_keep, params, flops)
