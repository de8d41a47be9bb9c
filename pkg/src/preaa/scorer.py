"""Token scorer: 1x1 conv -> BN -> GELU -> depthwise 3x3 -> BN -> GELU -> 1x1 -> sigmoid.

Operates on ``[N, h, w, D]`` feature grids (channels last). Batch-norm
statistics in train mode are taken over all frames and positions of the
input; running statistics (momentum 0.1) are used in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class ScorerParams:
    dim: int
    hidden: int
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @classmethod
    def init(cls, dim: int, hidden: int = 64, seed: int = 0) -> "ScorerParams":
        rng = np.random.default_rng([seed, 3571])
        t = {
            "pw_in.w": rng.normal(0, 1 / np.sqrt(dim), (dim, hidden)),
            "bn1.w": np.ones(hidden), "bn1.b": np.zeros(hidden),
            "dw.w": rng.normal(0, 1 / 3.0, (3, 3, hidden)),
            "bn2.w": np.ones(hidden), "bn2.b": np.zeros(hidden),
            "pw_out.w": rng.normal(0, 1 / np.sqrt(hidden), (hidden, 1)),
            "pw_out.b": np.zeros(1),
        }
        tensors = {k: Tensor(v, requires_grad=True, name=f"scorer.{k}") for k, v in t.items()}
        bn = {k: BatchNormState(np.zeros(hidden), np.ones(hidden)) for k in ("bn1", "bn2")}
        return cls(dim, hidden, tensors, bn)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"scorer.{k}": t.data for k, t in self.tensors.items()}
        for k, s in self.bn.items():
            out[f"scorer.{k}.running_mean"] = s.mean
            out[f"scorer.{k}.running_var"] = s.var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data = np.array(state[f"scorer.{k}"], dtype=np.float64)
        for k, s in self.bn.items():
            s.mean = np.array(state[f"scorer.{k}.running_mean"])
            s.var = np.array(state[f"scorer.{k}.running_var"])


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, state: BatchNormState,
               train: bool, update: bool = True) -> Tensor:
    """Batch norm over every axis but the last."""
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = ad.mean(x, axis=axes, keepdims=True)
        xc = x - mu
        var = ad.mean(xc * xc, axis=axes, keepdims=True)
        if update:
            n = x.size // x.shape[-1]
            unbiased = var.data.reshape(-1) * n / max(n - 1, 1)
            state.mean = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mu.data.reshape(-1)
            state.var = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * unbiased
        xhat = xc * ad.power(var + BN_EPS, -0.5)
    else:
        xhat = (x - state.mean) / np.sqrt(state.var + BN_EPS)
    return xhat * weight + bias


def score_tokens(F, params: ScorerParams, mode: str = "eval", update_stats: bool = True) -> Tensor:
    """Per-token scores in (0, 1) with the spatial shape of ``F`` minus channels."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    F = ad.as_tensor(F)
    if F.shape[-1] != params.dim:
        raise ValueError(f"feature width {F.shape[-1]} does not match scorer input {params.dim}")
    single = F.ndim == 3
    if single:
        F = F.reshape((1,) + F.shape)
    p, train = params.tensors, mode == "train"
    x = F @ p["pw_in.w"]
    x = ad.gelu(batch_norm(x, p["bn1.w"], p["bn1.b"], params.bn["bn1"], train, update_stats))
    x = ad.depthwise_conv3x3(x, p["dw.w"])
    x = ad.gelu(batch_norm(x, p["bn2.w"], p["bn2.b"], params.bn["bn2"], train, update_stats))
    logits = (x @ p["pw_out.w"] + p["pw_out.b"]).reshape(x.shape[:-1])
    s = ad.sigmoid(logits)
    return s.reshape(s.shape[1:]) if single else s


def distill_loss(S, target) -> Tensor:
    """Mean binary cross-entropy of predictions ``S`` against soft labels."""
    S = ad.as_tensor(S)
    t = np.asarray(target.values if hasattr(target, "values") else target, dtype=np.float64)
    t = t.reshape(S.shape)
    s = ad.clip(S, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(t * ad.log(s) + (1.0 - t) * ad.log(1.0 - s))
    return ad.mean(bce)
