"""End-to-end pipeline wiring and the training loops.

One training step sees one clip. Everything the unpruned backbone produces
for a clip (features, target, dense outputs) is computed once and cached.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, FlopCounter, TokenGrid, build_sequence, split_outputs
from .objectives import LossWeights, Predictions, TaskHeads, fit_heads, stage1_loss, stage2_loss
from .restoration import RestorationParams, restore_variant
from .router import RoutingPlan, route
from .saliency import SaliencyMap, saliency_target
from .scenes import ClipSample
from .scorer import ScorerParams, score_tokens

SCHEDULES = ("two-stage", "stage1-only", "stage2-only", "joint")
CURVE_FIELDS = ["step", "stage", "total", "distill", "restore", "camera", "depth", "pmap"]


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class ClipCache:
    clip: ClipSample
    grids: list[TokenGrid]
    features: np.ndarray  # [N, h, w, D]
    target: SaliencyMap
    G_full: np.ndarray    # [N, P, D']
    cam_full: np.ndarray  # [N, D']


def build_cache(backbone: Backbone, clip: ClipSample, alpha: float) -> ClipCache:
    with ad.no_grad():
        grids = backbone.encode(clip)
        seq = build_sequence(grids)
        G, trace = backbone.forward(seq, capture=True)
        cam, patches = split_outputs(G, seq, len(grids))
    feats = np.stack([g.features for g in grids])
    return ClipCache(clip, grids, feats, saliency_target(trace, alpha), patches.data, cam.data)


@dataclass
class PipelineOutput:
    scores: Tensor
    plan: RoutingPlan
    cam_out: Tensor
    G_keep: Tensor
    G_dense: Tensor
    preds: Predictions | None


@dataclass
class Pipeline:
    backbone: Backbone
    scorer: ScorerParams
    restoration: RestorationParams
    heads: TaskHeads | None = None
    keep_ratio: float = 0.4
    merge_fraction: float = 0.3
    routing: str = "three-way"
    variant: str = "cross-attn"

    @classmethod
    def create(cls, backbone: Backbone, seed: int = 0, hidden: int = 64, restore_dim: int = 32,
               restore_heads: int = 4, **kw) -> "Pipeline":
        cfg = backbone.cfg
        scorer = ScorerParams.init(cfg.dim_in, hidden, seed)
        restoration = RestorationParams.init(cfg.dim_in, cfg.dim, restore_dim, restore_heads, seed)
        return cls(backbone, scorer, restoration, **kw)

    def run(self, grids: list[TokenGrid], features: np.ndarray, scorer_mode: str = "eval",
            flops: FlopCounter | None = None, update_stats: bool = True) -> PipelineOutput:
        cfg = self.backbone.cfg
        N = len(grids)
        S = score_tokens(features, self.scorer, scorer_mode, update_stats)
        if flops is not None:
            P, D, Dh = cfg.patches, cfg.dim_in, self.scorer.hidden
            flops.add("scorer", 2 * N * P * (D * Dh + 9 * Dh + Dh))
        F = features.reshape(N, -1, features.shape[-1])
        plan, F_hat = route(F, S.reshape(N, -1), self.keep_ratio, self.merge_fraction, self.routing)
        seq = build_sequence(grids, F_hat, plan.keep_indices())
        G, _ = self.backbone.forward(seq, flops=flops)
        cam, G_keep = split_outputs(G, seq, N)
        G_dense = restore_variant(self.variant, F, plan.keep_indices(), G_keep, self.restoration,
                                  (cfg.h, cfg.w), flops)
        preds = self.heads.predict(cam, G_dense, (cfg.h, cfg.w)) if self.heads is not None else None
        return PipelineOutput(S, plan, cam, G_keep, G_dense, preds)

    def fit_heads(self, caches: list[ClipCache]) -> TaskHeads:
        self.heads = fit_heads([c.cam_full for c in caches], [c.G_full for c in caches],
                               [c.clip for c in caches])
        return self.heads

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.scorer.state_dict())
        out.update(self.restoration.state_dict())
        if self.heads is not None:
            out.update(self.heads.state_dict())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.scorer.load_state_dict(state)
        self.restoration.load_state_dict(state)
        if "heads.camera.w" in state:
            self.heads = TaskHeads.from_state(state)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, stage: str, terms: dict[str, float]) -> None:
        row = {"step": len(self.rows), "stage": stage}
        row.update({k: terms.get(k, "") for k in CURVE_FIELDS[2:]})
        self.rows.append(row)

    def write_csv(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fields = CURVE_FIELDS + sorted(extra or {})
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row, **(extra or {})})


def stage1_step(pipe: Pipeline, cache: ClipCache, opt: Adam) -> dict[str, float]:
    S = score_tokens(cache.features, pipe.scorer, "train")
    loss = stage1_loss(S, cache.target)
    opt.step(ad.gradients(loss, opt.params))
    return {"total": loss.item(), "distill": loss.item()}


def stage2_step(pipe: Pipeline, cache: ClipCache, opt: Adam, weights: LossWeights) -> dict[str, float]:
    out = pipe.run(cache.grids, cache.features, scorer_mode="train")
    N = len(cache.grids)
    loss, terms = stage2_loss(out.scores.reshape(N, -1), cache.target, out.G_dense, cache.G_full,
                              out.preds, cache.clip, weights)
    opt.step(ad.gradients(loss, opt.params))
    return terms


def train_stage1(pipe: Pipeline, caches: list[ClipCache], steps: int, lr: float = 1e-3,
                 log: TrainLog | None = None) -> TrainLog:
    log = log if log is not None else TrainLog()
    opt = Adam(pipe.scorer.tensors, lr)
    for i in range(steps):
        log.add("1", stage1_step(pipe, caches[i % len(caches)], opt))
    return log


def _stage2_params(pipe: Pipeline) -> dict[str, Tensor]:
    params = {f"scorer.{k}": t for k, t in pipe.scorer.tensors.items()}
    params.update({f"restore.{k}": t for k, t in pipe.restoration.tensors.items()})
    return params


def train_stage2(pipe: Pipeline, caches: list[ClipCache], steps: int, lr: float = 1e-3,
                 weights: LossWeights = LossWeights(), log: TrainLog | None = None,
                 stage: str = "2") -> TrainLog:
    log = log if log is not None else TrainLog()
    if pipe.heads is None:
        pipe.fit_heads(caches)
    opt = Adam(_stage2_params(pipe), lr)
    for i in range(steps):
        log.add(stage, stage2_step(pipe, caches[i % len(caches)], opt, weights))
    return log


def run_schedule(pipe: Pipeline, caches: list[ClipCache], schedule: str, steps1: int, steps2: int,
                 lr: float = 1e-3, weights: LossWeights = LossWeights()) -> TrainLog:
    """Train under one schedule; every schedule spends ``steps1 + steps2`` steps."""
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    log = TrainLog()
    total = steps1 + steps2
    if schedule == "two-stage":
        train_stage1(pipe, caches, steps1, lr, log)
        train_stage2(pipe, caches, steps2, lr, weights, log)
    elif schedule == "stage1-only":
        train_stage1(pipe, caches, total, lr, log)
    elif schedule == "stage2-only":
        no_distill = LossWeights(0.0, weights.restore, weights.task, weights.beta_unc, weights.huber_delta)
        train_stage2(pipe, caches, total, lr, no_distill, log)
    else:
        train_stage2(pipe, caches, total, lr, weights, log, stage="joint")
    return log
