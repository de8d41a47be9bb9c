"""Small pipelines shared by the objective, training and acceptance tests."""

from __future__ import annotations

import numpy as np

from preaa import autodiff as ad
from preaa.backbone import Backbone, BackboneConfig
from preaa.objectives import LossWeights, task_loss
from preaa.scenes import generate_clip
from preaa.training import Pipeline, build_cache

SMALL = BackboneConfig(n_frames=3, h=4, w=4, dim_in=8, dim=8, depth=2, heads=2, registers=2)


def small_pipeline(seed: int = 0, gamma: float = 0.3, cfg: BackboneConfig = SMALL, **kw):
    backbone = Backbone(cfg, seed)
    pipe = Pipeline.create(backbone, seed, hidden=6, restore_dim=8, restore_heads=2,
                           merge_fraction=gamma, **kw)
    caches = [build_cache(backbone, generate_clip(seed * 10 + i, cfg.n_frames, cfg.h, cfg.w), 0.25)
              for i in range(2)]
    pipe.fit_heads(caches)
    return pipe, caches


def task_gradient_on_scorer(seed: int, gamma: float) -> tuple[dict[str, np.ndarray], int]:
    """Task-loss gradient on every scorer parameter, plus the clip's merge count."""
    pipe, caches = small_pipeline(seed, gamma)
    # give the restorer a live output projection so the dense path carries gradient
    rng = np.random.default_rng(seed)
    pipe.restoration.tensors["o.w"].data = rng.normal(0, 0.3, pipe.restoration.tensors["o.w"].shape)
    cache = caches[0]
    out = pipe.run(cache.grids, cache.features, scorer_mode="train", update_stats=False)
    loss, _ = task_loss(out.preds, cache.clip, LossWeights())
    return ad.gradients(loss, pipe.scorer.tensors), out.plan.budget
