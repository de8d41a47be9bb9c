import numpy as np

from preaa.harness import ExperimentConfig, evaluate, make_caches, make_clips, make_pipeline
from preaa.training import train_stage1, train_stage2

cfg = ExperimentConfig(steps1=120, steps2=60)
pipe = make_pipeline(cfg)
train = make_caches(pipe, make_clips(cfg, "train"), cfg.alpha)
held_out = make_clips(cfg, "eval")

#%%
# before training the scorer ranks tokens more or less at random
rows = evaluate(pipe, cfg, held_out)
print("untrained spearman:", np.round([r["spearman"] for r in rows], 3))

#%%
# stage 1: distil the attention-derived saliency target into the scorer
log = train_stage1(pipe, train, cfg.steps1, cfg.lr)
curve = [r["distill"] for r in log.rows]
print("distill loss: first pass %.4f, last pass %.4f" % (np.mean(curve[:4]), np.mean(curve[-4:])))
rows = evaluate(pipe, cfg, held_out)
print("stage-1 spearman:", np.round([r["spearman"] for r in rows], 3))

#%%
# stage 2: scorer and restoration under distillation + restoration + task losses
log = train_stage2(pipe, train, cfg.steps2, cfg.lr, cfg.loss_weights, log)
stage2 = [r for r in log.rows if r["stage"] == "2"]
for key in ("total", "distill", "restore", "depth"):
    print(f"{key:>8}: {stage2[0][key]:.4f} -> {np.mean([r[key] for r in stage2[-4:]]):.4f}")

#%%
rows = evaluate(pipe, cfg, held_out)
for key in ("restore_mse", "depth_abs", "pmap_abs", "spearman"):
    print(f"{key:>12}: {np.mean([r[key] for r in rows]):.4f}")

#%%
# the parameter-free fills on the same keep sets, for comparison
for variant in ("cross-attn", "zero-fill", "bilinear"):
    pipe.variant = variant
    print(f"{variant:>10}: restore mse {np.mean([r['restore_mse'] for r in evaluate(pipe, cfg, held_out)]):.4f}")
