import numpy as np

from preaa.router import allocate_merge_budget, route

rng = np.random.default_rng(0)

#%%
# three frames of a 4x4 patch grid; frame 1 is much more salient than the others
N, P, D = 3, 16, 8
features = rng.normal(size=(N, P, D))
scores = rng.random((N, P)) * np.array([[0.3], [1.0], [0.5]])

plan, reduced = route(features, scores, r=0.25, gamma=0.3)
print("keep per frame:", plan.keep_per_frame, "-> backbone sees", reduced.shape)
print("merge budget:", plan.budget, "split as", plan.merge_counts().tolist())
for f, fp in enumerate(plan.frames):
    print(f"frame {f}: importance {fp.importance:.3f}  keep {fp.keep.tolist()}  "
          f"merge {fp.merge.tolist()}  prune {len(fp.prune)} tokens")

#%%
# caps bind: frame 0 wants 5.4 of 6 merges but only has 2 spare tokens
print(allocate_merge_budget([0.9, 0.1], 0.3, [2, 6], 10))

#%%
# gamma moves tokens between merge and prune; the backbone sequence length never changes
for gamma in (0.0, 0.3, 0.6, 0.9):
    plan, reduced = route(features, scores, 0.25, gamma)
    print(f"gamma={gamma}: sequence {reduced.shape[1]} per frame, merged {plan.budget}")

#%%
for mode in ("three-way", "pure-prune", "full-merge", "uniform-alloc"):
    plan, _ = route(features, scores, 0.25, 0.3, mode)
    print(f"{mode:>13}: merges per frame {plan.merge_counts().tolist()}")

#%%
print(plan.to_json()[:200], "...")
