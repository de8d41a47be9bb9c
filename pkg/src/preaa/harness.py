"""Experiment driver behind the command line: clip generation, training,
evaluation, ablation sweeps and the latency / FLOP benchmark.

Every CSV row carries a short hash of the configuration that produced it.
Clip seeds are derived from the experiment seed, so a run is reproducible
from its config file alone.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig, FlopCounter, build_sequence, split_outputs
from .checkpoint import load_checkpoint, save_checkpoint
from .objectives import LossWeights
from .restoration import VARIANTS, restore_variant
from .router import MODES, keep_count, select_keep
from .scenes import ClipSample, generate_clip, load_clip, save_clip
from .scorer import distill_loss, score_tokens
from .training import SCHEDULES, ClipCache, Pipeline, TrainLog, build_cache, run_schedule, train_stage1, train_stage2

SWEEP_AXES = {
    "r": "keep_ratio", "gamma": "merge_fraction", "alpha": "alpha",
    "mode": "routing", "restoration": "restoration", "schedule": "schedule",
}
EVAL_FIELDS = ["fingerprint", "clip", "seed", "restore_mse", "depth_abs", "pmap_abs",
               "camera_abs", "spearman", "distill"]
BENCH_FIELDS = ["fingerprint", "n_frames", "n_patches", "keep_ratio", "mode", "wall_ms",
                "global_attn_flops", "total_flops"]
BENCH_WARMUP = 2
BENCH_TRIALS = 3
EVAL_SEED_OFFSET = 10_000


@dataclass
class ExperimentConfig:
    backbone: dict = field(default_factory=dict)
    keep_ratio: float = 0.40
    merge_fraction: float = 0.30
    alpha: float = 0.25
    routing: str = "three-way"
    restoration: str = "cross-attn"
    schedule: str = "two-stage"
    weights: dict = field(default_factory=dict)
    seed: int = 0
    train_clips: int = 4
    eval_clips: int = 4
    steps1: int = 200
    steps2: int = 100
    lr: float = 1e-3
    scorer_hidden: int = 64
    restore_dim: int = 32
    restore_heads: int = 4
    bench_frames: list = field(default_factory=lambda: [4, 16])
    out_dir: str = "runs"

    def __post_init__(self):
        BackboneConfig(**self.backbone)
        LossWeights(**self.weights)
        keep_count(1, self.keep_ratio)
        if not 0 <= self.merge_fraction < 1:
            raise ValueError(f"merge_fraction must lie in [0, 1), got {self.merge_fraction}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for value, allowed in ((self.routing, MODES), (self.restoration, VARIANTS), (self.schedule, SCHEDULES)):
            if value not in allowed:
                raise ValueError(f"{value!r} is not one of {allowed}")

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.backbone)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def model_fingerprint(self) -> str:
        """Hash of everything that fixes parameter shapes and the frozen backbone."""
        d = {"backbone": dataclasses.asdict(self.backbone_config), "seed": self.seed,
             "scorer_hidden": self.scorer_hidden, "restore_dim": self.restore_dim,
             "restore_heads": self.restore_heads}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class BenchRecord:
    n_frames: int
    n_patches: int
    keep_ratio: float
    mode: str
    wall_ms: float
    global_attn_flops: int
    total_flops: int


def clip_seeds(cfg: ExperimentConfig, split: str) -> list[int]:
    base = cfg.seed * 100_000 + (EVAL_SEED_OFFSET if split == "eval" else 0)
    n = cfg.train_clips if split == "train" else cfg.eval_clips
    return [base + i for i in range(n)]


def make_clips(cfg: ExperimentConfig, split: str) -> list[ClipSample]:
    b = cfg.backbone_config
    return [generate_clip(s, b.n_frames, b.h, b.w) for s in clip_seeds(cfg, split)]


def _write_csv(path: Path, fields: list[str], rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


# -- gen ----------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig) -> list[Path]:
    paths = []
    for split in ("train", "eval"):
        for i, clip in enumerate(make_clips(cfg, split)):
            paths.append(save_clip(clip, cfg.out / "clips" / split / f"{i:03d}"))
    return paths


def load_clips(cfg: ExperimentConfig, split: str) -> list[ClipSample]:
    root = cfg.out / "clips" / split
    dirs = sorted(p for p in root.glob("*") if (p / "manifest.json").exists()) if root.exists() else []
    if len(dirs) < (cfg.train_clips if split == "train" else cfg.eval_clips):
        raise FileNotFoundError(f"missing {split} clips under {root}; run 'gen' first")
    clips = [load_clip(d) for d in dirs]
    expected = clip_seeds(cfg, split)
    if [c.seed for c in clips][:len(expected)] != expected:
        raise ValueError(f"clips under {root} were generated with a different seed")
    return clips[:len(expected)]


# -- train --------------------------------------------------------------------

def make_pipeline(cfg: ExperimentConfig) -> Pipeline:
    backbone = Backbone(cfg.backbone_config, cfg.seed)
    return Pipeline.create(backbone, seed=cfg.seed, hidden=cfg.scorer_hidden, restore_dim=cfg.restore_dim,
                           restore_heads=cfg.restore_heads, keep_ratio=cfg.keep_ratio,
                           merge_fraction=cfg.merge_fraction, routing=cfg.routing, variant=cfg.restoration)


def make_caches(pipe: Pipeline, clips: list[ClipSample], alpha: float) -> list[ClipCache]:
    return [build_cache(pipe.backbone, c, alpha) for c in clips]


def _checkpoint_path(cfg: ExperimentConfig, stage: str) -> Path:
    return cfg.out / "checkpoints" / f"stage{stage}.json"


def save_pipeline(pipe: Pipeline, cfg: ExperimentConfig, path: Path, stage: str) -> Path:
    meta = {"fingerprint": cfg.fingerprint(), "model": cfg.model_fingerprint(), "stage": stage,
            "backbone_checksum": pipe.backbone.checksum(), "config": cfg.to_dict()}
    save_checkpoint(path, pipe.state_dict(), meta)
    return path


def load_pipeline(cfg: ExperimentConfig, path) -> Pipeline:
    state, meta = load_checkpoint(path)
    if meta.get("model") != cfg.model_fingerprint():
        raise ValueError(f"checkpoint {path} was trained under a different model configuration")
    pipe = make_pipeline(cfg)
    pipe.load_state_dict(state)
    return pipe


def train_pipeline(cfg: ExperimentConfig, train: list[ClipSample]) -> tuple[Pipeline, TrainLog]:
    """Train a fresh pipeline under ``cfg.schedule`` entirely in memory."""
    pipe = make_pipeline(cfg)
    caches = make_caches(pipe, train, cfg.alpha)
    log = run_schedule(pipe, caches, cfg.schedule, cfg.steps1, cfg.steps2, cfg.lr, cfg.loss_weights)
    if pipe.heads is None:
        pipe.fit_heads(caches)
    return pipe, log


def cmd_train(cfg: ExperimentConfig, stage: str) -> dict[str, Path]:
    """Stage ``1``, ``2`` or ``joint``; writes a checkpoint and a loss-curve CSV."""
    if stage not in ("1", "2", "joint"):
        raise ValueError(f"stage must be 1, 2 or joint, got {stage!r}")
    clips = load_clips(cfg, "train")
    extra = {"fingerprint": cfg.fingerprint()}
    if stage == "1":
        pipe = make_pipeline(cfg)
        caches = make_caches(pipe, clips, cfg.alpha)
        log = train_stage1(pipe, caches, cfg.steps1, cfg.lr)
    elif stage == "2":
        caches = None
        if cfg.schedule == "two-stage":
            ck = _checkpoint_path(cfg, "1")
            if not ck.exists():
                raise FileNotFoundError(f"two-stage training needs the stage-1 checkpoint {ck}; run stage 1 first")
            pipe = load_pipeline(cfg, ck)
            weights, steps = cfg.loss_weights, cfg.steps2
        elif cfg.schedule == "stage2-only":
            pipe = make_pipeline(cfg)
            weights = dataclasses.replace(cfg.loss_weights, distill=0.0)
            steps = cfg.steps1 + cfg.steps2
        else:
            raise ValueError(f"stage 2 is not part of schedule {cfg.schedule!r}")
        caches = make_caches(pipe, clips, cfg.alpha)
        log = train_stage2(pipe, caches, steps, cfg.lr, weights)
    else:
        pipe = make_pipeline(cfg)
        caches = make_caches(pipe, clips, cfg.alpha)
        log = train_stage2(pipe, caches, cfg.steps1 + cfg.steps2, cfg.lr, cfg.loss_weights, stage="joint")
    ck = save_pipeline(pipe, cfg, _checkpoint_path(cfg, stage), stage)
    curve = cfg.out / "curves" / f"stage{stage}.csv"
    log.write_csv(curve, extra)
    return {"checkpoint": ck, "curve": curve}


# -- eval ---------------------------------------------------------------------

def evaluate_clip(pipe: Pipeline, cache: ClipCache) -> dict[str, float]:
    with ad.no_grad():
        out = pipe.run(cache.grids, cache.features, scorer_mode="eval")
    N = len(cache.grids)
    S = out.scores.data.reshape(N, -1)
    clip = cache.clip
    row = {
        "restore_mse": float(np.mean((out.G_dense.data - cache.G_full) ** 2)),
        "spearman": float(spearmanr(S.reshape(-1), cache.target.values.reshape(-1))[0]),
        "distill": distill_loss(S, cache.target).item(),
    }
    if out.preds is not None:
        row["depth_abs"] = float(np.mean(np.abs(out.preds.dense.depth.data - clip.depth)))
        row["pmap_abs"] = float(np.mean(np.abs(out.preds.dense.points.data - clip.points)))
        row["camera_abs"] = float(np.mean(np.abs(out.preds.cameras.data - clip.cameras)))
    return row


def evaluate(pipe: Pipeline, cfg: ExperimentConfig, clips: list[ClipSample]) -> list[dict]:
    rows = []
    for i, cache in enumerate(make_caches(pipe, clips, cfg.alpha)):
        rows.append({"fingerprint": cfg.fingerprint(), "clip": i, "seed": cache.clip.seed,
                     **evaluate_clip(pipe, cache)})
    return rows


def cmd_eval(cfg: ExperimentConfig, checkpoint=None) -> Path:
    checkpoint = checkpoint or _latest_checkpoint(cfg)
    pipe = load_pipeline(cfg, checkpoint)
    if pipe.heads is None:
        pipe.fit_heads(make_caches(pipe, load_clips(cfg, "train"), cfg.alpha))
    rows = evaluate(pipe, cfg, load_clips(cfg, "eval"))
    return _write_csv(cfg.out / "eval.csv", EVAL_FIELDS, rows)


def _latest_checkpoint(cfg: ExperimentConfig) -> Path:
    for stage in ("2", "joint", "1"):
        p = _checkpoint_path(cfg, stage)
        if p.exists():
            return p
    raise FileNotFoundError(f"no checkpoint under {cfg.out / 'checkpoints'}; run 'train' first")


# -- bench --------------------------------------------------------------------

def _time(fn) -> float:
    for _ in range(BENCH_WARMUP):
        fn()
    times = []
    for _ in range(BENCH_TRIALS):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def run_in_aa(pipe: Pipeline, grids, features: np.ndarray, layer: int, flops: FlopCounter | None = None):
    """Full-length blocks up to ``layer``, then only camera/register and kept tokens."""
    bb, cfg = pipe.backbone, pipe.backbone.cfg
    N = len(grids)
    S = score_tokens(features, pipe.scorer, "eval")
    if flops is not None:
        flops.add("scorer", 2 * N * cfg.patches * (cfg.dim_in * pipe.scorer.hidden + 10 * pipe.scorer.hidden))
    keep = select_keep(S.data.reshape(N, -1), pipe.keep_ratio)
    full = build_sequence(grids)
    x, _ = bb.forward(full, flops=flops, layers=range(layer))
    specials = 1 + cfg.registers
    per = cfg.tokens_per_frame
    rows = np.concatenate([f * per + np.concatenate([np.arange(specials), specials + keep[f]]) for f in range(N)])
    F = features.reshape(N, -1, features.shape[-1])
    reduced = build_sequence(grids, np.take_along_axis(F, keep[..., None], axis=1), keep)
    G, _ = bb.forward(reduced, flops=flops, layers=range(layer, cfg.depth), x=x[rows])
    _, G_keep = split_outputs(G, reduced, N)
    return restore_variant(pipe.variant, F, keep, G_keep, pipe.restoration, (cfg.h, cfg.w), flops)


def _bench_fn(pipe: Pipeline, mode: str, grids, features, flops=None):
    cfg = pipe.backbone.cfg
    if mode == "full":
        return lambda: pipe.backbone.forward(build_sequence(grids), flops=flops)
    if mode == "pre-AA":
        return lambda: pipe.run(grids, features, "eval", flops=flops)
    layer = cfg.depth // 2
    return lambda: run_in_aa(pipe, grids, features, layer, flops)


def bench(pipe: Pipeline, n_frames: int, seed: int = 0, modes=("full", "pre-AA", "in-AA")) -> list[BenchRecord]:
    cfg = pipe.backbone.cfg
    clip = generate_clip(seed, n_frames, cfg.h, cfg.w)
    grids = pipe.backbone.encode(clip)
    features = np.stack([g.features for g in grids])
    records = []
    with ad.no_grad():
        for mode in modes:
            flops = FlopCounter()
            _bench_fn(pipe, mode, grids, features, flops)()
            wall = _time(_bench_fn(pipe, mode, grids, features))
            label = f"in-AA@{cfg.depth // 2}" if mode == "in-AA" else mode
            r = 1.0 if mode == "full" else pipe.keep_ratio
            records.append(BenchRecord(n_frames, cfg.patches, r, label, wall,
                                       flops["global_attn"], flops.total))
    return records


def cmd_bench(cfg: ExperimentConfig, n_list: list[int] | None = None, checkpoint=None) -> Path:
    n_list = list(n_list or cfg.bench_frames)
    if not n_list:
        raise ValueError("bench needs at least one frame count")
    rows = []
    for n in n_list:
        bcfg = cfg.replace(backbone={**cfg.backbone, "n_frames": int(n)})
        pipe = load_pipeline(cfg, checkpoint) if checkpoint else make_pipeline(bcfg)
        if checkpoint:
            pipe.backbone = Backbone(bcfg.backbone_config, cfg.seed)
        for rec in bench(pipe, int(n), cfg.seed):
            rows.append({"fingerprint": cfg.fingerprint(), **dataclasses.asdict(rec)})
    return _write_csv(cfg.out / "bench.csv", BENCH_FIELDS, rows)


# -- sweep --------------------------------------------------------------------

def parse_axis_value(axis: str, raw: str):
    field_name = SWEEP_AXES[axis]
    if field_name in ("keep_ratio", "merge_fraction", "alpha"):
        return float(raw)
    return raw


def sweep_point(cfg: ExperimentConfig, train: list[ClipSample], held_out: list[ClipSample]) -> dict:
    pipe, log = train_pipeline(cfg, train)
    rows = evaluate(pipe, cfg, held_out)
    out = {k: float(np.mean([r[k] for r in rows])) for k in EVAL_FIELDS[3:]}
    last_restore = [r["restore"] for r in log.rows if r["restore"] != ""]
    out["final_train_restore"] = last_restore[-1] if last_restore else ""
    rec = bench(pipe, cfg.backbone_config.n_frames, cfg.seed, modes=("pre-AA",))[0]
    out.update({"wall_ms": rec.wall_ms, "global_attn_flops": rec.global_attn_flops, "total_flops": rec.total_flops})
    return out


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list) -> Path:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    train, held_out = make_clips(cfg, "train"), make_clips(cfg, "eval")
    rows = []
    for raw in values:
        value = parse_axis_value(axis, str(raw))
        point = cfg.replace(**{SWEEP_AXES[axis]: value})
        rows.append({"fingerprint": point.fingerprint(), "axis": axis, "value": value,
                     **sweep_point(point, train, held_out)})
    fields = ["fingerprint", "axis", "value"] + EVAL_FIELDS[3:] + [
        "final_train_restore", "wall_ms", "global_attn_flops", "total_flops"]
    return _write_csv(cfg.out / f"sweep_{axis}.csv", fields, rows)
