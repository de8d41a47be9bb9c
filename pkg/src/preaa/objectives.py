"""Prediction heads and training losses.

The camera head reads the backbone output at each frame's camera token; the
dense head reads the restored patch grid and emits depth, a 3-channel point
map and two log-uncertainty maps. Both heads are linear, fitted once by ridge
regression on unpruned backbone outputs and then held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scorer import distill_loss

DENSE_CHANNELS = 6  # depth, point xyz, log sigma depth, log sigma points


@dataclass(frozen=True)
class LossWeights:
    distill: float = 1.0
    restore: float = 1.0
    task: float = 0.1
    beta_unc: float = 0.1
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.beta_unc <= 0:
            raise ValueError("beta_unc must be positive")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


@dataclass
class DensePrediction:
    depth: Tensor         # [N, h, w]
    points: Tensor        # [N, h, w, 3]
    sigma_depth: Tensor   # [N, h, w], > 0
    sigma_points: Tensor  # [N, h, w], > 0


@dataclass
class Predictions:
    cameras: Tensor       # [N, 8]
    dense: DensePrediction


@dataclass
class TaskHeads:
    camera_w: np.ndarray  # [D', 8]
    camera_b: np.ndarray
    dense_w: np.ndarray   # [D', 6]
    dense_b: np.ndarray

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"heads.camera.w": self.camera_w, "heads.camera.b": self.camera_b,
                "heads.dense.w": self.dense_w, "heads.dense.b": self.dense_b}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "TaskHeads":
        return cls(state["heads.camera.w"], state["heads.camera.b"],
                   state["heads.dense.w"], state["heads.dense.b"])

    def predict(self, cam_out, dense_out, grid: tuple[int, int]) -> Predictions:
        """``cam_out`` is ``[N, D']``, ``dense_out`` is ``[N, P, D']``."""
        h, w = grid
        cams = ad.as_tensor(cam_out) @ self.camera_w + self.camera_b
        dense_out = ad.as_tensor(dense_out)
        N = dense_out.shape[0]
        y = (dense_out @ self.dense_w + self.dense_b).reshape(N, h, w, DENSE_CHANNELS)
        dense = DensePrediction(y[..., 0], y[..., 1:4], ad.exp(y[..., 4]), ad.exp(y[..., 5]))
        return Predictions(cams, dense)


def _ridge(X: np.ndarray, Y: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc = X - mx
    W = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(X.shape[1]), Xc.T @ (Y - my))
    return W, my - mx @ W


def fit_heads(cam_outputs: list[np.ndarray], dense_outputs: list[np.ndarray], clips, ridge: float = 1e-2,
              beta: float = 0.1) -> TaskHeads:
    """Least-squares heads fitted on unpruned outputs.

    The value channels regress the ground truth. Each log-uncertainty channel
    then regresses the per-pixel minimiser ``log(beta / residual)`` of its
    loss, where ``residual`` is the value-plus-gradient error the fitted value
    channels leave on the same data.
    """
    Xc = np.concatenate(cam_outputs)
    Yc = np.concatenate([c.cameras for c in clips])
    Xd = np.concatenate([d.reshape(-1, d.shape[-1]) for d in dense_outputs])
    Yd = np.concatenate([np.concatenate([c.depth[..., None], c.points], axis=-1).reshape(-1, 4) for c in clips])
    cw, cb = _ridge(Xc, Yc, ridge)
    dw, db = _ridge(Xd, Yd, ridge)
    log_sigma = []
    for d, c in zip(dense_outputs, clips):
        y = d @ dw + db
        shape = c.depth.shape
        per_map = []
        for err in (y[..., 0].reshape(shape) - c.depth, y[..., 1:].reshape(shape + (3,)) - c.points):
            chan = err.ndim == 4
            gu, gv = spatial_gradient(err, chan)
            a = np.abs(err) + np.abs(gu.data) + np.abs(gv.data)
            a = a.sum(axis=-1) if chan else a
            per_map.append(np.log(beta / np.maximum(a, beta * 1e-3)))
        log_sigma.append(np.stack(per_map, axis=-1).reshape(-1, 2))
    sw, sb = _ridge(Xd, np.concatenate(log_sigma), ridge)
    return TaskHeads(cw, cb, np.concatenate([dw, sw], axis=1), np.concatenate([db, sb]))


# -- losses -----------------------------------------------------------------

def huber(x, delta: float = 1.0) -> Tensor:
    x = ad.as_tensor(x)
    a = ad.abs_(x)
    return ad.where(a.data <= delta, x * x * 0.5, (a - 0.5 * delta) * delta)


def camera_loss(pred, gt, delta: float = 1.0) -> Tensor:
    pred = ad.as_tensor(pred)
    return ad.sum_(huber(pred - np.asarray(gt, dtype=np.float64).reshape(pred.shape), delta))


def spatial_gradient(X, channels: bool = False) -> tuple[Tensor, Tensor]:
    """Forward differences ``(d/du, d/dv)`` with a zero last column / row.

    Spatial axes are the last two, or the two before a trailing channel axis
    when ``channels`` is set.
    """
    X = ad.as_tensor(X)
    ax_v, ax_u = (X.ndim - 3, X.ndim - 2) if channels else (X.ndim - 2, X.ndim - 1)
    if ax_v < 0 or X.shape[ax_v] < 2 or X.shape[ax_u] < 2:
        raise ValueError(f"spatial gradient needs a grid of at least 2x2, got {X.shape}")

    def diff(axis):
        n = X.shape[axis]
        hi = [slice(None)] * X.ndim
        lo = [slice(None)] * X.ndim
        hi[axis], lo[axis] = slice(1, n), slice(0, n - 1)
        d = X[tuple(hi)] - X[tuple(lo)]
        pad_shape = list(X.shape)
        pad_shape[axis] = 1
        return ad.concat([d, Tensor(np.zeros(pad_shape))], axis=axis)

    return diff(ax_u), diff(ax_v)


def _uncertain_regression(pred, sigma, gt, beta: float, channels: bool) -> Tensor:
    pred, sigma = ad.as_tensor(pred), ad.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("uncertainty must be strictly positive")
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    s = sigma.reshape(sigma.shape + (1,)) if channels else sigma
    err = pred - gt
    gu, gv = spatial_gradient(err, channels)
    total = ad.sum_(ad.abs_(s * err)) + ad.sum_(ad.abs_(s * gu)) + ad.sum_(ad.abs_(s * gv))
    return total - ad.sum_(ad.log(sigma)) * beta


def depth_loss(pred: DensePrediction, gt_depth, beta: float = 0.1) -> Tensor:
    return _uncertain_regression(pred.depth, pred.sigma_depth, gt_depth, beta, channels=False)


def pmap_loss(pred: DensePrediction, gt_points, beta: float = 0.1) -> Tensor:
    return _uncertain_regression(pred.points, pred.sigma_points, gt_points, beta, channels=True)


def restore_loss(G_dense, G_full) -> Tensor:
    G_dense = ad.as_tensor(G_dense)
    diff = G_dense - np.asarray(G_full, dtype=np.float64).reshape(G_dense.shape)
    return ad.mean(diff * diff)


def stage1_loss(S, target) -> Tensor:
    return distill_loss(S, target)


def task_loss(preds: Predictions, gts, w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    cam = camera_loss(preds.cameras, gts.cameras, w.huber_delta)
    dep = depth_loss(preds.dense, gts.depth, w.beta_unc)
    pts = pmap_loss(preds.dense, gts.points, w.beta_unc)
    return cam + dep + pts, {"camera": cam.item(), "depth": dep.item(), "pmap": pts.item()}


def stage2_loss(S, target, G_dense, G_full, preds: Predictions | None, gts, w: LossWeights = LossWeights()):
    """Weighted sum of distillation, restoration and task terms.

    Returns ``(total, terms)`` where ``terms`` holds the unweighted value of
    every term plus ``total``. Zero-weighted terms are left out of the graph.
    """
    terms: dict[str, float] = {}
    parts = []
    if w.distill:
        d = distill_loss(S, target)
        terms["distill"] = d.item()
        parts.append(d * w.distill)
    r = restore_loss(G_dense, G_full)
    terms["restore"] = r.item()
    if w.restore:
        parts.append(r * w.restore)
    if w.task and preds is not None:
        t, breakdown = task_loss(preds, gts, w)
        terms.update(breakdown)
        parts.append(t * w.task)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    terms["total"] = total.item()
    return total, terms
