"""Frozen miniature alternating-attention backbone.

The frame encoder is a fixed random linear projection of each patch's input
vector plus a 2-D sinusoidal positional embedding. The aggregator prepends a
camera token and ``R`` register tokens to every frame and runs ``L`` blocks,
each a frame-restricted attention layer followed by a global attention layer
(pre-LN, GELU MLP). All weights are drawn once from a seed and never train.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenes import ClipSample

PATCH, CAMERA, REGISTER = 0, 1, 2


@dataclass(frozen=True)
class BackboneConfig:
    n_frames: int = 4
    h: int = 8
    w: int = 8
    dim_in: int = 32       # D, frame-encoder feature width
    dim: int = 48          # D', aggregator width
    depth: int = 4         # L
    heads: int = 4         # H
    registers: int = 4     # R
    in_channels: int = 12  # C_in of the clip images
    mlp_ratio: int = 4
    qk_gain: float = 0.7
    layer_scale: float = 0.5
    tied_qk: bool = True   # global layers only: attention becomes a similarity matcher

    def __post_init__(self):
        if self.depth < 1 or self.heads < 1:
            raise ValueError("need at least one block and one head")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def patches(self) -> int:
        return self.h * self.w

    @property
    def tokens_per_frame(self) -> int:
        return self.patches + 1 + self.registers


@dataclass
class TokenGrid:
    frame: int
    features: np.ndarray   # [h, w, D]
    camera: np.ndarray     # [D]
    registers: np.ndarray  # [R, D]

    def flat(self) -> np.ndarray:
        """Patch features in row-major flat order, ``[P, D]``."""
        return self.features.reshape(-1, self.features.shape[-1])


@dataclass
class TokenSequence:
    """Backbone input: ``tokens[T, D]`` with a frame id, role and patch index per row."""

    tokens: Tensor
    frames: np.ndarray
    roles: np.ndarray
    patch_index: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class AttentionTrace:
    """Global-attention weights, one ``[H, T, T]`` array per captured layer."""

    layers: list[np.ndarray]
    frames: np.ndarray
    roles: np.ndarray
    patch_index: np.ndarray

    @property
    def n_frames(self) -> int:
        return int(self.frames.max()) + 1

    def mean_attention(self) -> np.ndarray:
        stacked = np.stack(self.layers)  # [L, H, T, T]
        return stacked.mean(axis=(0, 1))


@dataclass
class FlopCounter:
    counts: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def add(self, key: str, flops: int) -> None:
        self.counts[key] += int(flops)

    def __getitem__(self, key: str) -> int:
        return self.counts.get(key, 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def sinusoidal_embedding(h: int, w: int, dim: int) -> np.ndarray:
    """2-D sin/cos embedding ``[h, w, dim]``; half the channels per axis."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for coord in (rows, cols):
        ang = coord[..., None] * freqs
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=-1)


def _linear(x: Tensor, w: Tensor, b: Tensor, flops: FlopCounter | None, key: str) -> Tensor:
    if flops is not None:
        flops.add(key, 2 * x.size // x.shape[-1] * w.shape[0] * w.shape[1])
    return x @ w + b


class Backbone:
    """Seeded, frozen stand-in for the encoder plus aggregator."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng([seed, 7919])
        D, Dp, R = cfg.dim_in, cfg.dim, cfg.registers
        p: dict[str, np.ndarray] = {}
        p["enc.w"] = rng.normal(0, 1 / np.sqrt(cfg.in_channels), (cfg.in_channels, D))
        p["camera_token"] = rng.normal(0, 1.0, D)
        p["register_tokens"] = rng.normal(0, 1.0, (R, D))
        p["in.w"] = rng.normal(0, 1 / np.sqrt(D), (D, Dp))
        p["in.b"] = np.zeros(Dp)
        hidden = cfg.mlp_ratio * Dp
        for l in range(cfg.depth):
            for kind in ("frame", "global"):
                pre = f"block{l}.{kind}"
                p[f"{pre}.ln1.w"], p[f"{pre}.ln1.b"] = np.ones(Dp), np.zeros(Dp)
                qkv = rng.normal(0, 1 / np.sqrt(Dp), (Dp, 3 * Dp))
                qkv[:, :2 * Dp] *= cfg.qk_gain
                if cfg.tied_qk and kind == "global":
                    qkv[:, Dp:2 * Dp] = qkv[:, :Dp]
                p[f"{pre}.qkv.w"], p[f"{pre}.qkv.b"] = qkv, np.zeros(3 * Dp)
                p[f"{pre}.proj.w"] = rng.normal(0, 1 / np.sqrt(Dp), (Dp, Dp))
                p[f"{pre}.proj.b"] = np.zeros(Dp)
                p[f"{pre}.ln2.w"], p[f"{pre}.ln2.b"] = np.ones(Dp), np.zeros(Dp)
                p[f"{pre}.fc1.w"] = rng.normal(0, 1 / np.sqrt(Dp), (Dp, hidden))
                p[f"{pre}.fc1.b"] = np.zeros(hidden)
                p[f"{pre}.fc2.w"] = rng.normal(0, 1 / np.sqrt(hidden), (hidden, Dp))
                p[f"{pre}.fc2.b"] = np.zeros(Dp)
        p["out_ln.w"], p["out_ln.b"] = np.ones(Dp), np.zeros(Dp)
        # frozen: plain constants, never requires_grad
        self.params = {k: Tensor(v, name=k) for k, v in p.items()}
        self.pos_embed = sinusoidal_embedding(cfg.h, cfg.w, D)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def checksum(self) -> str:
        hsh = hashlib.sha256()
        for k in sorted(self.params):
            hsh.update(k.encode())
            hsh.update(self.params[k].data.tobytes())
        return hsh.hexdigest()

    # -- encoder ------------------------------------------------------------
    def encode(self, clip: ClipSample) -> list[TokenGrid]:
        cfg = self.cfg
        if clip.grid != (cfg.h, cfg.w):
            raise ValueError(f"clip grid {clip.grid} does not match backbone {(cfg.h, cfg.w)}")
        if clip.images.shape[-1] != cfg.in_channels:
            raise ValueError("clip channel count does not match backbone")
        w = self.params["enc.w"].data
        cam = self.params["camera_token"].data
        regs = self.params["register_tokens"].data
        return [TokenGrid(f, img @ w + self.pos_embed, cam.copy(), regs.copy())
                for f, img in enumerate(clip.images)]

    # -- aggregator ---------------------------------------------------------
    def _attention_layer(self, x: Tensor, pre: str, n_frames: int, global_: bool,
                         flops: FlopCounter | None, capture: list | None) -> Tensor:
        cfg, prm = self.cfg, self.params
        T, Dp = x.shape
        H = cfg.heads
        dh = Dp // H
        y = ad.layer_norm(x, prm[f"{pre}.ln1.w"], prm[f"{pre}.ln1.b"])
        kind = "global" if global_ else "frame"
        qkv = _linear(y, prm[f"{pre}.qkv.w"], prm[f"{pre}.qkv.b"], flops, f"{kind}_proj")
        groups = 1 if global_ else n_frames
        tg = T // groups
        qkv = qkv.reshape(groups, tg, 3, H, dh).transpose(2, 0, 3, 1, 4)  # [3, G, H, tg, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        if flops is not None:
            flops.add(f"{kind}_attn", 2 * 2 * groups * H * tg * tg * dh)
        out, weights = ad.attention(q, k, v, 1.0 / np.sqrt(dh), keep_weights=capture is not None)
        if capture is not None:
            capture.append(weights[0])
        out = out.transpose(0, 2, 1, 3).reshape(T, Dp)
        ls = cfg.layer_scale
        x = x + _linear(out, prm[f"{pre}.proj.w"], prm[f"{pre}.proj.b"], flops, f"{kind}_proj") * ls
        y = ad.layer_norm(x, prm[f"{pre}.ln2.w"], prm[f"{pre}.ln2.b"])
        y = ad.gelu(_linear(y, prm[f"{pre}.fc1.w"], prm[f"{pre}.fc1.b"], flops, "mlp"))
        return x + _linear(y, prm[f"{pre}.fc2.w"], prm[f"{pre}.fc2.b"], flops, "mlp") * ls

    def forward(self, seq: TokenSequence, capture: bool = False, flops: FlopCounter | None = None,
                layers: range | None = None, x: Tensor | None = None):
        """Run blocks ``layers`` (all by default) over ``seq``.

        Returns ``(G, trace)``; ``trace`` is ``None`` unless ``capture``. When
        ``x`` is given it is used as the already-projected hidden state.
        """
        cfg, prm = self.cfg, self.params
        n_frames = _validate_frames(seq.frames)
        if x is None:
            x = _linear(seq.tokens, prm["in.w"], prm["in.b"], flops, "embed")
        captured: list | None = [] if capture else None
        layers = range(cfg.depth) if layers is None else layers
        for l in layers:
            x = self._attention_layer(x, f"block{l}.frame", n_frames, False, flops, None)
            x = self._attention_layer(x, f"block{l}.global", n_frames, True, flops, captured)
        if layers.stop < cfg.depth:
            return x, None
        G = ad.layer_norm(x, prm["out_ln.w"], prm["out_ln.b"])
        trace = None
        if capture:
            trace = AttentionTrace(captured, seq.frames, seq.roles, seq.patch_index)
        return G, trace


def _validate_frames(frames: np.ndarray) -> int:
    """Frames must be contiguous blocks ``0..N-1`` of equal length."""
    frames = np.asarray(frames)
    n = int(frames.max()) + 1 if frames.size else 0
    if n == 0 or frames.size % n:
        raise ValueError("inconsistent frame tags")
    expected = np.repeat(np.arange(n), frames.size // n)
    if not np.array_equal(frames, expected):
        raise ValueError("inconsistent frame tags")
    return n


def frame_tags(grid: TokenGrid, patch_index) -> tuple[np.ndarray, np.ndarray]:
    """Roles and patch indices of one ``[camera, registers..., patches...]`` block."""
    R = grid.registers.shape[0]
    roles = np.concatenate([[CAMERA], np.full(R, REGISTER), np.full(len(patch_index), PATCH)])
    pidx = np.concatenate([[-1], np.full(R, -1), np.asarray(patch_index)])
    return roles, pidx


def build_sequence(grids: list[TokenGrid], patches=None, keep: np.ndarray | None = None) -> TokenSequence:
    """Assemble the backbone input.

    With no ``patches`` the full grid of every frame is used. Otherwise
    ``patches`` is a ``[N, K, D]`` tensor (e.g. the merged keep tokens) and
    ``keep`` the matching ``[N, K]`` flat patch indices.
    """
    N = len(grids)
    specials = np.stack([np.concatenate([g.camera[None], g.registers]) for g in grids])
    if patches is None:
        patches = Tensor(np.stack([g.flat() for g in grids]))
        keep = np.tile(np.arange(patches.shape[1]), (N, 1))
    patches = ad.as_tensor(patches)
    K = patches.shape[1]
    tokens = ad.concat([Tensor(specials), patches], axis=1).reshape(N * (specials.shape[1] + K), -1)
    roles, pidx = [], []
    for f, g in enumerate(grids):
        r, p = frame_tags(g, keep[f])
        roles.append(r)
        pidx.append(p)
    frames = np.repeat(np.arange(N), specials.shape[1] + K)
    return TokenSequence(tokens, frames, np.concatenate(roles), np.concatenate(pidx).astype(int))


def encode_frames(clip: ClipSample, cfg: BackboneConfig, seed: int = 0) -> list[TokenGrid]:
    return Backbone(cfg, seed).encode(clip)


def aa_forward(backbone: Backbone, seq: TokenSequence, capture: bool = False,
               flops: FlopCounter | None = None):
    return backbone.forward(seq, capture=capture, flops=flops)


def split_outputs(G: Tensor, seq: TokenSequence, n_frames: int):
    """Split backbone output into camera rows ``[N, D']`` and patch rows ``[N, K, D']``."""
    per = len(seq) // n_frames
    Gf = G.reshape(n_frames, per, G.shape[-1])
    return Gf[:, 0, :], Gf[:, per - int((seq.roles[:per] == PATCH).sum()):, :]
