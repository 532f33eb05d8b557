"""Conditioned diffusion transformer over anchor-point tokens.

Each layer runs part-masked self-attention, global self-attention, and
cross-attention to global condition tokens, every attention followed by
a feed-forward, all pre-norm residual. Part conditions (anchor
coordinates, shape descriptor, part-index embedding) are concatenated
with the noised points at the input projection; a flag switches to
cross-attention injection of part features for the ablation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .anchors import (DESCRIPTOR_WIDTH, INDEX_EMBED_WIDTH, AnchorSet,
                      part_index_embedding)
from .curation import AssemblyRecord
from .geometry import _philox, normalize_object, sample_surface
from .numerics import Tensor

EMBEDDING_MAGIC = b"EMB1"

OCC_GRID = 16  # orthographic occupancy resolution per view
OCC_PATCH = 4  # patch edge; 3 views * (16/4)^2 = 48 tokens of dim 16


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 6
    width: int = 128
    heads: int = 4
    c_d: int = DESCRIPTOR_WIDTH
    c_e: int = INDEX_EMBED_WIDTH
    m_max: int = 1024
    cond_drop_prob: float = 0.1
    global_tokens: int = 48
    global_width: int = OCC_PATCH * OCC_PATCH
    ff_mult: int = 4
    part_cross_attention: bool = False  # ablation: inject c_p by cross-attn

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError("cond_drop_prob must be in [0, 1)")

    @property
    def cond_dim(self) -> int:
        return 3 + self.c_d + self.c_e


def dit_tiny(**overrides) -> DenoiserConfig:
    return replace(DenoiserConfig(layers=6, width=128, heads=4), **overrides)


def dit_s(**overrides) -> DenoiserConfig:
    return replace(DenoiserConfig(layers=16, width=384, heads=8), **overrides)


@dataclass
class ConditionBundle:
    """Per-token part condition rows plus optional global condition tokens."""

    part_condition: np.ndarray  # (M, 3 + C_d + C_e)
    global_condition: np.ndarray | None = None  # (tokens, global_width)
    null_condition: bool = True


def build_part_condition(anchor_set: AnchorSet, descriptors: np.ndarray,
                         cfg: DenoiserConfig,
                         global_condition: np.ndarray | None = None) -> ConditionBundle:
    """Token rows [coords | shape descriptor | part-index embedding]."""
    m = len(anchor_set.points)
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.shape != (m, cfg.c_d):
        raise ValueError(f"descriptor shape {descriptors.shape} != ({m}, {cfg.c_d})")
    embeds = np.stack([part_index_embedding(int(pid), cfg.c_e)
                       for pid in anchor_set.part_ids])
    cp = np.concatenate([anchor_set.points, descriptors, embeds], axis=1)
    return ConditionBundle(cp, global_condition, global_condition is None)


def build_part_mask(spans: list) -> np.ndarray:
    """Boolean (M, M): true iff tokens share a part (block diagonal)."""
    m = sum(l for _, l in spans)
    mask = np.zeros((m, m), dtype=bool)
    for start, length in spans:
        mask[start:start + length, start:start + length] = True
    return mask


def timestep_embedding(t, width: int) -> np.ndarray:
    """Interleaved (sin, cos) sinusoidal embedding of integer timesteps."""
    if width % 2 != 0:
        raise ValueError("embedding width must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.empty((len(t), width))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb


def occupancy_tokens(record: AssemblyRecord, samples: int = 4096,
                     seed: int = 0) -> np.ndarray:
    """Three 16x16 orthographic occupancy views of the assembled object,
    patchified to 48 tokens of dim 16."""
    scale, offset = normalize_object(record.parts)
    areas = np.asarray(record.areas, dtype=np.float64)
    counts = np.maximum((areas / areas.sum() * samples).astype(int), 1)
    clouds = [(sample_surface(p, int(c), seed) + offset) * scale
              for p, c in zip(record.parts, counts)]
    points = np.concatenate(clouds, axis=0)
    cells = np.clip(((points + 0.5) * OCC_GRID).astype(int), 0, OCC_GRID - 1)
    views = np.zeros((3, OCC_GRID, OCC_GRID), dtype=np.float64)
    for v, (a, b) in enumerate(((0, 1), (0, 2), (1, 2))):
        views[v, cells[:, a], cells[:, b]] = 1.0
    n = OCC_GRID // OCC_PATCH
    tokens = (views.reshape(3, n, OCC_PATCH, n, OCC_PATCH)
              .transpose(0, 1, 3, 2, 4).reshape(3 * n * n, OCC_PATCH * OCC_PATCH))
    return tokens


def save_embedding(tokens: np.ndarray, path) -> None:
    tokens = np.asarray(tokens, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", tokens.shape[0], tokens.shape[1]))
        fh.write(tokens.tobytes())


def load_embedding(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != EMBEDDING_MAGIC:
            raise ValueError("malformed embedding file")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = fh.read(rows * cols * 4)
        if len(data) != rows * cols * 4:
            raise ValueError("malformed embedding file: truncated payload")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float64)


def build_global_condition(record: AssemblyRecord | None = None,
                           embedding_path=None,
                           cfg: DenoiserConfig | None = None,
                           use_occupancy: bool = False) -> np.ndarray | None:
    """External embedding tokens, built-in occupancy tokens, or None."""
    if embedding_path is not None:
        return load_embedding(embedding_path)
    if use_occupancy:
        if record is None:
            raise ValueError("occupancy conditioning needs a record")
        return occupancy_tokens(record)
    return None


class Denoiser:
    """Noise-prediction transformer; parameters live in a flat name dict."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._rng = _philox(seed, 0)
        w = cfg.width
        in_dim = 3 if cfg.part_cross_attention else 3 + cfg.cond_dim
        self._weight("in_proj.w", (in_dim, w))
        self._bias("in_proj.b", w)
        self._weight("time.w1", (w, w))
        self._bias("time.b1", w)
        self._weight("time.w2", (w, w))
        self._bias("time.b2", w)
        self._weight("null_tokens", (cfg.global_tokens, cfg.global_width), std=1.0)
        self._weight("cond_proj.w", (cfg.global_width, w))
        self._bias("cond_proj.b", w)
        if cfg.part_cross_attention:
            self._weight("part_tokens.w", (cfg.cond_dim, w))
            self._bias("part_tokens.b", w)
        subs = ["part", "global", "cross"]
        if cfg.part_cross_attention:
            subs = ["pcross"] + subs
        self.sublayers = subs
        for layer in range(cfg.layers):
            for sub in subs:
                self._attn_params(f"l{layer}.{sub}", w)
        self._ln("head.ln", w)
        self.params["head.w"] = nm.param(np.zeros((w, 3), dtype=np.float32))
        self._bias("head.b", 3)

    def _weight(self, name, shape, std=None):
        if std is None:
            std = 1.0 / np.sqrt(shape[0])
        self.params[name] = nm.param(
            (self._rng.normal(size=shape) * std).astype(np.float32))

    def _bias(self, name, dim):
        self.params[name] = nm.param(np.zeros(dim, dtype=np.float32))

    def _ln(self, name, dim):
        self.params[name + ".g"] = nm.param(np.ones(dim, dtype=np.float32))
        self.params[name + ".b"] = nm.param(np.zeros(dim, dtype=np.float32))

    def _attn_params(self, prefix, w):
        self._ln(f"{prefix}.ln", w)
        for proj in ("wq", "wk", "wv", "wo"):
            self._weight(f"{prefix}.{proj}", (w, w))
        self._ln(f"{prefix}.ff.ln", w)
        self._weight(f"{prefix}.ff.w1", (w, self.cfg.ff_mult * w))
        self._bias(f"{prefix}.ff.b1", self.cfg.ff_mult * w)
        self._weight(f"{prefix}.ff.w2", (self.cfg.ff_mult * w, w))
        self._bias(f"{prefix}.ff.b2", w)

    def load_state(self, arrays: dict) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = arrays[name].astype(np.float32)

    # -- building blocks ---------------------------------------------------

    def _p(self, name) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["in_proj.w"].data.dtype

    def _norm(self, x, prefix):
        return nm.layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def attention_block(self, x: Tensor, prefix: str, mask: np.ndarray,
                        context: Tensor | None = None) -> Tensor:
        """Pre-norm attention + feed-forward, both residual."""
        normed = self._norm(x, f"{prefix}.ln")
        kv = context if context is not None else normed
        q = nm.matmul(normed, self._p(f"{prefix}.wq"))
        k = nm.matmul(kv, self._p(f"{prefix}.wk"))
        v = nm.matmul(kv, self._p(f"{prefix}.wv"))
        x = nm.add(x, nm.masked_attention(q, k, v, mask, self.cfg.heads,
                                          self._p(f"{prefix}.wo")))
        h = self._norm(x, f"{prefix}.ff.ln")
        h = nm.gelu(nm.linear(h, self._p(f"{prefix}.ff.w1"), self._p(f"{prefix}.ff.b1")))
        h = nm.linear(h, self._p(f"{prefix}.ff.w2"), self._p(f"{prefix}.ff.b2"))
        return nm.add(x, h)

    def _context(self, batch: int, cond_tokens: np.ndarray | None,
                 drop_mask: np.ndarray | None) -> Tensor:
        """Global-condition tokens projected to model width, with per-sample
        replacement by the learned null tokens where drop_mask is set."""
        dt = self.dtype
        null = self._p("null_tokens")
        if cond_tokens is None:
            tokens = nm.mul(null, Tensor(np.ones((batch, 1, 1), dtype=dt)))
        else:
            cond_tokens = np.asarray(cond_tokens, dtype=dt)
            if cond_tokens.ndim == 2:
                cond_tokens = np.broadcast_to(cond_tokens[None],
                                              (batch,) + cond_tokens.shape)
            if drop_mask is None:
                drop_mask = np.zeros(batch, dtype=bool)
            if drop_mask.any() and cond_tokens.shape[1] != self.cfg.global_tokens:
                raise ValueError("condition dropout needs global_tokens-sized grids")
            keep = (~drop_mask).astype(dt)[:, None, None]
            drop = drop_mask.astype(dt)[:, None, None]
            if cond_tokens.shape[1] == self.cfg.global_tokens:
                tokens = nm.add(Tensor(cond_tokens * keep),
                                nm.mul(null, Tensor(drop)))
            else:
                tokens = Tensor(cond_tokens)
        return nm.linear(tokens, self._p("cond_proj.w"), self._p("cond_proj.b"))

    # -- forward -----------------------------------------------------------

    def forward(self, x_t: np.ndarray, t, cp: np.ndarray, mask: np.ndarray,
                cond_tokens: np.ndarray | None = None,
                drop_mask: np.ndarray | None = None) -> Tensor:
        """Predict noise for x_t; accepts (M, .) or batched (B, M, .) arrays."""
        dt = self.dtype
        x_t = np.asarray(x_t, dtype=dt)
        cp = np.asarray(cp, dtype=dt)
        squeeze = x_t.ndim == 2
        if squeeze:
            x_t, cp = x_t[None], cp[None]
        batch, m, _ = x_t.shape
        if m > self.cfg.m_max:
            raise ValueError(f"{m} tokens exceed m_max={self.cfg.m_max}")
        cfg = self.cfg

        if cfg.part_cross_attention:
            x = nm.linear(Tensor(x_t), self._p("in_proj.w"), self._p("in_proj.b"))
            part_ctx = nm.linear(Tensor(cp), self._p("part_tokens.w"),
                                 self._p("part_tokens.b"))
        else:
            x = nm.linear(Tensor(np.concatenate([x_t, cp], axis=-1)),
                          self._p("in_proj.w"), self._p("in_proj.b"))
            part_ctx = None

        temb = Tensor(timestep_embedding(t, cfg.width).astype(dt))
        if temb.shape[0] == 1 and batch > 1:
            temb = Tensor(np.broadcast_to(temb.data, (batch, cfg.width)).copy())
        h = nm.linear(temb, self._p("time.w1"), self._p("time.b1"))
        h = nm.linear(nm.gelu(h), self._p("time.w2"), self._p("time.b2"))
        x = nm.add(x, nm.reshape(h, (batch, 1, cfg.width)))

        context = self._context(batch, cond_tokens, drop_mask)
        all_true = np.ones((m, m), dtype=bool)
        cross_mask = np.ones((m, context.shape[-2]), dtype=bool)
        part_mask_arr = np.asarray(mask, dtype=bool)

        for layer in range(cfg.layers):
            if cfg.part_cross_attention:
                pmask = np.ones((m, part_ctx.shape[-2]), dtype=bool)
                x = self.attention_block(x, f"l{layer}.pcross", pmask, part_ctx)
            x = self.attention_block(x, f"l{layer}.part", part_mask_arr)
            x = self.attention_block(x, f"l{layer}.global", all_true)
            x = self.attention_block(x, f"l{layer}.cross", cross_mask, context)

        out = self._norm(x, "head.ln")
        out = nm.linear(out, self._p("head.w"), self._p("head.b"))
        return nm.reshape(out, (m, 3)) if squeeze else out

    def denoise(self, x_t, t, bundle: ConditionBundle, mask) -> np.ndarray:
        """Conditional noise prediction as a plain array."""
        cond = None if bundle.null_condition else bundle.global_condition
        return self.forward(x_t, t, bundle.part_condition, mask, cond).data.copy()

    def denoise_cfg(self, x_t, t, bundle: ConditionBundle, mask,
                    guidance: float = 1.0) -> np.ndarray:
        """Classifier-free guided prediction: null + s * (cond - null).

        The global condition is dropped for the null branch; part
        conditions are always kept.
        """
        if guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if bundle.null_condition or bundle.global_condition is None:
            return self.denoise(x_t, t, bundle, mask)
        eps_cond = self.forward(x_t, t, bundle.part_condition, mask,
                                bundle.global_condition).data
        if guidance == 1.0:
            return eps_cond.copy()
        eps_null = self.forward(x_t, t, bundle.part_condition, mask, None).data
        return eps_null + guidance * (eps_cond - eps_null)
