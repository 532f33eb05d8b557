"""DDPM forward process, noise-prediction training, and samplers.

The model predicts the added noise; sampling runs a unified DDIM
recursion (eta 0 for ddim, eta 1 for ddpm) over a timestep
subsequence, optionally with classifier-free guidance. Training is
fully deterministic per seed: every step's batch selection, timesteps,
noise, and condition dropout come from a counter-based PRNG keyed by
(seed, step), so resuming from a checkpoint replays exactly.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .anchors import AnchorSet, build_anchor_pair, descriptors_for_anchor_set
from .curation import AssemblyRecord, read_manifest, read_record, write_json_atomic
from .fitting import assemble, fit_all_parts
from .geometry import _philox, normalize_object
from .model import (ConditionBundle, Denoiser, DenoiserConfig,
                    build_global_condition, build_part_condition,
                    build_part_mask)
from .numerics import AdamState, Tensor, adam_step, backward


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    betas: np.ndarray
    alphas_bar: np.ndarray

    def validate(self) -> None:
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        ab = self.alphas_bar
        if np.any(ab <= 0) or np.any(ab >= 1) or np.any(np.diff(ab) >= 0):
            raise ValueError("alphas_bar must be strictly decreasing in (0, 1)")


def make_schedule(kind: str = "linear", timesteps: int = 1000) -> NoiseSchedule:
    """Linear betas 1e-4..0.02 or squared-cosine cumulative alphas."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, timesteps)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(timesteps + 1) / timesteps
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        ab = f[1:] / f[0]
        betas = np.clip(1.0 - ab / np.concatenate([[1.0], ab[:-1]]), 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas_bar = np.cumprod(1.0 - betas)
    sched = NoiseSchedule(timesteps, betas, alphas_bar)
    sched.validate()
    return sched


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.timesteps):
        raise ValueError("timestep out of range")
    ab = schedule.alphas_bar[t]
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class TrainBatch:
    x0: np.ndarray  # (B, M, 3)
    part_conditions: np.ndarray  # (B, M, cond_dim)
    masks: np.ndarray  # (B, M, M) boolean
    cond_tokens: np.ndarray | None  # (B, Tg, gw) or None
    t: np.ndarray  # (B,)
    eps: np.ndarray  # (B, M, 3)
    drop_mask: np.ndarray | None = None  # (B,) condition dropout


def training_loss(model: Denoiser, batch: TrainBatch,
                  schedule: NoiseSchedule) -> Tensor:
    """MSE between true and predicted noise at q-sampled points."""
    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    pred = model.forward(x_t.astype(np.float32), batch.t, batch.part_conditions,
                         batch.masks, batch.cond_tokens, batch.drop_mask)
    diff = nm.sub(pred, Tensor(batch.eps.astype(np.float32)))
    return nm.tmean(nm.mul(diff, diff))


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    cfg_scale: float = 1.0
    seed: int = 0
    eta: float | None = None  # default: 0 for ddim, 1 for ddpm
    clip_x0: float | None = 1.0  # anchors live in [-0.5, 0.5]; None disables

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")


def sampler_timesteps(timesteps: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= timesteps:
        raise ValueError("steps must be in [1, T]")
    return np.unique(np.linspace(0, timesteps - 1, steps).round().astype(int))[::-1]


def sample(model: Denoiser, input_anchors: AnchorSet, bundle: ConditionBundle,
           mask: np.ndarray, sampler: SamplerConfig,
           schedule: NoiseSchedule,
           denoise_fn=None) -> AnchorSet:
    """Generate assembled anchors from unit-Gaussian noise.

    `denoise_fn(x_t, t) -> eps_hat` overrides the model (used by the
    analytic-denoiser oracle tests).
    """
    if denoise_fn is None:
        def denoise_fn(x_t, t):
            return model.denoise_cfg(x_t, t, bundle, mask, sampler.cfg_scale)
    eta = sampler.eta if sampler.eta is not None else (0.0 if sampler.kind == "ddim" else 1.0)
    rng = _philox(sampler.seed, 0)
    m = len(input_anchors.points)
    x = rng.normal(size=(m, 3))
    ts = sampler_timesteps(schedule.timesteps, sampler.steps)
    for i, t in enumerate(ts):
        ab_t = schedule.alphas_bar[t]
        ab_prev = schedule.alphas_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps_hat = np.asarray(denoise_fn(x, int(t)), dtype=np.float64)
        x0_pred = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        if sampler.clip_x0 is not None:
            # 1/sqrt(ab_t) amplifies prediction error enormously at large t;
            # clamping the x0 estimate to the data range keeps the
            # trajectory bounded.
            x0_pred = np.clip(x0_pred, -sampler.clip_x0, sampler.clip_x0)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(
            max(1.0 - ab_t / ab_prev, 0.0))
        dir_coeff = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
        x = np.sqrt(ab_prev) * x0_pred + dir_coeff * eps_hat
        if sigma > 0 and i + 1 < len(ts):
            x = x + sigma * rng.normal(size=x.shape)
    return AnchorSet(x, input_anchors.part_spans, input_anchors.part_ids.copy())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0
    schedule_kind: str = "linear"
    timesteps: int = 1000
    # (anchor count, dense count, steps) per curriculum phase
    phases: list = field(default_factory=lambda: [(256, 2048, 2000)])
    checkpoint_every: int = 500
    log_every: int = 25
    use_occupancy_condition: bool = False
    resample_anchors: bool = False  # re-sample anchors each epoch instead of caching


@dataclass
class PreparedRecord:
    x0: np.ndarray
    cp: np.ndarray
    mask: np.ndarray
    cond: np.ndarray | None


def prepare_record(record: AssemblyRecord, cfg: DenoiserConfig, total: int,
                   dense_count: int, seed: int,
                   use_occupancy: bool = False) -> PreparedRecord:
    input_set, target_set, dense = build_anchor_pair(record, total, dense_count, seed)
    desc = descriptors_for_anchor_set(input_set, dense)
    cond = build_global_condition(record, cfg=cfg) if not use_occupancy else \
        build_global_condition(record, cfg=cfg, use_occupancy=True)
    bundle = build_part_condition(input_set, desc, cfg, cond)
    mask = build_part_mask(input_set.part_spans)
    return PreparedRecord(target_set.points.astype(np.float32),
                          bundle.part_condition.astype(np.float32), mask,
                          None if cond is None else cond.astype(np.float32))


def load_dataset_records(dataset_dir, split: str | None = "train") -> list:
    """Records from a dataset directory, filtered by split.json when present."""
    manifest = read_manifest(dataset_dir)
    ids = None
    split_path = os.path.join(dataset_dir, "split.json")
    if split and os.path.exists(split_path):
        with open(split_path, encoding="utf-8") as fh:
            ids = set(json.load(fh)[split])
    records = []
    for entry in manifest.records:
        if ids is not None and entry["object_id"] not in ids:
            continue
        records.append(read_record(os.path.join(dataset_dir, entry["path"])))
    if not records:
        raise RuntimeError(f"no records for split {split!r} in {dataset_dir}")
    return records


def train(records: list, model: Denoiser, cfg: TrainConfig, out_dir) -> dict:
    """Deterministic training loop with an optional token-length curriculum.

    Writes loss.csv, periodic checkpoints, and a final checkpoint with
    optimizer state for exact resumption. Returns a report dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    schedule = make_schedule(cfg.schedule_kind, cfg.timesteps)
    state = AdamState(lr=cfg.lr)
    start_step = 0
    resume_path = os.path.join(out_dir, "train_state.ckpt")
    if os.path.exists(resume_path):
        start_step = load_train_state(resume_path, model, state)

    log_path = os.path.join(out_dir, "loss.csv")
    log_fh = open(log_path, "a" if start_step else "w", newline="", encoding="utf-8")
    writer = csv.writer(log_fh)
    if start_step == 0:
        writer.writerow(["step", "phase", "loss", "lr", "wallclock"])

    phase_bounds = np.cumsum([p[2] for p in cfg.phases])
    cache: dict[tuple, list] = {}
    t0 = time.time()
    losses = []
    step = start_step
    total_steps = int(phase_bounds[-1])
    while step < total_steps:
        phase = int(np.searchsorted(phase_bounds, step, side="right"))
        total, dense_count, _ = cfg.phases[phase]
        key = (total, dense_count)
        if key not in cache:
            cache[key] = [prepare_record(r, model.cfg, total, dense_count,
                                         cfg.seed, cfg.use_occupancy_condition)
                          for r in records]
        prepared = cache[key]
        rng = _philox(cfg.seed, step + 1)
        idx = rng.integers(len(prepared), size=cfg.batch_size)
        chosen = [prepared[i] for i in idx]
        x0 = np.stack([c.x0 for c in chosen])
        cp = np.stack([c.cp for c in chosen])
        masks = np.stack([c.mask for c in chosen])
        cond = None
        drop = None
        if all(c.cond is not None for c in chosen):
            cond = np.stack([c.cond for c in chosen])
            drop = rng.random(cfg.batch_size) < model.cfg.cond_drop_prob
        t = rng.integers(schedule.timesteps, size=cfg.batch_size)
        eps = rng.normal(size=x0.shape)
        batch = TrainBatch(x0, cp, masks, cond, t, eps, drop)
        loss = training_loss(model, batch, schedule)
        grads = backward(loss)
        named = {name: grads[p] for name, p in model.params.items() if p in grads}
        adam_step(model.params, named, state)
        step += 1
        losses.append(float(loss.data))
        if step % cfg.log_every == 0 or step == total_steps:
            writer.writerow([step, phase, f"{np.mean(losses[-cfg.log_every:]):.6g}",
                             cfg.lr, f"{time.time() - t0:.2f}"])
            log_fh.flush()
        if step % cfg.checkpoint_every == 0 or step == total_steps:
            save_train_state(resume_path, model, state, step)
            nm.save_checkpoint(model.params, os.path.join(out_dir, "model.ckpt"))
    log_fh.close()
    write_json_atomic({"layers": model.cfg.layers, "width": model.cfg.width,
                       "heads": model.cfg.heads, "c_d": model.cfg.c_d,
                       "c_e": model.cfg.c_e, "m_max": model.cfg.m_max,
                       "cond_drop_prob": model.cfg.cond_drop_prob,
                       "global_tokens": model.cfg.global_tokens,
                       "global_width": model.cfg.global_width,
                       "part_cross_attention": model.cfg.part_cross_attention},
                      os.path.join(out_dir, "model_config.json"))
    return {"steps": step, "final_loss": losses[-1] if losses else None,
            "mean_last_50": float(np.mean(losses[-50:])) if losses else None,
            "wallclock": time.time() - t0}


TRAIN_STATE_MAGIC = b"ASTR1"


def _write_typed_blob(blob: dict, path) -> None:
    """Deterministic binary bundle preserving each array's dtype."""
    import struct
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(TRAIN_STATE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        for name in sorted(blob):
            arr = np.ascontiguousarray(blob[name])
            encoded = name.encode("utf-8")
            dt = arr.dtype.str.encode("ascii")  # e.g. b"<f8"
            fh.write(struct.pack("<II", len(encoded), len(dt)))
            fh.write(encoded)
            fh.write(dt)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def _read_typed_blob(path) -> dict:
    import struct
    out = {}
    with open(path, "rb") as fh:
        if fh.read(5) != TRAIN_STATE_MAGIC:
            raise ValueError("bad train-state magic")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            name_len, dt_len = struct.unpack("<II", fh.read(8))
            name = fh.read(name_len).decode("utf-8")
            dt = np.dtype(fh.read(dt_len).decode("ascii"))
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(fh.read(n * dt.itemsize), dtype=dt).reshape(dims)
    return out


def save_train_state(path, model: Denoiser, state: AdamState, step: int) -> None:
    """Full-precision resume state (float64 Adam moments preserved)."""
    blob = {name: p.data for name, p in model.params.items()}
    blob.update({f"adam.m.{k}": v for k, v in state.m.items()})
    blob.update({f"adam.v.{k}": v for k, v in state.v.items()})
    blob["adam.step"] = np.array([state.step], dtype=np.int64)
    blob["train.step"] = np.array([step], dtype=np.int64)
    _write_typed_blob(blob, path)


def load_train_state(path, model: Denoiser, state: AdamState) -> int:
    arrays = _read_typed_blob(path)
    model.load_state({k: v for k, v in arrays.items()
                      if not k.startswith(("adam.", "train."))})
    state.m = {k[len("adam.m."):]: v.astype(np.float64)
               for k, v in arrays.items() if k.startswith("adam.m.")}
    state.v = {k[len("adam.v."):]: v.astype(np.float64)
               for k, v in arrays.items() if k.startswith("adam.v.")}
    state.step = int(arrays["adam.step"][0])
    return int(arrays["train.step"][0])


def load_model(model_dir) -> Denoiser:
    with open(os.path.join(model_dir, "model_config.json"), encoding="utf-8") as fh:
        raw = json.load(fh)
    cfg = DenoiserConfig(**raw)
    model = Denoiser(cfg, seed=0)
    model.load_state(nm.load_checkpoint(os.path.join(model_dir, "model.ckpt")))
    return model


# ---------------------------------------------------------------------------
# End-to-end assembly


@dataclass
class AssemblyResult:
    assembled_parts: list  # meshes in the normalized ground-truth frame
    gt_parts: list  # ground-truth meshes in the same frame
    fits: list  # per-part FitResult
    generated: AnchorSet
    input_anchors: AnchorSet
    target_anchors: AnchorSet


def assemble_end_to_end(record: AssemblyRecord, model: Denoiser | None,
                        sampler: SamplerConfig, schedule: NoiseSchedule,
                        total: int = 256, dense_count: int = 2048,
                        seed: int = 0, use_occupancy: bool = False,
                        inject_target: bool = False) -> AssemblyResult:
    """build anchors -> sample -> fit poses -> transform part meshes.

    Everything is expressed in the object-normalized ground-truth frame.
    With inject_target the sampler is bypassed and the target anchors
    are used directly (oracle path).
    """
    input_set, target_set, dense = build_anchor_pair(record, total, dense_count, seed)
    desc = descriptors_for_anchor_set(input_set, dense)
    cond = build_global_condition(record, cfg=model.cfg if model else None,
                                  use_occupancy=use_occupancy) if use_occupancy else None
    bundle = build_part_condition(input_set, desc,
                                  model.cfg if model else DenoiserConfig(), cond)
    mask = build_part_mask(input_set.part_spans)
    if inject_target:
        generated = AnchorSet(target_set.points.copy(), target_set.part_spans,
                              target_set.part_ids.copy())
    else:
        generated = sample(model, input_set, bundle, mask, sampler, schedule)
    fits = fit_all_parts(input_set, generated)

    scale, offset = normalize_object(record.parts)

    def normalize_mesh(mesh):
        out = mesh.copy()
        out.vertices = (out.vertices + offset) * scale
        return out

    initial_norm = [normalize_mesh(p.transformed(t))
                    for p, t in zip(record.parts, record.initial_poses)]
    assembled = assemble(initial_norm, fits)
    gt_parts = [normalize_mesh(p) for p in record.parts]
    return AssemblyResult(assembled, gt_parts, fits, generated, input_set, target_set)
