"""Command-line entry point: one executable, one subcommand per stage.

Subcommands: curate, toygen, train, sample, assemble, eval, gradcheck,
plot. Every run echoes its effective configuration to the output
directory and appends to a log file there. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diffusion, metrics, numerics, plotting
from .anchors import load_anchors
from .curation import CurationConfig, build_dataset, dataset_stats, write_json_atomic
from .model import Denoiser, dit_s, dit_tiny
from .numerics import Tensor, finite_difference_check
from .toygen import ToySpec, generate_toy_dataset_multi

log = logging.getLogger("assembler")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def worker_count() -> int:
    cap = os.environ.get("ASSEMBLER_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else n


def apply_config_file(args: argparse.Namespace, parser_keys: set) -> None:
    """Merge --config JSON and --override k=v pairs; unknown keys rejected."""
    updates = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            updates.update(json.load(fh))
    for item in getattr(args, "override", None) or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        updates[key] = value
    for key, value in updates.items():
        if key not in parser_keys:
            raise UsageError(f"unknown config key {key!r}")
        current = getattr(args, key)
        if isinstance(current, bool):
            value = str(value).lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(args, key, value)


def init_run(args) -> None:
    out = getattr(args, "out", None)
    if not out:
        return
    os.makedirs(out, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items()
           if k not in ("func", "config", "override") and not callable(v)}
    write_json_atomic(cfg, os.path.join(out, "effective-config.json"))
    handler = logging.FileHandler(os.path.join(out, "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)


def _sampler_from_args(args) -> diffusion.SamplerConfig:
    return diffusion.SamplerConfig(kind=args.kind, steps=args.steps,
                                   cfg_scale=args.cfg_scale, seed=args.seed)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_curate(args) -> int:
    cfg = CurationConfig(seed=args.seed, trans_range=args.trans_range,
                         full_rotation=not args.no_rotation,
                         min_component_faces=args.min_component_faces)
    manifest = build_dataset(args.in_dir, args.out, cfg)
    stats = dataset_stats(manifest)
    write_json_atomic(stats, os.path.join(args.out, "stats.json"))
    log.info("curated %d records", stats["total_records"])
    print(json.dumps(stats["part_count"]))
    return 0


def cmd_toygen(args) -> int:
    families = args.family.split(",")
    specs = [ToySpec(family=f.strip(), seed=args.seed, size_jitter=args.jitter,
                     trans_range=args.trans_range,
                     full_rotation=not args.no_rotation) for f in families]
    manifest = generate_toy_dataset_multi(specs, args.n, args.out)
    log.info("generated %d toy records in %s", len(manifest.records), args.out)
    print(f"generated {len(manifest.records)} records")
    return 0


def _model_config(args):
    preset = dit_s if args.preset == "s" else dit_tiny
    return preset(part_cross_attention=args.cross_attention_parts,
                  cond_drop_prob=args.cond_drop_prob)


def cmd_train(args) -> int:
    records = diffusion.load_dataset_records(args.data, split=args.split)
    model = Denoiser(_model_config(args), seed=args.seed)
    phases = []
    for chunk in args.phases.split(","):
        tokens, steps = chunk.split(":")
        phases.append((int(tokens), args.dense, int(steps)))
    cfg = diffusion.TrainConfig(batch_size=args.batch, lr=args.lr, seed=args.seed,
                                timesteps=args.timesteps, phases=phases,
                                checkpoint_every=args.checkpoint_every,
                                use_occupancy_condition=args.occupancy)
    report = diffusion.train(records, model, cfg, args.out)
    log.info("training report: %s", report)
    print(json.dumps(report))
    return 0


def _write_assembly(res: diffusion.AssemblyResult, out_dir: str) -> None:
    from .curation import _round9
    from .geometry import save_obj

    os.makedirs(out_dir, exist_ok=True)
    for k, mesh in enumerate(res.assembled_parts):
        save_obj(mesh, os.path.join(out_dir, f"part_{k}.obj"))
    from .anchors import save_anchors
    save_anchors(res.generated, os.path.join(out_dir, "generated.anc"))
    save_anchors(res.input_anchors, os.path.join(out_dir, "input.anc"))
    poses = [{"rotation": [_round9(v) for v in f.transform.rotation.reshape(-1)],
              "translation": [_round9(v) for v in f.transform.translation],
              "rmse": _round9(f.rmse), "underdetermined": f.underdetermined}
             for f in res.fits]
    write_json_atomic(poses, os.path.join(out_dir, "poses.json"))


def cmd_sample(args) -> int:
    model = diffusion.load_model(args.model)
    schedule = diffusion.make_schedule(args.schedule, args.timesteps)
    records = diffusion.load_dataset_records(args.data, split=args.split)
    for i, record in enumerate(records):
        sampler = diffusion.SamplerConfig(kind=args.kind, steps=args.steps,
                                          cfg_scale=args.cfg_scale,
                                          seed=args.seed + i)
        res = diffusion.assemble_end_to_end(
            record, model, sampler, schedule, total=args.tokens,
            dense_count=args.dense, seed=args.seed,
            use_occupancy=args.occupancy)
        _write_assembly(res, os.path.join(args.out, record.object_id))
        log.info("sampled %s", record.object_id)
    print(f"sampled {len(records)} objects")
    return 0


def cmd_assemble(args) -> int:
    from .curation import read_record
    record = read_record(args.record)
    model = diffusion.load_model(args.model) if args.model else None
    schedule = diffusion.make_schedule(args.schedule, args.timesteps)
    sampler = _sampler_from_args(args)
    res = diffusion.assemble_end_to_end(
        record, model, sampler, schedule, total=args.tokens,
        dense_count=args.dense, seed=args.seed,
        inject_target=args.inject_target)
    _write_assembly(res, args.out)
    rmse = [f.rmse for f in res.fits]
    print(f"assembled {len(res.fits)} parts, fit rmse mean {np.mean(rmse):.4g}")
    return 0


def cmd_eval(args) -> int:
    report = metrics.evaluate_dataset(args.pred, args.gt, out_dir=args.out,
                                      split=args.split)
    line = (f"SCD {report.scd:.4f}  PA {report.pa:.2f}  "
            f"CA {report.ca:.2f}  SR {report.sr:.2f}")
    log.info(line)
    print(line)
    return 0


def gradcheck_suite(rng: np.random.Generator) -> dict:
    """Finite-difference checks for each primitive and a tiny model loss."""
    import assembler.numerics as nm
    from .model import build_part_mask

    results = {}
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 5))
    g = rng.normal(size=6)
    b = rng.normal(size=6)
    results["matmul"] = finite_difference_check(
        lambda ts: nm.tsum(nm.matmul(ts[0], ts[1])), [x, w])
    results["add_mul"] = finite_difference_check(
        lambda ts: nm.tsum(nm.mul(nm.add(ts[0], ts[1]), ts[0])), [x, x + 1.0])
    results["gelu"] = finite_difference_check(
        lambda ts: nm.tsum(nm.gelu(ts[0])), [x])
    results["layer_norm"] = finite_difference_check(
        lambda ts: nm.tsum(nm.layer_norm(ts[0], ts[1], ts[2])), [x, g, b])
    probe = Tensor(rng.normal(size=x.shape), dtype=np.float64)
    results["softmax"] = finite_difference_check(
        lambda ts: nm.tsum(nm.mul(nm.softmax(ts[0]), probe)), [x])
    results["concat_slice"] = finite_difference_check(
        lambda ts: nm.tsum(nm.slice_axis(nm.concat([ts[0], ts[1]], axis=-1), 2, 5,
                                         axis=-1)), [x, x * 2])
    results["embedding"] = finite_difference_check(
        lambda ts: nm.tsum(nm.embedding(ts[0], np.array([0, 2, 2]))),
        [rng.normal(size=(3, 4))])
    mask = build_part_mask([(0, 2), (2, 2)])
    qkv = [rng.normal(size=(4, 8)) for _ in range(3)]
    results["masked_attention"] = finite_difference_check(
        lambda ts: nm.tsum(nm.masked_attention(ts[0], ts[1], ts[2], mask, 2)), qkv)
    results["dit_tiny_loss"] = dit_loss_gradcheck(rng)
    return results


def dit_loss_gradcheck(rng: np.random.Generator, entries: int = 3,
                       max_params: int = 24, h: float = 1e-5) -> float:
    """Finite-difference check of the full DiT-tiny training loss.

    The model is cast to float64 and a few entries of a random subset of
    parameters are probed by central differences against the recorded
    gradients (probing all ~1M entries is not tractable). The first and
    last layers plus the input/time/head projections are always probed.
    """
    import assembler.numerics as nm
    from .model import Denoiser, build_part_mask, dit_tiny

    cfg = dit_tiny()
    model = Denoiser(cfg, seed=int(rng.integers(1 << 31)))
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    # zero-initialized head blocks gradient flow into the stack; randomize
    model.params["head.w"].data = rng.normal(size=(cfg.width, 3)) * 0.02

    mask = build_part_mask([(0, 3), (3, 3)])
    x = rng.normal(size=(6, 3))
    cp = rng.normal(size=(6, cfg.cond_dim))
    cond = rng.normal(size=(cfg.global_tokens, cfg.global_width))
    eps = rng.normal(size=(6, 3))

    def loss_value() -> nm.Tensor:
        pred = model.forward(x, 500, cp, mask, cond)
        diff = nm.sub(pred, Tensor(eps, dtype=np.float64))
        return nm.tmean(nm.mul(diff, diff))

    grads = nm.backward(loss_value())
    names = sorted(model.params)
    always = ["in_proj.w", "in_proj.b", "time.w1", "time.w2", "head.w",
              "head.b", "head.ln.g", "null_tokens", "cond_proj.w",
              "l0.part.wq", "l0.global.wv", "l0.cross.wo", "l0.part.ff.w1",
              "l5.cross.ff.w2", "l5.global.ln.g", "l5.part.ln.b"]
    rest = [n for n in names if n not in always]
    picked = sorted(set(always) | set(
        rng.choice(rest, size=min(max_params, len(rest)), replace=False)))
    worst = 0.0
    for name in picked:
        p = model.params[name]
        analytic = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        probe = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_value().data)
            flat[i] = orig - h
            dn = float(loss_value().data)
            flat[i] = orig
            a, b = float(analytic.reshape(-1)[i]), (up - dn) / (2 * h)
            worst = max(worst, abs(a - b) / max(abs(a), abs(b), 1e-8))
    return worst


def cmd_gradcheck(args) -> int:
    numerics.set_finite_checks(True)
    results = gradcheck_suite(np.random.default_rng(args.seed))
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name:>20s}  max relative error {err:.3e}")
    print(f"{'OVERALL':>20s}  max relative error {worst:.3e}")
    return 0 if worst < 1e-4 else 2


def cmd_plot(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.loss:
        out = os.path.join(args.out, "loss.svg")
        plotting.loss_curve_svg(args.loss, out)
        wrote.append(out)
    for path in args.anchors or []:
        stem = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.out, f"{stem}.svg")
        plotting.anchor_views_svg(load_anchors(path), out)
        wrote.append(out)
    if not wrote:
        raise UsageError("plot needs --loss and/or --anchors")
    print("\n".join(wrote))
    return 0


# ---------------------------------------------------------------------------
# Parser


def _common(sub, out_required=True):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=out_required)
    sub.add_argument("--config", help="JSON file of option overrides")
    sub.add_argument("--override", action="append", metavar="K=V")


def build_parser() -> Parser:
    parser = Parser(prog="assembler", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("curate", help="build a dataset from OBJ meshes")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--trans-range", type=float, default=0.4)
    p.add_argument("--no-rotation", action="store_true")
    p.add_argument("--min-component-faces", type=int, default=4)
    _common(p)
    p.set_defaults(func=cmd_curate)

    p = subs.add_parser("toygen", help="generate procedural toy assemblies")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--family", default="table",
                   help="comma list of table,chair,lamp,stack")
    p.add_argument("--jitter", type=float, default=0.15)
    p.add_argument("--trans-range", type=float, default=0.4)
    p.add_argument("--no-rotation", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_toygen)

    p = subs.add_parser("train", help="train the anchor diffusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--preset", choices=["tiny", "s"], default="tiny")
    p.add_argument("--phases", default="256:2000",
                   help="token curriculum, e.g. 256:2000,1024:500")
    p.add_argument("--dense", type=int, default=2048)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--cond-drop-prob", type=float, default=0.1)
    p.add_argument("--cross-attention-parts", action="store_true",
                   help="ablation: inject part features by cross-attention")
    p.add_argument("--occupancy", action="store_true",
                   help="condition on built-in occupancy views")
    _common(p)
    p.set_defaults(func=cmd_train)

    for name in ("sample", "assemble"):
        p = subs.add_parser(name)
        p.add_argument("--model", required=(name == "sample"))
        if name == "sample":
            p.add_argument("--data", required=True)
            p.add_argument("--split", default="test")
        else:
            p.add_argument("--record", required=True)
            p.add_argument("--inject-target", action="store_true",
                           help="bypass sampling with target anchors (oracle)")
        p.add_argument("--tokens", type=int, default=256)
        p.add_argument("--dense", type=int, default=2048)
        p.add_argument("--kind", choices=["ddim", "ddpm"], default="ddim")
        p.add_argument("--steps", type=int, default=50)
        p.add_argument("--cfg-scale", type=float, default=1.0)
        p.add_argument("--schedule", default="linear")
        p.add_argument("--timesteps", type=int, default=1000)
        p.add_argument("--occupancy", action="store_true")
        _common(p)
        p.set_defaults(func=cmd_sample if name == "sample" else cmd_assemble)

    p = subs.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split", default=None)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option overrides")
    p.add_argument("--override", action="append", metavar="K=V")
    p.set_defaults(func=cmd_gradcheck, out=None)

    p = subs.add_parser("plot", help="emit SVG plots")
    p.add_argument("--loss", help="loss CSV file")
    p.add_argument("--anchors", action="append", help="anchor-set binary file")
    _common(p)
    p.set_defaults(func=cmd_plot)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        keys = {k for k in vars(args) if k not in ("func", "command")}
        apply_config_file(args, keys)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        init_run(args)
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure -> exit 2
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
