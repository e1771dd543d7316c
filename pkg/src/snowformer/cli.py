"""Command-line entry points: synth | train | infer | eval | gradcheck | summary.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import InvalidConfig, IoError, SnowformerError
from .gradcheck import grad_check
from .imageio import png_read, png_write
from .metrics import evaluate_dataset
from .model import Model, ModelConfig, build_model, gradcheck_config, tiny_config
from .synth import dataset_write
from .tiling import plan_tiles, tiled_inference
from .training import (
    AdamState,
    TrainConfig,
    checkpoint_load,
    train_loop,
)
from . import checkpoint as ckpt
from .synth import dataset_read

ABLATION_KEYS = ("safa", "decoder", "queries", "arh")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_bytes_tensor(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _json_from_tensor(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8"))


def _apply_ablations(cfg: ModelConfig, pairs) -> ModelConfig:
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--ablation expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        if key not in ABLATION_KEYS:
            raise UsageError(f"unknown ablation {key!r}; choose from {ABLATION_KEYS}")
        cfg = replace(cfg, **{key: value})
    cfg.validate()
    return cfg


def _run_config(args) -> RunConfig:
    run = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    return run


def _model_config(args, run: RunConfig) -> ModelConfig:
    cfg = run.model
    if getattr(args, "tiny", False):
        cfg = replace(cfg, scale=0.25)
    if getattr(args, "scale", None) is not None:
        cfg = replace(cfg, scale=args.scale)
    cfg = _apply_ablations(cfg, getattr(args, "ablation", None))
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    run = _run_config(args)
    synth = run.synth
    if args.size is not None:
        synth = replace(synth, image_size=(args.size, args.size))
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    synth.validate()
    os.makedirs(args.out, exist_ok=True)
    manifest = dataset_write(synth, args.count, args.out)
    print(f"wrote {2 * args.count} PNGs + manifest to {args.out} "
          f"(config {manifest['config_sha256'][:12]})")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    mcfg = _model_config(args, run)
    model = build_model(mcfg, seed=run.seed)

    dataset = dataset_read(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    log_path = os.path.join(args.out, "log.jsonl")

    loss = run.loss
    if args.lambda2 is not None:
        loss = replace(loss, lambda2=args.lambda2)
    if args.perceptual is not None:
        loss = replace(loss, perceptual=args.perceptual)
    sched = run.sched
    if args.cycle_steps is not None:
        sched = replace(sched, cycle_steps=args.cycle_steps)

    tcfg = TrainConfig(
        steps=args.steps, seed=run.seed, crop=args.crop,
        augment=not args.no_augment, loss=loss, sched=sched,
        log_path=log_path, checkpoint_path=ckpt_path,
        checkpoint_every=args.checkpoint_every,
        checkpoint_extra={
            "meta.model_config": _json_bytes_tensor(mcfg.to_dict()),
            "meta.config_sha256": _json_bytes_tensor(run.sha256()),
        },
    )
    state = None
    start = 0
    if args.resume:
        state = checkpoint_load(model, args.resume)
        start = state.t
        print(f"resumed from {args.resume} at step {start}")
    records, _ = train_loop(model, dataset, tcfg, state=state, start_step=start)
    if records:
        last = records[-1]
        print(f"finished step {last['step']}: loss {last['loss']:.4f}, "
              f"psnr {last['psnr']:.2f} dB -> {ckpt_path}")
    else:
        print(f"nothing to do (start step {start} >= steps {args.steps})")
    return 0


def _load_model_from_checkpoint(path) -> Model:
    tensors = ckpt.load_tensors(path)
    if "meta.model_config" not in tensors:
        raise InvalidConfig(f"{path} has no embedded model config")
    mcfg = ModelConfig.from_dict(_json_from_tensor(tensors["meta.model_config"]))
    model = build_model(mcfg, seed=0)
    from .checkpoint import assign_params
    assign_params(model.params, tensors)
    return model


def cmd_infer(args) -> int:
    run = _run_config(args)
    model = _load_model_from_checkpoint(args.checkpoint)
    tile = args.tile if args.tile is not None else run.tiling.tile
    overlap = args.overlap if args.overlap is not None else run.tiling.overlap

    if os.path.isdir(args.input):
        names = sorted(n for n in os.listdir(args.input) if n.endswith(".png"))
        if not names:
            raise IoError(f"no PNGs in {args.input}")
        os.makedirs(args.out, exist_ok=True)
        pairs = [(os.path.join(args.input, n), os.path.join(args.out, n)) for n in names]
    else:
        pairs = [(args.input, args.out)]

    meta = {"config_sha256": run.sha256()}
    plan = None
    for src, dst in pairs:
        img = png_read(src)
        _, h, w = img.shape
        if plan is None or (plan.h, plan.w) != (h, w):
            plan = plan_tiles(h, w, tile, overlap)
        restored = tiled_inference(model, img, plan)
        png_write(restored, dst, text=meta)
        print(f"{src} -> {dst}")
    return 0


def cmd_eval(args) -> int:
    run = _run_config(args)
    model = _load_model_from_checkpoint(args.checkpoint)
    report = evaluate_dataset(model, args.data,
                              tile=args.tile if args.tile is not None else run.tiling.tile,
                              overlap=args.overlap if args.overlap is not None
                              else run.tiling.overlap)
    out = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out + "\n")
    print(f"mean PSNR {report['mean_psnr_db']:.2f} dB, "
          f"mean SSIM {report['mean_ssim']:.4f} over {len(report['images'])} images")
    return 0


def _gradcheck_op_cases(rng):
    """Small differentiable probes, one per core op family."""
    def t(shape):
        return T.Tensor(rng.normal(size=shape), dtype="f64", requires_grad=True)

    conv_x, conv_w = t((1, 2, 6, 6)), t((3, 2, 3, 3))
    mm_a, mm_b = t((3, 4)), t((4, 5))
    ln_x, ln_g, ln_b = t((2, 6)), t((6,)), t((6,))
    sm_x = t((3, 5))
    act_x = t((2, 7))
    pool_x = t((1, 2, 8, 8))
    att_q = t((2, 4, 6))
    ew_a, ew_b = t((3, 4)), t((3, 4))
    red_x = t((2, 3, 4))
    shp_a, shp_b = t((2, 3, 4)), t((2, 4, 3))
    up_x = t((1, 2, 3, 3))
    table = t((9, 2))
    gather_idx = rng.integers(0, 9, size=(4, 4))
    one = T.Tensor(np.ones((3, 4)), dtype="f64")

    def elementwise(_):
        prod = T.mul(T.exp(T.scale(ew_a, 0.3)), T.add(ew_a, T.sub(ew_b, ew_a)))
        pos = T.add(T.square(ew_b), one)  # > 0: safe for log and sqrt
        return T.add(T.sum_(prod),
                     T.add(T.sum_(T.log(pos)), T.sum_(T.sqrt(pos))))

    def reductions(_):
        return T.add(T.sum_(T.square(T.mean(red_x, axis=1))),
                     T.sum_(T.square(T.amax(red_x, axis=2))))

    def shape_ops(_):
        flat = T.concat([T.reshape(shp_a, (2, 12)),
                         T.reshape(T.permute(shp_b, (0, 2, 1)), (2, 12))], axis=0)
        return T.sum_(T.square(T.slice_(flat, 1, 2, 10)))

    return [
        ("matmul", lambda _: T.sum_(T.matmul(mm_a, mm_b)), [mm_a, mm_b]),
        ("conv2d", lambda _: T.sum_(T.square(T.conv2d(conv_x, conv_w, pad=1))),
         [conv_x, conv_w]),
        ("layernorm", lambda _: T.sum_(T.square(T.layernorm(ln_x, ln_g, ln_b))),
         [ln_x, ln_g, ln_b]),
        ("softmax", lambda _: T.sum_(T.square(T.softmax(sm_x, axis=-1))), [sm_x]),
        ("gelu", lambda _: T.sum_(T.square(T.gelu(act_x))), [act_x]),
        ("sigmoid", lambda _: T.sum_(T.square(T.sigmoid(act_x))), [act_x]),
        ("avgpool2d", lambda _: T.sum_(T.square(T.avgpool2d(pool_x, 2, 2))), [pool_x]),
        ("maxpool2d", lambda _: T.sum_(T.square(T.maxpool2d(pool_x, 2, 2))), [pool_x]),
        ("windowing", lambda _: T.sum_(T.square(
            T.window_merge(T.window_partition(pool_x, 4), 4, 1, 2, 8, 8))), [pool_x]),
        ("attention", lambda _: T.sum_(T.square(
            T.matmul(T.softmax(T.matmul(att_q, T.permute(att_q, (0, 2, 1))), axis=-1),
                     att_q))), [att_q]),
        ("elementwise", elementwise, [ew_a, ew_b]),
        ("reductions", reductions, [red_x]),
        ("shape_ops", shape_ops, [shp_a, shp_b]),
        ("upsample", lambda _: T.sum_(T.square(T.upsample_nearest2x(up_x))), [up_x]),
        ("gather_rows", lambda _: T.sum_(T.square(T.gather_rows(table, gather_idx))),
         [table]),
    ]


def cmd_gradcheck(args) -> int:
    failures = 0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        for name, f, params in _gradcheck_op_cases(rng):
            report = grad_check(f, params, rel_tol=1e-4, rng=rng,
                                names=[f"{name}.{i}" for i in range(len(params))])
            status = "ok" if report.passed else "FAIL"
            print(f"seed {seed} {name:<12} max rel err {report.max_rel_err:.3e} {status}")
            failures += 0 if report.passed else 1

    model = build_model(gradcheck_config(), seed=0)
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(1, 3, 64, 64)) * 0.2 + 0.5, dtype="f64")
    names = sorted(model.params)
    chosen = [names[i] for i in rng.choice(len(names), size=4, replace=False)]
    report = grad_check(lambda _: T.mean(T.square(model.forward_full(x))),
                        [model.params[n] for n in chosen], rel_tol=1e-3,
                        max_entries_per_param=2, names=chosen, rng=rng)
    status = "ok" if report.passed else "FAIL"
    print(f"end-to-end  max rel err {report.max_rel_err:.3e} {status}")
    failures += 0 if report.passed else 1
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 2
    print("all gradient checks passed")
    return 0


def cmd_summary(args) -> int:
    run = _run_config(args)
    size = args.size
    rows = [("default", _apply_ablations(run.model, args.ablation)),
            ("tiny", tiny_config())]
    if args.all_ablations:
        for key, values in (("safa", ("off", "avgpool", "conv", "cat")),
                            ("decoder", ("li_only", "lgci_only", "resblock")),
                            ("queries", ("learnable", "same_layer")),
                            ("arh", ("off",))):
            for v in values:
                rows.append((f"{key}={v}", replace(run.model, **{key: v})))
    print(f"{'config':<18} {'params':>10} {'MACs@' + str(size):>12}   reference")
    for name, cfg in rows:
        model = build_model(cfg, seed=0)
        macs = model.flops_estimate(size, size)
        ref = "8.38M / 19.44G (published)" if name == "default" and size == 256 else ""
        print(f"{name:<18} {model.param_count() / 1e6:>9.2f}M "
              f"{macs / 1e9:>11.2f}G   {ref}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="snowformer", description="single-image desnowing toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic snow dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=None)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--crop", type=int, default=None)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--tiny", action="store_true", help="quarter-scale model")
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--ablation", action="append", metavar="KEY=VALUE")
    sp.add_argument("--lambda2", type=float, default=None)
    sp.add_argument("--perceptual", choices=("off", "surrogate", "external"))
    sp.add_argument("--cycle-steps", type=int, default=None)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="restore image(s) with a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="PNG file or directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tile", type=int, default=None)
    sp.add_argument("--overlap", type=int, default=None)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="write the JSON report here")
    sp.add_argument("--tile", type=int, default=None)
    sp.add_argument("--overlap", type=int, default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("summary", help="parameter / MAC accounting table")
    common(sp)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--ablation", action="append", metavar="KEY=VALUE")
    sp.add_argument("--all-ablations", action="store_true")
    sp.set_defaults(fn=cmd_summary)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except InvalidConfig as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except SnowformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
