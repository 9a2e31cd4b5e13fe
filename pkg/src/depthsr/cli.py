"""Command-line entry point: ``depthsr {generate,train,upsample,eval,replay}``.

Every run writes a JSON config echo next to its output. ``depthsr replay
ECHO`` re-runs the recorded command (optionally into a different output).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, bench, raycast, tgv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cnn import ConvNet, TrainConfig, net_forward, train_joint, train_pretrain
from .depthio import read_depth, write_pfm
from .tape import diffusion_tensor

log = logging.getLogger("depthsr")

THREADS_ENV = "DEPTHSR_THREADS"
ECHO_VERSION = 1

PAPER_DEFAULTS = {
    "lr": 0.001,
    "momentum": 0.9,
    "iters": 10,
    "alpha1": 17.0,
    "alpha0": 1.2,
    "beta": 9.0,
    "gamma": 0.85,
    "w_lambda": 0.01,
}


class CliError(Exception):
    def __init__(self, message, status=2):
        super().__init__(message)
        self.status = status


def _default_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(n, 1)


def _dtype(args):
    return np.float32 if args.precision == "32" else np.float64


def _solver_params(args, base=None):
    base = base or tgv.SolverParams()
    over = {}
    for name in ("alpha0", "alpha1", "beta", "gamma", "w_lambda", "theta", "iters"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    if not over:
        return base
    d = base.to_dict()
    d.update(over)
    # changing a weight re-derives the step sizes from the new weights
    if "alpha0" in over or "alpha1" in over:
        for k in ("sigma_p", "sigma_q", "tau_u", "tau_v"):
            d[k] = None
    return tgv.SolverParams.from_dict(d)


def _print_defaults(cfg, params, out=None):
    print(
        "defaults: lr={} momentum={} iters={} alpha1={} alpha0={} beta={} gamma={} w_lambda={}".format(
            *(PAPER_DEFAULTS[k] for k in PAPER_DEFAULTS)
        ),
        file=out,
    )
    print(
        f"effective: lr={cfg.learning_rate} momentum={cfg.momentum} iters={params.iters} "
        f"alpha1={params.alpha1} alpha0={params.alpha0} beta={params.beta} "
        f"gamma={params.gamma} w_lambda={params.w_lambda}",
        file=out,
    )


def _echo_path(args):
    if args.echo:
        return args.echo
    if args.command == "generate":
        return os.path.join(args.out, "config.json")
    return args.out + ".config.json"


def _write_echo(args, argv, extra=None):
    rec = {
        "version": ECHO_VERSION,
        "package_version": __version__,
        "argv": list(argv),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
    }
    if extra:
        rec.update(extra)
    path = _echo_path(args)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(rec, f, indent=2, sort_keys=True)
    return path


# generate


def cmd_generate(args):
    if args.replay:
        manifest = raycast.replay_manifest(args.replay, args.out)
        print(f"replayed {manifest['count']} samples into {args.out}")
        return 0
    if args.count < 0:
        raise CliError("--count must be >= 0")
    if args.size % args.rho:
        raise CliError(f"--size {args.size} is not divisible by --rho {args.rho}")
    scene_spec = raycast.SceneSpec(size=args.size)
    deg_spec = raycast.DegradationSpec(
        rho=args.rho,
        noise_sigma=args.noise_sigma,
        noise_reading=args.noise_reading,
        rng_seed=args.seed,
    )
    manifest = raycast.generate_dataset(args.count, scene_spec, deg_spec, args.out, args.seed)
    print(f"wrote {manifest['count']} samples to {args.out}")
    return 0


# train


def _load_data(path):
    try:
        return raycast.load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(f"missing dataset: {exc}")


def cmd_train(args):
    dtype = _dtype(args)
    joint = args.stage == "joint"
    if joint and not (args.pretrained and os.path.exists(args.pretrained)):
        raise CliError("pretrain checkpoint required (pass --pretrained PATH from a pretrain run)")
    data = _load_data(args.data)
    size = data.inputs.shape[-1]
    patch = args.patch_size or (min(128, size) if joint else 32)
    cfg = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        epochs=args.epochs if args.epochs is not None else (5 if joint else 30),
        patch_size=patch,
        batch_size=args.batch_size or (8 if joint else 16),
        rng_seed=args.seed,
        clip_norm=args.clip_norm,
        scalar_learning_rate=args.scalar_lr,
    )
    if joint:
        net, stored, meta = load_checkpoint(args.pretrained, dtype=dtype)
        params = _solver_params(args, stored)
    else:
        net = ConvNet.create(
            args.depth,
            args.width,
            rng=args.seed,
            dtype=dtype,
            offset=float(np.mean(data.targets)),
            scale=float(np.std(data.targets)) or 1.0,
        )
        params = _solver_params(args)
        meta = {}
    _print_defaults(cfg, params)
    try:
        if joint:
            net, params, curve = train_joint(net, params, data, cfg)
        else:
            net, curve = train_pretrain(net, data, cfg)
    except FloatingPointError as exc:
        raise CliError(f"training aborted: {exc}", status=3)
    history = list(meta.get("history", [])) + [
        {"stage": args.stage, "config": asdict(cfg), "losses": curve, "samples": len(data)}
    ]
    save_checkpoint(args.out, net, params, {"history": history})
    with open(args.out + ".loss.json", "w") as f:
        json.dump({"stage": args.stage, "losses": curve}, f, indent=2)
    print(f"{args.stage}: final loss {curve[-1] if curve else float('nan'):.6g}; wrote {args.out}")
    return 0


# upsample

_METHOD_NAMES = {
    "bilinear": "bilinear",
    "bicubic": "bicubic",
    "cnn-only": "cnn_only",
    "cnn-plus-atgv": "cnn_plus_atgv",
    "atgv-net": "atgv_net",
}


def cmd_upsample(args):
    method = _METHOD_NAMES[args.method]
    try:
        low = read_depth(args.input)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {args.input}: {exc}")
    if args.rho == 1:
        s_mid = low
    else:
        s_mid = bench.upsample_low(low, args.rho)
    net = params = None
    if method in bench.LEARNED:
        if not args.checkpoint:
            raise CliError(f"--method {args.method} needs --checkpoint")
        try:
            net, params, _ = load_checkpoint(args.checkpoint, dtype=_dtype(args))
        except (OSError, CheckpointError) as exc:
            raise CliError(str(exc))
        if method == "cnn_plus_atgv" or params is None:
            params = tgv.SolverParams()
        params = _solver_params(args, params)
    if method in ("cnn_plus_atgv", "atgv_net"):
        g, h = net_forward(net, s_mid)
        energies = []
        cb = None
        if args.dump_energy:
            t = diffusion_tensor(h, params.beta, params.gamma, params.eps)
            cb = lambda n, st: energies.append(tgv.energy(st.u, st.v, t, g, params))  # noqa: E731
        try:
            out = tgv.solve(g, h, params, callback=cb)
        except tgv.SolverDiverged as exc:
            raise CliError(f"solver diverged: {exc}", status=3)
        if args.dump_energy:
            with open(args.dump_energy, "w") as f:
                for n, e in enumerate(energies):
                    f.write(f"{n}\t{e!r}\n")
    else:
        out = bench.predict(method, s_mid, low=low, net=net, params=params)
        h = None
        if net is not None:
            _, h = net_forward(net, s_mid)
    write_pfm(args.out, out)
    if args.edge_map:
        if h is None:
            raise CliError("--edge-map needs a learned method")
        mag = np.sqrt(np.sum(h * h, axis=0, keepdims=True))
        write_pfm(args.edge_map, mag)
    print(f"wrote {args.out} ({out.shape[-2]}x{out.shape[-1]})")
    return 0


# eval


def _depth_files(d):
    exts = (".pfm", ".png", ".pgm")
    return sorted(f for f in os.listdir(d) if f.lower().endswith(exts))


def cmd_eval(args):
    if args.pred:
        if not args.gt:
            raise CliError("--pred needs --gt")
        preds, gts = _depth_files(args.pred), _depth_files(args.gt)
        if preds != gts:
            missing = sorted(set(preds) ^ set(gts))
            raise CliError(f"prediction and ground-truth file lists differ: {missing[:5]}")
        results = []
        for name in preds:
            p = read_depth(os.path.join(args.pred, name))
            t = read_depth(os.path.join(args.gt, name))
            if p.shape != t.shape:
                raise CliError(f"{name}: shape {p.shape} vs {t.shape}")
            mask = bench.valid_mask(t) if args.masked else None
            results.append(
                bench.EvalResult(
                    args.method_name,
                    os.path.splitext(name)[0],
                    args.rho,
                    bench.rmse(p, t, mask),
                    bench.mae(p, t, mask),
                )
            )
            if args.error_maps:
                bench.write_error_map(p, t, args.error_maps, os.path.splitext(name)[0])
        errors = {}
    else:
        if not args.data:
            raise CliError("give either --data or --pred/--gt")
        data = _load_data(args.data)
        models = {}
        dtype = _dtype(args)
        if args.cnn:
            net, _, _ = load_checkpoint(args.cnn, dtype=dtype)
            models["cnn_only"] = (net, None)
            models["cnn_plus_atgv"] = (net, _solver_params(args))
        if args.joint:
            net, params, _ = load_checkpoint(args.joint, dtype=dtype)
            models["atgv_net"] = (net, _solver_params(args, params))
        rho = int(
            raycast.DegradationSpec(**_manifest(args.data)["degradation_spec"]).rho
        )
        results, errors = bench.evaluate_methods(args.methods, data, rho, models, masked=args.masked)
        for m, msg in errors.items():
            print(f"error: {msg}", file=sys.stderr)
        if args.error_maps:
            for m in args.methods:
                if m in errors:
                    continue
                net, params = models.get(m, (None, None))
                pred = bench.predict(m, data.inputs, low=data.lows, net=net, params=params)
                for i, name in enumerate(data.names):
                    bench.write_error_map(pred[i], data.targets[i], args.error_maps, f"{m}_{name}")
    bench.write_csv(results, args.out)
    summary = bench.summarize(results)
    if summary:
        print(bench.format_table(summary))
    status = 1 if errors else 0
    if args.check_ordering:
        need = ("atgv_net", "cnn_only", "bilinear")
        if not all(m in summary for m in need):
            print("ordering check needs atgv_net, cnn_only and bilinear results", file=sys.stderr)
            return 4
        if not bench.ordering_holds(summary, need):
            print("ordering check FAILED: atgv_net <= cnn_only <= bilinear does not hold", file=sys.stderr)
            return 4
        print("ordering check passed")
    return status


def _manifest(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as f:
        return json.load(f)


# replay


def cmd_replay(args):
    with open(args.config) as f:
        rec = json.load(f)
    argv = list(rec["argv"])
    if args.out:
        argv = _override(argv, "--out", args.out)
        suffix = "/config.json" if rec["args"]["command"] == "generate" else ".config.json"
        argv = _override(argv, "--echo", args.out + suffix)
    return main(argv)


def _override(argv, flag, value):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            argv[i + 1] = value
            return argv
        if a.startswith(flag + "="):
            argv[i] = f"{flag}={value}"
            return argv
    return argv + [flag, value]


# parser


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"BLAS threads (default ${THREADS_ENV} or 1; 1 gives bitwise-reproducible runs)",
    )
    p.add_argument(
        "--precision",
        choices=("64", "32"),
        default="64",
        help="network arithmetic; the solver always runs in 64 bit",
    )
    p.add_argument("--echo", help="where to write the config echo (default next to --out)")
    p.add_argument("-v", "--verbose", action="store_true")


def _solver_flags(p):
    g = p.add_argument_group("solver overrides")
    g.add_argument("--iters", type=int)
    g.add_argument("--alpha0", type=float)
    g.add_argument("--alpha1", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--w-lambda", dest="w_lambda", type=float)
    g.add_argument("--theta", type=float)


def build_parser():
    ap = argparse.ArgumentParser(prog="depthsr", description="Depth super-resolution pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--rho", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--noise-reading", choices=("std", "variance"), default="std")
    p.add_argument("--replay", metavar="MANIFEST", help="regenerate the dataset of a manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the network (pretrain) or the full model (joint)")
    _common(p)
    _solver_flags(p)
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--stage", choices=("pretrain", "joint"), default="pretrain")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--pretrained", help="pretrain checkpoint (joint stage)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, default=PAPER_DEFAULTS["lr"])
    p.add_argument("--momentum", type=float, default=PAPER_DEFAULTS["momentum"])
    p.add_argument("--patch-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--scalar-lr", type=float, default=0.001)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", help="super-resolve one depth map")
    _common(p)
    _solver_flags(p)
    p.add_argument("--input", required=True, help="low-resolution depth (PFM/PNG/PGM)")
    p.add_argument("--out", required=True, help="output PFM")
    p.add_argument("--method", choices=tuple(_METHOD_NAMES), default="atgv-net")
    p.add_argument("--checkpoint")
    p.add_argument("--rho", type=int, default=2, help="upsampling factor (1: input is mid-resolution)")
    p.add_argument("--edge-map", help="write the predicted edge magnitude |h| as PFM")
    p.add_argument("--dump-energy", help="write the energy after every solver iteration")
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", help="compute RMSE/MAE tables")
    _common(p)
    _solver_flags(p)
    p.add_argument("--out", required=True, help="CSV output")
    p.add_argument("--data", help="dataset directory (evaluates --methods)")
    p.add_argument("--methods", nargs="+", choices=bench.METHODS, default=list(bench.METHODS))
    p.add_argument("--cnn", help="pretrain checkpoint (cnn_only, cnn_plus_atgv)")
    p.add_argument("--joint", help="joint checkpoint (atgv_net)")
    p.add_argument("--pred", help="directory of predictions")
    p.add_argument("--gt", help="directory of ground truth with matching file names")
    p.add_argument("--method-name", default="prediction")
    p.add_argument("--rho", type=int, default=2)
    p.add_argument("--masked", action="store_true", help="ignore pixels whose ground truth is 0")
    p.add_argument("--error-maps", help="directory for per-sample error maps")
    p.add_argument(
        "--check-ordering",
        action="store_true",
        help="exit 4 unless mean RMSE satisfies atgv_net <= cnn_only <= bilinear",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-run a command from its config echo")
    p.add_argument("config")
    p.add_argument("--out", help="redirect the output")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        if args.command == "replay":
            return args.func(args)
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise CliError("--threads must be >= 1")
        args.threads = threads
        _write_echo(args, argv)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
