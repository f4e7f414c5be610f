"""Command-line interface: gen-data, train, gradcheck, eval.

Exit codes: 0 success, 1 check failure, 2 usage or input error.  Relative
output paths are resolved against ``$EVENTGRAD_OUTPUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import DATASET_VERSION, Dataset, build_digits, gen_synthetic, gen_yinyang, load_idx, validate
from .kernels import KernelSpec
from .loss import LossKind, LossSpec
from .network import CHECKPOINT_VERSION, InitRanges, Parameters, Topology
from .oracle import run_gradcheck
from .train import (
    Mode, TrainConfig, config_problems, evaluate, make_network, split_dataset, train,
    write_metrics, write_timing,
)

OUTPUT_DIR_ENV = "EVENTGRAD_OUTPUT_DIR"
MANIFEST_VERSION = 1
METRICS_VERSION = 1
REPORT_VERSION = 1

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _out_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _scale(text: str) -> float | list[float]:
    """One float, or a comma list with one value per weight block."""
    try:
        vals = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a float or comma-separated floats, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals[0] if len(vals) == 1 and "," not in text else vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _kernel(args) -> KernelSpec:
    if args.kernel == "causal":
        return KernelSpec.causal(args.tau_m)
    return KernelSpec.double(args.tau_m, args.tau_s)


def _load_dataset(path: str) -> Dataset:
    try:
        ds = Dataset.load(path)
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot read dataset {path}: {err}") from None
    problems = validate(ds)
    if problems:
        raise UsageError(f"invalid dataset {path}: " + "; ".join(problems[:5]))
    return ds


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    if args.task == "synthetic":
        ds = gen_synthetic(args.n, args.inputs, args.n_classes, args.window, args.seed, args.jitter)
    elif args.task == "yinyang":
        ds = gen_yinyang(args.n, args.seed, args.window, args.t_early, args.t_late)
    else:
        if not args.images or not args.labels:
            raise UsageError("--task digits needs --images and --labels")
        classes = args.classes or [0, 1, 2]
        try:
            x, y = load_idx(args.images, args.labels, classes)
        except (OSError, ValueError) as err:
            raise UsageError(str(err)) from None
        try:
            ds = build_digits(x, y, classes, args.n_train, args.n_test, args.rate_max,
                              args.window, args.seed)
        except ValueError as err:
            raise UsageError(str(err)) from None
    out = _out_path(args.out)
    ds.save(out)
    print(f"wrote {len(ds)} samples ({ds.task}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_KEYS = (
    "data", "mode", "epochs", "eta_w", "eta_d", "eta_a", "hidden", "kernel", "tau_m", "tau_s",
    "seed", "batch", "workers", "loss", "xi", "no_spike_penalty", "theta0", "tau_a", "w_lo",
    "w_hi", "d_lo", "d_hi", "a_init", "d_max", "a_max", "test_fraction", "strict",
    "checkpoint_every",
)


def _train_setup(args):
    problems = []
    try:
        ranges = InitRanges(args.w_lo, args.w_hi, args.d_lo, args.d_hi, args.a_init)
    except ValueError as err:
        problems.append(str(err))
        ranges = None
    try:
        kernel = _kernel(args)
    except ValueError as err:
        problems.append(str(err))
        kernel = None
    try:
        loss = LossSpec(LossKind(args.loss), args.xi, args.no_spike_penalty)
    except ValueError as err:
        problems.append(str(err))
        loss = LossSpec()
    if any(h < 1 for h in args.hidden):
        problems.append(f"hidden sizes must be >= 1, got {args.hidden}")
    if not args.theta0 > 0:
        problems.append(f"theta0 must be positive, got {args.theta0}")
    if not args.tau_a > 0:
        problems.append(f"tau_a must be positive, got {args.tau_a}")
    if args.checkpoint_every < 0:
        problems.append("checkpoint-every must be >= 0")
    cfg_kw = dict(
        mode=Mode(args.mode), eta_w=args.eta_w, eta_d=args.eta_d, eta_A=args.eta_a,
        epochs=args.epochs, batch=args.batch, seed=args.seed, loss=loss, d_max=args.d_max,
        A_max=args.a_max, test_fraction=args.test_fraction, workers=args.workers,
        strict=args.strict,
    )
    problems += config_problems(**cfg_kw)
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    return TrainConfig(**cfg_kw), ranges, kernel


def cmd_train(args) -> int:
    if args.from_manifest:
        try:
            manifest = json.loads(Path(args.from_manifest).read_text())
        except (OSError, ValueError) as err:
            raise UsageError(f"cannot read manifest: {err}") from None
        if manifest.get("schema_version") != MANIFEST_VERSION:
            raise UsageError("unsupported manifest schema_version")
        for k in TRAIN_KEYS:
            setattr(args, k, manifest["args"][k])
    if not args.data:
        raise UsageError("train needs --data (or --from-manifest)")
    config, ranges, kernel = _train_setup(args)
    ds = _load_dataset(args.data)
    params = make_network(ds, args.hidden, args.seed, kernel, ranges, args.theta0, args.tau_a)

    out_dir = _out_path(os.path.join(args.out_dir, "_"))
    out_dir = out_dir.parent
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "command": "train",
        "package_version": __version__,
        "format_versions": {
            "checkpoint": CHECKPOINT_VERSION, "dataset": DATASET_VERSION,
            "metrics": METRICS_VERSION, "manifest": MANIFEST_VERSION,
        },
        "args": {k: getattr(args, k) for k in TRAIN_KEYS},
        "data_sha256": _sha256(args.data),
        "resolved": {
            "config": config.to_dict(),
            "topology": list(params.topology.layer_sizes),
            "kernel": params.kernel.to_dict(),
            "init": ranges.to_dict() if ranges else None,
            "theta0": params.theta0, "tau_a": params.tau_a, "v_rest": params.v_rest,
            "window_T": params.window_T,
            "bounds": dict(zip(("d_max", "A_max"), config.bounds(params))),
            "trainable": {
                "weights": True,
                "delays": config.mode.trains_delays,
                "adaptation": config.mode.trains_adaptation,
            },
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")

    def on_epoch(m, p):
        if args.checkpoint_every and m.epoch % args.checkpoint_every == 0:
            ck = out_dir / "checkpoints"
            ck.mkdir(exist_ok=True)
            p.save(ck / f"epoch_{m.epoch:04d}.json")
        print(f"epoch {m.epoch}: loss {m.train_loss:.4f}  train acc {m.train_accuracy:.3f}  "
              f"test acc {m.test_accuracy:.3f}", flush=True)

    final, history = train(ds, params, config, on_epoch)
    write_metrics(history, out_dir / "metrics.csv")
    write_timing(history, out_dir / "timing.csv")
    final.save(out_dir / "checkpoint.json")
    print(f"final test accuracy {history[-1].test_accuracy:.4f}; outputs in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if not args.h > 0:
        raise UsageError("--h must be positive")
    topo = Topology(tuple(args.topology))
    kernel = _kernel(args)
    steps = [args.h] + [h for h in (1e-3, 1e-4, 1e-5) if args.sweep and h != args.h]
    ok = True
    summary = {"schema_version": REPORT_VERSION, "topology": args.topology, "trials": args.trials,
               "kernel": kernel.to_dict(), "seed": args.seed, "runs": []}
    for n, h in enumerate(steps):
        report = run_gradcheck(topo, args.trials, h, kernel, args.seed, args.workers)
        path = _out_path(args.out) if n == 0 else _out_path(
            str(Path(args.out).with_suffix("")) + f"_h{h:.0e}.csv")
        report.write_csv(path)
        if args.dump and n == 0:
            report.write_dump(_out_path(args.dump))
        n_jump = sum(r.jump_flag for r in report.rows)
        line = (f"h={h:g}: {report.n_counted} counted coordinates "
                f"({len(report.rows)} total, {n_jump} jump-flagged), "
                f"pass ratio {report.pass_ratio:.4f}")
        print(line)
        summary["runs"].append({"h": h, "report": str(path), "counted": report.n_counted,
                                "pass_ratio": report.pass_ratio, "jump_flagged": n_jump})
        if n == 0:
            ok = report.ok
    if args.summary:
        _out_path(args.summary).write_text(json.dumps(summary, indent=1) + "\n")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    ds = _load_dataset(args.data)
    try:
        params = Parameters.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {err}") from None
    topo = params.topology
    if ds.n_inputs != topo.n_inputs:
        raise UsageError(
            f"input size mismatch: dataset has {ds.n_inputs} inputs, checkpoint expects {topo.n_inputs}"
        )
    if ds.n_classes > topo.n_outputs:
        raise UsageError(
            f"class count mismatch: dataset has {ds.n_classes} classes, "
            f"checkpoint has {topo.n_outputs} outputs"
        )
    if args.split == "all":
        samples = list(ds.samples) + list(ds.test or [])
    else:
        cfg = TrainConfig(seed=args.seed, test_fraction=args.test_fraction)
        tr, te = split_dataset(ds, cfg)
        samples = tr if args.split == "train" else te
    loss = LossSpec(LossKind(args.loss), args.xi, args.no_spike_penalty)
    res = evaluate(samples, params, loss, topo.n_outputs)
    print(f"samples: {len(samples)}")
    print(f"accuracy: {res.accuracy:.6f}")
    print(f"mean loss: {res.mean_loss:.6f}")
    print("confusion (rows = true class, columns = predicted):")
    for row in res.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    if args.out:
        report = {"schema_version": REPORT_VERSION, "data": args.data,
                  "checkpoint": args.checkpoint, "split": args.split, "n_samples": len(samples),
                  **res.to_dict()}
        _out_path(args.out).write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_kernel_flags(p) -> None:
    p.add_argument("--kernel", choices=("causal", "double"), default="double")
    p.add_argument("--tau-m", type=float, default=20.0)
    p.add_argument("--tau-s", type=float, default=5.0)


def _add_loss_flags(p) -> None:
    p.add_argument("--loss", choices=[k.value for k in LossKind], default="ttfs")
    p.add_argument("--xi", type=float, default=None, help="softmax temperature, ms (default tau_m)")
    p.add_argument("--no-spike-penalty", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eventgrad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate or build a dataset file")
    g.add_argument("--task", choices=("synthetic", "yinyang", "digits"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=_positive_int, default=300, help="samples (synthetic, yinyang)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--window", type=float, default=100.0, help="window T, ms")
    g.add_argument("--inputs", type=_positive_int, default=20, help="synthetic input neurons")
    g.add_argument("--n-classes", type=_positive_int, default=3, help="synthetic classes")
    g.add_argument("--jitter", type=float, default=2.0, help="synthetic jitter sigma, ms")
    g.add_argument("--t-early", type=float, default=0.0)
    g.add_argument("--t-late", type=float, default=50.0)
    g.add_argument("--images")
    g.add_argument("--labels")
    g.add_argument("--classes", type=_int_list, default=None, help="digit classes, e.g. 0,1,2")
    g.add_argument("--n-train", type=_positive_int, default=300, help="digit images per class")
    g.add_argument("--n-test", type=_positive_int, default=100)
    g.add_argument("--rate-max", type=float, default=100.0, help="Hz")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--data")
    t.add_argument("--from-manifest", help="repeat the run recorded in a manifest.json")
    t.add_argument("--mode", choices=[m.value for m in Mode], default="full")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--eta-w", type=float, default=1e-3)
    t.add_argument("--eta-d", type=float, default=1e-3)
    t.add_argument("--eta-a", type=float, default=1e-3)
    t.add_argument("--hidden", type=_int_list, default=[20])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch", type=int, default=1)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--theta0", type=float, default=0.5)
    t.add_argument("--tau-a", type=float, default=30.0)
    t.add_argument("--w-lo", type=_scale, default=0.0, help="float or per-block list")
    t.add_argument("--w-hi", type=_scale, default=1.0, help="float or per-block list")
    t.add_argument("--d-lo", type=float, default=0.0)
    t.add_argument("--d-hi", type=float, default=5.0)
    t.add_argument("--a-init", type=float, default=0.5)
    t.add_argument("--d-max", type=float, default=None)
    t.add_argument("--a-max", type=float, default=None)
    t.add_argument("--test-fraction", type=float, default=0.2)
    t.add_argument("--strict", action="store_true", help="abort on degenerate samples")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--out-dir", default=".")
    _add_kernel_flags(t)
    _add_loss_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    c.add_argument("--topology", type=_int_list, default=[3, 4, 2])
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--h", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--sweep", action="store_true", help="also run h in {1e-3, 1e-4, 1e-5}")
    c.add_argument("--out", default="gradcheck.csv")
    c.add_argument("--dump", help="JSON gradient dump")
    c.add_argument("--summary", help="JSON summary")
    _add_kernel_flags(c)
    c.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out")
    e.add_argument("--split", choices=("all", "train", "test"), default="all")
    e.add_argument("--seed", type=int, default=0, help="split seed (train/test)")
    e.add_argument("--test-fraction", type=float, default=0.2)
    _add_loss_flags(e)
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"eventgrad {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
