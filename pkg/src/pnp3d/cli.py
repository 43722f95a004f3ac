"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 I/O or parse failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import ablation, io
from .classifier import ClassifierParams, TrainingDiverged, evaluate, forward_classifier, train
from .config import ConfigParseError, RunConfig, load_config
from .core import ConfigError, PnpParams, count_flops, count_params, enumerate_params, instrumented_flops, neighbors_for, pnp3d_forward
from .data import Split, generate_dataset, normalize
from .gradcheck import check_block, variant_grid, variant_name

OK, INVALID, IO_ERROR = 0, 1, 2
CHECKPOINT = "checkpoint.pnp3d"


class CliError(Exception):
    def __init__(self, msg: str, code: int = IO_ERROR):
        super().__init__(msg)
        self.code = code


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out if args.out is not None else cfg.out_dir)


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    tol = args.tolerance if args.tolerance is not None else cfg.gradcheck.tolerance
    g = cfg.gradcheck
    worst, failed = 0.0, []
    results = []
    for variant in variant_grid(cfg.gradcheck_base()):
        res = check_block(variant, n=g.n, seed=g.seed)
        name = variant_name(variant)
        if not res.finite:
            print(f"{name}: non-finite gradient", file=sys.stderr)
            return INVALID
        status = "ok" if res.max_error < tol else "FAIL"
        print(f"{name:40s} max_rel_err={res.max_error:.3e} {status}")
        results.append({"variant": name, "max_rel_err": res.max_error})
        worst = max(worst, res.max_error)
        if res.max_error >= tol:
            failed.append(name)
    if g.training_check:
        res = check_block(cfg.gradcheck_base(), n=g.n, seed=g.seed, training=True)
        status = "ok" if res.finite and res.max_error < tol else "FAIL"
        print(f"{'training-mode batch norm (default variant)':40s} max_rel_err={res.max_error:.3e} {status}")
        results.append({"variant": "training-bn", "max_rel_err": res.max_error})
        if status != "ok":
            failed.append("training-bn")
    print(f"worst relative error {worst:.3e} (tolerance {tol:g})")
    _write(_out_dir(args, cfg) / "gradcheck.json",
           _json({"tolerance": tol, "worst": worst, "failed": failed, "variants": results}))
    if failed:
        print(f"{len(failed)} variant(s) failed: {', '.join(failed)}", file=sys.stderr)
        return INVALID
    return OK


def _data(cfg: RunConfig) -> tuple[Split, Split]:
    return generate_dataset(cfg.dataset())


def _load_params(cfg: RunConfig, path: Path) -> ClassifierParams:
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    try:
        tensors, _ = io.load_tensors(path)
    except io.CheckpointError as exc:
        raise CliError(f"{path}: {exc}") from exc
    params = ClassifierParams.init(cfg.classifier_config())
    try:
        params.load(tensors)
    except KeyError as exc:
        raise CliError(f"{path}: checkpoint does not match config ({exc})") from exc
    return params


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(args, cfg)
    ccfg = cfg.classifier_config()
    train_split, test_split = _data(cfg)
    try:
        report, params = train(ccfg, train_split, test_split)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return INVALID
    out.mkdir(parents=True, exist_ok=True)
    io.save_tensors(out / CHECKPOINT, params.named_tensors(), {"config": cfg.model_dump(mode="json")})
    _write(out / "train_report.json", _json(report.to_dict()))
    for e, (loss, tr, te, wt) in enumerate(zip(report.loss, report.train_acc, report.test_acc, report.wall_time)):
        print(f"epoch {e:3d} loss={loss:.4f} train_acc={tr:.4f} test_acc={te:.4f} ({wt:.1f}s)")
    print(f"parameters: {report.n_params}; final test accuracy {report.final_test_acc:.4f}")
    return OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(args, cfg)
    ccfg = cfg.classifier_config()
    params = _load_params(cfg, Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT)
    _, test_split = _data(cfg)
    if args.permute is not None:
        rng = np.random.default_rng(args.permute)
        clouds = np.stack([c[rng.permutation(len(c))] for c in test_split.clouds])
        test_split = Split(clouds, test_split.labels)
    acc, conf = evaluate(params, ccfg, test_split)
    _write(out / "eval_report.json", _json({"test_acc": acc, "confusion": conf.tolist(), "n_params": params.n_params()}))
    print(f"test accuracy {acc:.4f} over {len(test_split)} clouds; parameters {params.n_params()}")
    return OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _out_dir(args, cfg)
    base = cfg.classifier_config(use_pnp=True)
    seeds = [cfg.model.seed + i for i in range(cfg.ablate.seeds)]
    train_split, test_split = _data(cfg)
    rows = ablation.run_ablation(base, seeds, train_split, test_split)
    text = ablation.rows_to_csv(rows)
    _write(out / "ablation.csv", text)
    sys.stdout.write(text)
    return OK


def cmd_bench(cfg: RunConfig, args) -> int:
    out = _out_dir(args, cfg)
    n = args.n if args.n is not None else cfg.bench.n
    pcfg = cfg.pnp_config()
    analytic_p = count_params(pcfg)
    rng = np.random.default_rng(cfg.model.seed)
    params = PnpParams.init(pcfg, rng)
    counted_p = enumerate_params(params)
    analytic_f = count_flops(pcfg, n)
    counted_f = instrumented_flops(pcfg, n, seed=cfg.model.seed)
    doubled = count_flops(pcfg, 2 * n)["total"] / analytic_f["total"]

    coords = rng.uniform(-1, 1, size=(n, 3))
    feats = rng.normal(size=(n, pcfg.channels))
    params.set_training(False)
    idx = neighbors_for(coords, pcfg)
    timings = []
    for _ in range(cfg.bench.repeats):
        t0 = time.perf_counter()
        pnp3d_forward(coords, feats, params, pcfg, idx=idx)
        timings.append(time.perf_counter() - t0)

    agree = analytic_p == counted_p and analytic_f == counted_f
    report = {
        "n": n, "config": pcfg.__dict__,
        "params": {"analytic": analytic_p, "enumerated": counted_p},
        "flops": {"analytic": analytic_f, "instrumented": counted_f},
        "flops_ratio_doubled_n": doubled, "agree": agree,
        "model_size_bytes_float32": 4 * analytic_p["total"],
    }
    _write(out / "bench.json", _json(report))
    print(f"N={n} C={pcfg.channels} k={pcfg.effective_k} r={pcfg.reduction}")
    print(f"parameters: analytic {analytic_p['total']}, enumerated {counted_p['total']}")
    print(f"operations: analytic {analytic_f['total']} (mac {analytic_f['mac']}), "
          f"instrumented {counted_f['total']} (mac {counted_f['mac']})")
    print(f"FLOPs(2N)/FLOPs(N) = {doubled:.6f}")
    print(f"forward latency (excluding neighbour search): best {min(timings) * 1e3:.2f} ms of {len(timings)}")
    if not agree:
        print("analytic and instrumented counts disagree", file=sys.stderr)
        return INVALID
    return OK


def channel_heat(features: np.ndarray) -> np.ndarray:
    """Min-max normalise each channel over the points, then average the channels."""
    lo, hi = features.min(axis=0), features.max(axis=0)
    span = hi - lo
    scaled = np.divide(features - lo, span, out=np.zeros_like(features), where=span > 0)
    return scaled.mean(axis=1)


def cmd_dump_features(cfg: RunConfig, args) -> int:
    out = _out_dir(args, cfg)
    ccfg = cfg.classifier_config()
    if not ccfg.use_pnp:
        raise CliError("dump-features needs a model with the PnP-3D block (model.use_pnp)", INVALID)
    params = _load_params(cfg, Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT)
    try:
        cloud = io.load_cloud(args.cloud)
    except FileNotFoundError as exc:
        raise CliError(f"cloud file not found: {exc}") from exc
    except (io.CloudParseError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    if len(cloud) != cfg.data.n_points:
        raise CliError(f"cloud has {len(cloud)} points, config expects {cfg.data.n_points}", INVALID)
    params.set_training(False)
    _, before, after = forward_classifier(normalize(cloud.coords), ccfg, params, return_features=True)
    heat_before, heat_after = channel_heat(before.value[0]), channel_heat(after.value[0])
    lines = ["x,y,z,before,after"]
    for (x, y, z), b, a in zip(cloud.coords, heat_before, heat_after):
        lines.append(",".join(format(v, ".10g") for v in (x, y, z, b, a)))
    path = Path(args.dump_out) if args.dump_out else out / "features.csv"
    _write(path, "\n".join(lines) + "\n")
    print(f"wrote {len(cloud)} rows to {path}")
    return OK


COMMANDS = {
    "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "bench": cmd_bench, "dump-features": cmd_dump_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override model and data seeds")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="pnp3d", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all 36 block variants")
    p.add_argument("--tolerance", type=float, default=None)
    sub.add_parser("train", parents=[common], help="train the toy classifier")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--permute", type=int, default=None, metavar="SEED", help="shuffle point order in test clouds")
    sub.add_parser("ablate", parents=[common], help="pooling/regularisation/combine ablation grid")
    p = sub.add_parser("bench", parents=[common], help="parameter, FLOP and latency report")
    p.add_argument("--n", type=int, default=None)
    p = sub.add_parser("dump-features", parents=[common], help="per-point activation heat values as CSV")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--cloud", required=True)
    p.add_argument("--dump-out", default=None, metavar="PATH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return IO_ERROR
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
