"""Command-line pipelines: gen-data, train, infer, eval, bench.

Every command is driven by one JSON configuration document (--config) with
flag overrides, logs progress to stderr, and writes machine-readable
outputs to files or stdout. Fixed seeds plus --deterministic reproduce
artifacts bitwise; --threads sizes the BLAS pool, and deterministic mode
pins it to one thread so reduction order is fixed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import dataset, evaluate, formats
from .net import model, train as train_mod

log = logging.getLogger("deformgrid")


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.desk_config()
    if args.seed is not None:
        cfg.dataset.master_seed = args.seed
        cfg.train.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise config_mod.ConfigError("threads must be >= 1")
        cfg.threads = args.threads
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _thread_limit(cfg: config_mod.RunConfig) -> int:
    return 1 if cfg.deterministic else cfg.threads


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: config_mod.RunConfig, args) -> int:
    out_dir = args.out or "data"
    if args.count is not None:
        cfg.dataset.num_meshes = args.count
    manifest = dataset.generate_dataset(cfg.dataset, out_dir)
    print(os.path.join(out_dir, "manifest.txt"))
    log.info("gen-data: %d samples listed", len(manifest.entries))
    return 0


def cmd_train(cfg: config_mod.RunConfig, args) -> int:
    out_dir = args.out or "run"
    result = train_mod.train(args.data, cfg.net, cfg.train, out_dir)
    header, params, state = formats.read_checkpoint(result.checkpoint_path)
    header["config_digest"] = cfg.digest()
    formats.write_checkpoint(result.checkpoint_path, header, params, state)
    print(result.checkpoint_path)
    log.info(
        "train: %d epochs, best val %.6e%s",
        result.epochs_run,
        result.best_val_loss,
        " (early stop)" if result.stopped_early else "",
    )
    return 0


def cmd_infer(cfg: config_mod.RunConfig, args) -> int:
    header, params, _ = formats.read_checkpoint(args.checkpoint)
    net_cfg = train_mod.net_config_from_header(header)
    sample = formats.read_sample(args.sample)
    u_est, elapsed = train_mod.infer(params, net_cfg, sample.input.data)
    out_path = args.out or "u_est.npy"
    np.save(out_path, u_est)
    print(json.dumps({
        "output": out_path,
        "elapsed_s": elapsed,
        "grid_n": net_cfg.grid_n,
        "config_digest": cfg.digest(),
    }))
    return 0


def _estimates(kind, params, net_cfg, sample):
    if kind == "net":
        return train_mod.infer(params, net_cfg, sample.input.data)[0]
    if kind == "perfect":
        return sample.target.data.copy()
    if kind == "zero":
        return evaluate.zero_field_estimate(sample)
    if kind == "nearestVisible":
        return evaluate.nearest_visible_copy(sample)
    raise ValueError(f"unknown estimator {kind!r}")


def cmd_eval(cfg: config_mod.RunConfig, args) -> int:
    out_dir = args.out or "eval"
    manifest = formats.read_manifest(os.path.join(args.data, "manifest.txt"))
    rels = manifest.paths(args.split)
    if not rels:
        raise ValueError(f"no samples in split {args.split!r}")

    params = net_cfg = None
    if args.estimator == "net":
        header, params, _ = formats.read_checkpoint(args.checkpoint)
        net_cfg = train_mod.net_config_from_header(header)

    reports = []
    baseline_errors = {"zeroField": [], "nearestVisibleCopy": []}
    skipped = 0
    for rel in rels:
        sample = formats.read_sample(os.path.join(args.data, rel))
        if not evaluate.has_visible_points(sample):
            skipped += 1  # visible patch does not move; depth is undefined
            continue
        u_est = _estimates(args.estimator, params, net_cfg, sample)
        reports.append(evaluate.sample_report(sample, u_est))
        for name, est in evaluate.baseline_estimates(sample).items():
            rep = evaluate.sample_report(sample, est)
            baseline_errors[name].append(rep.errors)
    if not reports:
        raise ValueError(f"no scorable samples in split {args.split!r}")
    log.info(
        "eval: %d samples from split %s (%d skipped without visible motion)",
        len(reports), args.split, skipped,
    )

    tables = evaluate.bin_by_depth_and_magnitude(reports)
    fraction_table = evaluate.bin_by_visible_fraction(reports)
    summary = evaluate.export_tables(out_dir, tables, fraction_table, reports)
    summary["estimator"] = args.estimator
    summary["split"] = args.split
    summary["config_digest"] = cfg.digest()
    summary["baseline_mean_error_m"] = {
        name: float(np.concatenate(chunks).mean())
        for name, chunks in baseline_errors.items()
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(os.path.join(out_dir, "summary.json"))
    return 0


def cmd_bench(cfg: config_mod.RunConfig, args) -> int:
    if args.checkpoint:
        header, params, _ = formats.read_checkpoint(args.checkpoint)
        net_cfg = train_mod.net_config_from_header(header)
    else:
        net_cfg = cfg.net
        params = model.init_params(net_cfg, seed=cfg.train.seed)
    n = net_cfg.grid_n
    rng = np.random.default_rng(cfg.dataset.master_seed)
    x = rng.normal(size=(n, n, n, net_cfg.in_channels)).astype(np.float32)
    x[..., 0] -= 0.5  # mixed in/out organ so masking is exercised

    train_mod.infer(params, net_cfg, x)  # warm-up outside the timing
    times = []
    for _ in range(args.reps):
        _, dt = train_mod.infer(params, net_cfg, x)
        times.append(dt * 1000.0)
    times = np.array(times)
    print(json.dumps({
        "grid_n": n,
        "stage_channels": list(net_cfg.stage_channels),
        "parameters": model.count_parameters(net_cfg),
        "reps": args.reps,
        "mean_ms": float(times.mean()),
        "p95_ms": float(np.percentile(times, 95)),
        "config_digest": cfg.digest(),
    }))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deformgrid",
        description="Synthetic FEM displacement data and a 3D conv surrogate.",
    )
    p.add_argument("--config", help="JSON configuration document")
    p.add_argument("--seed", type=int, help="override dataset/train seeds")
    p.add_argument("--threads", type=int, help="BLAS thread pool size")
    p.add_argument(
        "--deterministic", action="store_true",
        help="single-threaded, fixed reduction order",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out", help="output directory (default: data)")
    g.add_argument("--count", type=int, help="override number of base meshes")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="fit the network to a dataset")
    t.add_argument("--data", required=True, help="dataset dir with manifest.txt")
    t.add_argument("--out", help="run directory (default: run)")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="estimate one sample's displacement")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sample", required=True, help="a .dgs sample file")
    i.add_argument("--out", help="output .npy path (default: u_est.npy)")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="binned error tables over a split")
    e.add_argument("--checkpoint", help="required for --estimator net")
    e.add_argument("--data", required=True, help="dataset dir with manifest.txt")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument(
        "--estimator", default="net",
        choices=("net", "perfect", "zero", "nearestVisible"),
        help="what produces the estimates being scored",
    )
    e.add_argument("--out", help="output directory (default: eval)")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="inference latency statistics")
    b.add_argument("--checkpoint", help="time this net (default: fresh init)")
    b.add_argument("--reps", type=int, default=20)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "estimator", None) == "net" and not args.checkpoint:
        parser.error("eval --estimator net requires --checkpoint")
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=_thread_limit(cfg)):
            return args.fn(cfg, args)
    except (config_mod.ConfigError, formats.FormatError) as exc:
        log.error("%s", exc)
        return 2
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
