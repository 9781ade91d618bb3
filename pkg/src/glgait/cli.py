"""Operator surface: verification suites, benchmarks, toy training.

Every subcommand is deterministic given its seed and writes plot-ready
CSV/JSON rather than rendered figures.  Exit codes: 0 success or PASS,
1 verification failure, 2 usage or input error.  ``GLT_THREADS`` caps
BLAS parallelism for reproducible timing on shared boxes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import (ArchDescriptor, complexity_sweep, empirical_flop_count,
                       reports_to_csv, reports_to_json, trf_analytic, trf_empirical)
from .attention import VARIANTS
from .blocks import capacity_config, count_params, load_checkpoint, silhouette_scores
from .synthdata import load_dataset, make_dataset, save_dataset
from .train import LOSSES, TrainConfig, train_toy
from .verification import TOLERANCE, run_suite

PARAM_TARGETS_M = {"B": 3.58, "L": 14.28, "H": 57.04}


def _apply_thread_cap():
    cap = os.environ.get("GLT_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(cap))
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = cap


def cmd_dataset(args):
    ds = make_dataset(n_train=args.train_ids, n_test=args.test_ids,
                      seqs_per_id=args.seqs_per_id, frames=args.frames,
                      mode=args.mode, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.sequences)} sequences "
          f"({args.train_ids} train / {args.test_ids} test identities) to {args.out}")
    return 0


def cmd_gradcheck(args):
    try:
        results = run_suite(ops=args.op or None, base_seed=args.seed)
    except KeyError as err:
        print(str(err), file=sys.stderr)
        return 2
    print("op,max_rel_err,status")
    ok = True
    for name, err in results:
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name},{err:.3e},{'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_bench_attn(args):
    variants = args.variant or list(VARIANTS)
    try:
        reports = complexity_sweep(args.L, args.T, args.C, d=args.D, p=args.P,
                                   p_l=args.Pl, heads=args.heads,
                                   variants=variants, seed=args.seed)
    except ValueError as err:
        print(f"invalid benchmark configuration: {err}", file=sys.stderr)
        return 2
    csv_text = reports_to_csv(reports)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv_text)
        if args.json:
            with open(os.path.splitext(args.out)[0] + ".json", "w") as fh:
                fh.write(reports_to_json(reports))
    print(csv_text, end="")
    if "mhsa" in variants and "pgta" in variants:
        m = next(r for r in reports if r.variant == "mhsa").mults_empirical
        p = next(r for r in reports if r.variant == "pgta").mults_empirical
        expected = args.L / (args.Pl * args.P)
        ratio = m / p
        ok = abs(ratio - expected) < 1e-9
        print(f"mhsa/pgta multiply ratio {ratio:.2f} "
              f"(expected L/(Pl*P) = {expected:.2f}) {'PASS' if ok else 'FAIL'}")
        return 0 if ok else 1
    return 0


def cmd_train_toy(args):
    if not os.path.exists(args.dataset):
        print(f"dataset not found: {args.dataset}", file=sys.stderr)
        return 2
    ds = load_dataset(args.dataset)
    cfg = TrainConfig(capacity=args.capacity, loss=args.loss, seed=args.seed,
                      iters=args.iters, lr=args.lr,
                      milestones=tuple(args.milestones),
                      batch_ids=args.batch_ids, batch_seqs=args.batch_seqs)
    _, report = train_toy(ds, cfg, out_dir=args.out)
    print(json.dumps({k: report[k] for k in
                      ("rank1", "mean_intra", "mean_inter", "loss_final")},
                     sort_keys=True))
    print(f"artifacts in {args.out}")
    return 0


def cmd_trf(args):
    with open(args.arch) as fh:
        arch = ArchDescriptor.from_json(fh.read())
    analytic = trf_analytic(arch)
    print(f"trf_analytic,{analytic}")
    if args.empirical:
        measured = trf_empirical(arch, args.T, seed=args.seed)
        print(f"trf_empirical,{measured}")
    return 0


def cmd_params(args):
    cfg = capacity_config(args.capacity, dtype="f32")
    from .blocks import build_backbone
    count = count_params(build_backbone(cfg), include_head=args.include_head)
    target = PARAM_TARGETS_M.get(args.capacity)
    if target is None or args.include_head:
        print(f"params,{count:.4f}M")
        return 0
    ok = abs(count / target - 1.0) <= 0.05
    print(f"params,{count:.4f}M,target,{target}M,{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_score(args):
    if not os.path.exists(args.dataset):
        print(f"dataset not found: {args.dataset}", file=sys.stderr)
        return 2
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if not 0 <= args.index < len(ds.sequences):
        print(f"sequence index {args.index} out of range "
              f"(dataset has {len(ds.sequences)})", file=sys.stderr)
        return 2
    seq = ds.sequences[args.index]
    scores = silhouette_scores(model, seq.frames)
    lines = ["frame,score"] + [f"{t},{s:.12g}" for t, s in enumerate(scores)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="glgait",
                                 description="global-local temporal gait toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate a synthetic silhouette corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train-ids", type=int, default=20)
    p.add_argument("--test-ids", type=int, default=10)
    p.add_argument("--seqs-per-id", type=int, default=10)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--mode", choices=("lab", "wild"), default="wild")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--op", action="append", help="restrict to one op (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-attn", help="attention complexity benchmark")
    p.add_argument("--L", type=int, default=192)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--C", type=int, default=8)
    p.add_argument("--D", type=int, default=None,
                   help="head width; defaults to each variant's token volume")
    p.add_argument("--P", type=int, default=3)
    p.add_argument("--Pl", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--variant", action="append", choices=VARIANTS)
    p.add_argument("--out", help="write CSV here")
    p.add_argument("--json", action="store_true", help="also write JSON next to CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_attn)

    p = sub.add_parser("train-toy", help="train a reduced model on a corpus")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--capacity", default="tiny")
    p.add_argument("--loss", choices=LOSSES, default="ctl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--milestones", type=int, nargs="*", default=[1200, 1700])
    p.add_argument("--batch-ids", type=int, default=3)
    p.add_argument("--batch-seqs", type=int, default=2)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("trf", help="temporal receptive field of a layer stack")
    p.add_argument("--arch", required=True, help="JSON arch descriptor file")
    p.add_argument("--empirical", action="store_true")
    p.add_argument("--T", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_trf)

    p = sub.add_parser("params", help="parameter count vs published targets")
    p.add_argument("--capacity", default="B")
    p.add_argument("--include-head", action="store_true")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("score", help="per-frame temporal max pooling attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_score)
    return ap


def main(argv=None):
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
