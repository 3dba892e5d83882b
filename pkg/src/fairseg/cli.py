"""Command-line surface: gen / train / eval / gradcheck / prop1 / report.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 verification failure.  Every subcommand is deterministic given its
config and input files; ``--print-config`` echoes the fully resolved
configuration before running.  The only environment variable consulted
is FAIRSEG_COLOR (0 disables the pass/fail coloring).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import load_config
from .errors import (
    ConfigError,
    DeterminismError,
    DimensionError,
    FormatError,
    LabelError,
    ProtocolError,
    StateError,
    UnavailableError,
)
from .losses import (
    ConsConfig,
    cluster_loss,
    cons_loss,
    distill_loss,
    verify_proposition1,
    weighted_ce,
)
from .metrics import (
    evaluate_model,
    normalized_entropy,
    write_report_csv,
    write_summary,
)
from .model import load_checkpoint
from .numerics import Rng, finite_diff_check, softmax
from .prototypes import ClusterConfig, PrototypeBank
from .synthdata import (
    IGNORE_ID,
    TaskSplit,
    class_pixel_counts,
    generate,
    read_dataset,
    read_manifest,
    write_dataset,
)
from .trainer import run_continual

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

_DATA_ERRORS = (
    FormatError,
    LabelError,
    DimensionError,
    ProtocolError,
    StateError,
    UnavailableError,
    DeterminismError,
    OSError,
)


def _want_color():
    if os.environ.get("FAIRSEG_COLOR", "") == "0":
        return False
    return sys.stdout.isatty()


def _verdict(ok):
    word = "PASS" if ok else "FAIL"
    if _want_color():
        code = "32" if ok else "31"
        return f"\x1b[{code}m{word}\x1b[0m"
    return word


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    # Computation here is single-threaded NumPy; this caps any BLAS pools
    # in spawned children and is recorded for reproducibility.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args):
    overrides = []
    if args.seed is not None:
        overrides.append(("benchmark", "seed", str(args.seed)))
    rc = load_config(args.config, overrides)
    if args.print_config:
        sys.stdout.write(rc.dump())
    spec = rc.benchmark_spec()
    train, test = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    manifest = dict(spec.manifest_fields())
    manifest["name"] = rc.get("benchmark", "name")
    write_dataset(
        train,
        os.path.join(args.out, "train.bin"),
        spec.num_classes,
        manifest={**manifest, "role": "train"},
    )
    write_dataset(
        test,
        os.path.join(args.out, "test.bin"),
        spec.num_classes,
        manifest={**manifest, "role": "test"},
    )
    rc.write(os.path.join(args.out, "config.resolved.ini"))
    counts = class_pixel_counts(train, spec.num_classes)
    total = counts.sum()
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")
    for cid, n in enumerate(counts):
        share = n / total if total else 0.0
        tag = "background" if cid == 0 else f"class {cid}"
        print(f"  {tag}: {n} px ({share:.4f})")
    ent = normalized_entropy(counts[1:])
    print(f"normalized entropy over foreground classes: {ent:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    overrides = []
    if args.seed is not None:
        overrides.append(("train", "seed", str(args.seed)))
    if args.steps is not None:
        overrides.append(("split", "steps", args.steps))
    if args.out is not None:
        overrides.append(("output", "dir", args.out))
    rc = load_config(args.config, overrides)
    samples, num_classes = read_dataset(args.dataset)
    tc = rc.train_config(num_classes=num_classes)
    if args.ablation is not None:
        tc = tc.ablation(args.ablation)
        for key, value in (
            ("use_cluster", tc.use_cluster),
            ("use_class_weighting", tc.use_class_weighting),
            ("use_cons", tc.use_cons),
            ("use_distill", tc.use_distill),
        ):
            rc.set("train", key, str(value).lower())
    if args.print_config:
        sys.stdout.write(rc.dump())
    test_samples = None
    if args.test is not None:
        test_samples, test_classes = read_dataset(args.test)
        if test_classes != num_classes:
            raise LabelError(
                f"train/test class counts differ: {num_classes} vs {test_classes}"
            )
    out_dir = rc.get("output", "dir")
    resume_from = None
    if args.resume:
        resume_from = os.path.join(out_dir, "latest.ckpt")
        if not os.path.exists(resume_from):
            raise FormatError(f"no checkpoint to resume at {resume_from}")
    os.makedirs(out_dir, exist_ok=True)
    rc.write(os.path.join(out_dir, "config.resolved.ini"))
    result = run_continual(
        tc,
        samples,
        out_dir=out_dir,
        test_samples=test_samples,
        resume_from=resume_from,
    )
    for outcome in result.outcomes:
        last = outcome.loss_trace[-1] if outcome.loss_trace else {}
        print(
            f"step {outcome.step}: head rows {outcome.params.num_rows}, "
            f"{outcome.iterations} iterations, "
            f"final total loss {last.get('total', float('nan')):.6f}"
        )
    for report in result.reports:
        write_report_csv(
            os.path.join(out_dir, f"report_step{report.step}.csv"), report
        )
        write_summary(
            os.path.join(out_dir, f"summary_step{report.step}.txt"), report
        )
        print(
            f"step {report.step} eval: mIoU(all) {report.miou_all:.4f}, "
            f"mIoU(initial) {report.miou_initial:.4f}, "
            f"STD {report.iou_std_fg:.4f}"
        )
    if result.reports:
        write_summary(os.path.join(out_dir, "summary.txt"), result.reports[-1])
    print(f"run artifacts in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    samples, num_classes = read_dataset(args.dataset)
    registered = [c for step in ckpt.params.class_steps for c in step]
    if registered and max(registered) > num_classes:
        raise LabelError(
            f"checkpoint knows class {max(registered)} but dataset has "
            f"only {num_classes} classes"
        )
    split = TaskSplit(steps=ckpt.params.class_steps).validate(num_classes)
    step = args.step if args.step is not None else split.num_steps
    report, _ = evaluate_model(ckpt.params, samples, split, step)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(os.path.join(out_dir, "report.csv"), report)
    write_summary(os.path.join(out_dir, "summary.txt"), report)
    print(f"evaluated {len(samples)} images at step {step}")
    print(f"  mIoU all      {report.miou_all:.4f}")
    print(f"  mIoU initial  {report.miou_initial:.4f}")
    later = report.miou_later
    print(f"  mIoU later    {later:.4f}" if np.isfinite(later) else
          "  mIoU later    n/a")
    print(f"  IoU STD (fg)  {report.iou_std_fg:.4f}")
    print(f"  fairness gap  {report.fairness_gap:.4f}")
    print(f"  islands/image {report.islands_per_image:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _bounded_offsets(rng, count, dim, lo=0.3, hi=0.8):
    """Random per-coordinate offsets with |offset| in [lo, hi].

    Keeping every coordinate away from zero keeps the analytic gradients
    (unit vectors for the distance losses) well above the floating-point
    noise floor of the central-difference quotient, so the comparison
    tests the gradient, not the rounding of the loss value.
    """
    mag = lo + (hi - lo) * rng.uniforms(count * dim)
    signs = np.where(rng.uniforms(count * dim) < 0.5, -1.0, 1.0)
    return (mag * signs).reshape(count, dim)


def run_gradcheck(trials=20, seed=20240801, height=8, width=8, dim=4):
    """Finite-difference check for every loss; returns [(name, max_err)].

    Instances are random but bounded away from gradient degeneracies
    (zero offsets, vanishing kernels) — see _bounded_offsets.
    """
    results = []
    shape = (height, width, dim)
    n = height * width

    def ce_case(rng):
        labels = np.array(
            [rng.randint(dim) for _ in range(n)], dtype=np.int64
        ).reshape(height, width)
        mask = rng.uniforms(n).reshape(height, width) > 0.3
        weights = 0.5 + 1.5 * rng.uniforms(dim)
        z0 = rng.normals(n * dim).reshape(shape)
        return (
            lambda p: weighted_ce(p["logits"], labels, mask, weights),
            {"logits": z0},
        )

    def cluster_case(rng):
        # Three initialized prototypes: pixels labeled 0 cluster near p0
        # (pure attraction; every other prototype saturated), pixels
        # labeled 3 reference an uninitialized prototype and sit within
        # the margin of p1 (pure active hinge + skip counter), and p2 is
        # far away so it exercises the saturated branch everywhere.
        protos = PrototypeBank(dim)
        protos.register([0, 1, 2, 3])
        base = rng.normals(dim)
        direction = _bounded_offsets(rng, 1, dim, 0.3, 0.6)[0]
        p1 = base + 3.0 * direction / np.sqrt(np.sum(direction**2))
        for cid, vec in ((0, base), (1, p1), (2, base + 50.0)):
            protos.entries[cid].vector = vec.astype(np.float64)
            protos.entries[cid].initialized = True
        labels = np.empty(n, dtype=np.int64)
        f0 = np.empty((n, dim))
        for i in range(n):
            u = rng.uniform()
            off = 0.5 * _bounded_offsets(rng, 1, dim)[0]
            if u < 0.45:
                labels[i] = 0
                f0[i] = base + off
            elif u < 0.9:
                labels[i] = 3
                f0[i] = p1 + off
            else:
                labels[i] = IGNORE_ID
                f0[i] = base + 10.0 * rng.normals(dim)
        cfg = ClusterConfig(margin=1.0)
        labels = labels.reshape(height, width)
        f0 = f0.reshape(shape)
        return (
            lambda p: cluster_loss(p["features"], labels, protos, cfg),
            {"features": f0},
        )

    def cons_case(rng, form):
        # Two-region piecewise-constant probability maps: interior pixels
        # have exactly-zero gradients on both sides of the comparison,
        # boundary pixels accumulate sign-coherent contributions bounded
        # away from the FD noise floor.  Colors stay close so no pair's
        # affinity collapses.  The check runs on the loss's own input
        # surface (probs); the softmax chain is verified separately.
        img = (0.5 + 0.12 * (2.0 * rng.uniforms(n * 3) - 1.0)).reshape(
            height, width, 3
        )
        cfg = ConsConfig(sigma_color=0.3, sigma_pred=0.6, window=3, form=form)
        a = b = None
        for _ in range(100):
            a = softmax(rng.normals(dim), axis=-1)
            b = softmax(rng.normals(dim), axis=-1)
            if np.min(np.abs(a - b)) >= 0.02:
                break
        rr, cc = np.meshgrid(
            np.arange(height), np.arange(width), indexing="ij"
        )
        kind = rng.randint(3)
        if kind == 0:
            region = rr + cc < (height + width) // 2
        elif kind == 1:
            r0 = 2 + rng.randint(height - 4)
            c0 = 2 + rng.randint(width - 4)
            region = (np.abs(rr - r0) <= 2) & (np.abs(cc - c0) <= 2)
        else:
            region = cc < width // 2
        probs0 = np.where(region[..., None], a, b)
        return (
            lambda p: cons_loss(img, p["probs"], cfg),
            {"probs": probs0},
        )

    def distill_case(rng):
        f0 = rng.normals(n * dim).reshape(shape)
        prev = f0 - _bounded_offsets(rng, n, dim).reshape(shape)
        return (
            lambda p: distill_loss(p["features"], prev),
            {"features": f0},
        )

    cases = [
        ("weighted_ce", ce_case),
        ("cluster_loss", cluster_case),
        ("cons_loss[smooth]", lambda rng: cons_case(rng, "smooth")),
        ("cons_loss[literal]", lambda rng: cons_case(rng, "literal")),
        ("distill_loss", distill_case),
    ]
    root = Rng(seed)
    for name, make in cases:
        worst = 0.0
        for t in range(trials):
            rng = root.split(f"{name}/{t}")
            loss, params = make(rng)
            err = finite_diff_check(loss, params, epsilon=1e-6)
            worst = max(worst, err)
        results.append((name, worst))
    return results


def cmd_gradcheck(args):
    results = run_gradcheck(trials=args.trials, seed=args.seed)
    threshold = 1e-5
    all_ok = True
    print(f"{'loss':24s} {'max rel err':>14s}  verdict")
    for name, err in results:
        ok = err <= threshold
        all_ok &= ok
        print(f"{name:24s} {err:14.3e}  {_verdict(ok)}")
    if not all_ok:
        print(f"gradient check failed (threshold {threshold:g})")
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# prop1
# ---------------------------------------------------------------------------


def run_prop1(trials=1000, seed=20240802, dims=(4, 16, 32),
              proto_counts=(2, 8, 20), pixels=16):
    """Random upper-bound trials; returns a dict of aggregates."""
    root = Rng(seed)
    holds = 0
    min_slack = float("inf")
    lhs_sum = rhs_sum = 0.0
    lhs_max = rhs_max = 0.0
    for t in range(trials):
        dim = dims[t % len(dims)]
        n_protos = proto_counts[(t // len(dims)) % len(proto_counts)]
        rng = root.split(f"trial/{t}")
        scale = 0.5 + 4.0 * rng.uniform()
        fn = scale * rng.normals(pixels * dim).reshape(pixels, dim)
        fp = scale * rng.normals(pixels * dim).reshape(pixels, dim)
        protos = PrototypeBank(dim)
        protos.register(range(n_protos))
        for cid in range(n_protos):
            protos.entries[cid].vector = scale * rng.normals(dim)
            protos.entries[cid].initialized = True
        rep = verify_proposition1(fn, fp, protos)
        holds += int(rep.holds)
        min_slack = min(min_slack, rep.min_slack)
        lhs_sum += rep.mean_lhs
        rhs_sum += rep.mean_rhs
        lhs_max = max(lhs_max, rep.max_lhs)
        rhs_max = max(rhs_max, rep.max_rhs)
    return {
        "trials": trials,
        "holds": holds,
        "min_slack": min_slack,
        "mean_lhs": lhs_sum / trials,
        "mean_rhs": rhs_sum / trials,
        "max_lhs": lhs_max,
        "max_rhs": rhs_max,
    }


def cmd_prop1(args):
    summary = run_prop1(trials=args.trials, seed=args.seed)
    ok = summary["holds"] == summary["trials"]
    print(f"trials      {summary['trials']}")
    print(f"holds       {summary['holds']}")
    print(f"min slack   {summary['min_slack']:.6e}")
    print(f"mean lhs    {summary['mean_lhs']:.6f}")
    print(f"mean rhs    {summary['mean_rhs']:.6f}")
    print(f"max lhs     {summary['max_lhs']:.6f}")
    print(f"max rhs     {summary['max_rhs']:.6f}")
    print(f"bound holds on every pixel: {_verdict(ok)}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_REPORT_COLUMNS = (
    "miou_initial",
    "miou_later",
    "miou_all",
    "miou_avg",
    "iou_std_fg",
    "fairness_gap",
    "islands_per_image",
)


def _load_run_summary(run_dir):
    path = os.path.join(run_dir, "summary.txt")
    if not os.path.exists(path):
        raise FormatError(f"no summary.txt in run directory {run_dir}")
    fields = read_manifest(path)
    row = {"name": os.path.basename(os.path.normpath(run_dir))}
    for col in _REPORT_COLUMNS:
        raw = fields.get(col, "nan")
        try:
            row[col] = float(raw)
        except ValueError:
            raise FormatError(f"bad value for {col} in {path}: {raw!r}")
    return row


def cmd_report(args):
    rows = [_load_run_summary(d) for d in args.run_dirs]
    baseline = None
    for row in rows:
        if row["name"] == args.baseline:
            baseline = row
            break
    header = ["name"] + list(_REPORT_COLUMNS)
    if baseline is not None:
        header += ["delta_miou_all", "delta_miou_initial"]
        for row in rows:
            row["delta_miou_all"] = row["miou_all"] - baseline["miou_all"]
            row["delta_miou_initial"] = (
                row["miou_initial"] - baseline["miou_initial"]
            )
    widths = [max(len(h), 14) for h in header]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    print(line)
    print("-" * len(line))
    for row in rows:
        cells = [str(row["name"]).ljust(widths[0])]
        for h, w in zip(header[1:], widths[1:]):
            cells.append(f"{row.get(h, float('nan')):.4f}".ljust(w))
        print("  ".join(cells))
    if args.out is not None:
        import csv

        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=header)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in header})
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing & dispatch
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fairseg",
        description=(
            "Fairness-aware continual segmentation on procedural shape "
            "benchmarks."
        ),
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="cap worker/BLAS thread counts (best effort; compute is "
             "single-threaded)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a benchmark dataset")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override [benchmark] seed")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the continual training protocol")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--dataset", required=True, help="training dataset file")
    p.add_argument("--test", default=None,
                   help="test dataset for per-step evaluation")
    p.add_argument("--out", default=None, help="override [output] dir")
    p.add_argument("--ablation", default=None,
                   help="loss-toggle preset: fine-tune, distill, cluster, "
                        "cluster-class, cluster-cons, full")
    p.add_argument("--steps", default=None,
                   help="override [split] steps, e.g. 5-3 or 4-2-2")
    p.add_argument("--seed", type=int, default=None,
                   help="override [train] seed")
    p.add_argument("--resume", action="store_true",
                   help="continue from <out>/latest.ckpt")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="output directory (default .)")
    p.add_argument("--step", type=int, default=None,
                   help="evaluate at this step (default: final)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every loss gradient")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=20240801)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("prop1",
                       help="randomized trials of the feature-drift bound")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=20240802)
    p.set_defaults(func=cmd_prop1)

    p = sub.add_parser("report",
                       help="tabulate run summaries side by side")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None, help="also write a CSV here")
    p.add_argument("--baseline", default="fine-tune",
                   help="run name for the delta columns")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
