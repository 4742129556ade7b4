"""Command-line interface: train, predict, eval, inspect-mask, gradcheck.

Exit codes: 0 success, 1 failed check (gradcheck), 2 usage error, 3 data
error, 4 numerical divergence. Every command is deterministic given its flags
and --seed.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io, similarity, training
from .encoder import run_gradient_check
from .errors import DataError, DivergenceError
from .types import Mask, MaskResolution, RdmStack

_ONOFF = {"on": True, "off": False}


def _add_train(sub):
    p = sub.add_parser("train", help="fit a mask to one or more RDM stacks")
    p.add_argument("--features", nargs="+", required=True, metavar="AGF1")
    p.add_argument("--rdms", nargs="+", required=True, metavar="AGR1")
    p.add_argument(
        "--resolution",
        choices=[r.value for r in MaskResolution],
        default=MaskResolution.PER_CHANNEL.value,
    )
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=40)
    p.add_argument("--loss", choices=["l1", "mse"], default="l1")
    p.add_argument("--weights", choices=["on", "off"], default="on",
                   help="reliability weighting of pair losses")
    p.add_argument("--meg-sampling", choices=["on", "off"], default="on",
                   help="Gaussian timestamp sampling for MEG stacks")
    p.add_argument("--val-frac", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--log", default=None, metavar="TSV",
                   help="training log path (default: <out>.log)")
    return p


def _add_predict(sub):
    p = sub.add_parser("predict", help="write the predicted RDM for a set of images")
    p.add_argument("--features", required=True, metavar="AGF1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", default="all",
                   help="comma-separated image ids, or 'all'")
    p.add_argument("--out", required=True, metavar="AGR1")
    return p


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a checkpoint against an RDM stack")
    p.add_argument("--features", required=True, metavar="AGF1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rdms", required=True, metavar="AGR1")
    p.add_argument("--slice", default=None,
                   help="slice index (integer) or timestamp (float); default: "
                        "slice nearest the interval midpoint")
    p.add_argument("--ceiling", type=float, default=None,
                   help="override the leave-one-out noise ceiling")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    return p


def _add_inspect(sub):
    p = sub.add_parser("inspect-mask", help="per-stage mask statistics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--format", choices=["text", "csv"], default="text")
    return p


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--corrupt", action="store_true",
                   help="negative control: corrupt one gradient per instance")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsamask",
        description="Learned feature-stage masking for RDM reconstruction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_predict(sub)
    _add_eval(sub)
    _add_inspect(sub)
    _add_gradcheck(sub)
    return parser


def _cmd_train(args) -> int:
    features = [io.read_features(p) for p in args.features]
    stacks = [io.read_rdms(p) for p in args.rdms]
    if not any(s.is_meg for s in stacks) and _ONOFF[args.meg_sampling]:
        print("warning: --meg-sampling on, but no MEG stack present", file=sys.stderr)
    config = training.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        loss_kind=args.loss,
        use_reliability_weights=_ONOFF[args.weights],
        resolution=MaskResolution(args.resolution),
        val_fraction=args.val_frac,
        seed=args.seed,
        meg_gaussian_sampling=_ONOFF[args.meg_sampling],
    )
    fingerprint = io.fingerprint_paths(list(args.features) + list(args.rdms))
    log_path = args.log if args.log is not None else args.out + ".log"
    result = training.train(
        features, stacks, config, fingerprint=fingerprint, log_path=log_path
    )
    io.save_checkpoint(result.best, args.out)
    if result.history:
        last = result.history[-1]
        print(f"final train loss: {last.train_loss!r}")
        print(f"final val loss:   {last.val_loss!r}")
    else:
        print("no epochs run; identity checkpoint written")
    print(f"best epoch: {result.best_epoch} (val loss {result.best_val_loss!r})")
    print(f"checkpoint: {args.out}")
    print(f"log: {log_path}")
    return 0


def _load_for_features(args):
    features = io.read_features(args.features)
    ckpt = io.load_checkpoint(args.ckpt, features=features)
    return features, ckpt


def _cmd_predict(args) -> int:
    features, ckpt = _load_for_features(args)
    if args.images.strip() == "all":
        ids = list(features.image_ids)
    else:
        ids = [s for s in (t.strip() for t in args.images.split(",")) if s]
    subset = [features.index_of(i) for i in ids]
    rdm = similarity.predicted_rdm(features, ckpt.mask, subset)
    stack = RdmStack(ids, "predicted", [(None, rdm[None, :, :].astype(np.float32))])
    io.write_rdms(stack, args.out)
    print(f"wrote {len(ids)}x{len(ids)} predicted RDM to {args.out}")
    return 0


def _resolve_slice(stack: RdmStack, spec: str | None) -> int:
    if spec is None:
        return stack.midpoint_slice()
    try:
        index = int(spec)
    except ValueError:
        try:
            t = float(spec)
        except ValueError:
            raise DataError(f"--slice must be an index or a timestamp, got {spec!r}")
        return stack.nearest_slice(t)
    if not 0 <= index < stack.n_slices:
        raise DataError(
            f"slice index {index} out of range (stack has {stack.n_slices})"
        )
    return index


def _cmd_eval(args) -> int:
    features, ckpt = _load_for_features(args)
    stack = io.read_rdms(args.rdms)
    subset = [features.index_of(i) for i in stack.image_ids]
    slice_index = _resolve_slice(stack, args.slice)
    rdm = similarity.predicted_rdm(features, ckpt.mask, subset)
    report = similarity.score(
        rdm, stack, slice_index, ceiling_override=args.ceiling
    )
    if args.format == "csv":
        print("metric,value")
        for k, r2 in enumerate(report.per_subject_r2):
            print(f"subject_{k}_r2,{r2!r}")
        print(f"noise_ceiling,{report.noise_ceiling!r}")
        print(f"normalized_score_percent,{report.normalized_score_percent!r}")
    else:
        for k, r2 in enumerate(report.per_subject_r2):
            print(f"subject {k:2d} r2: {r2:.6f}")
        print(f"noise ceiling:    {report.noise_ceiling:.6f}")
        print(f"normalized score: {report.normalized_score_percent:.2f}%")
    return 0


def mask_stage_summary(mask: Mask):
    """Per-stage (mean, ci_low, ci_high, count) of the coefficients.

    PER_FEATURE masks are collapsed to per-channel means first; the CI is the
    normal approximation mean +/- 1.96 * std / sqrt(count), empty when a stage
    has a single value.
    """
    rows = []
    for spec, coeffs in zip(mask.stages, mask.coefficients):
        if mask.resolution is MaskResolution.PER_FEATURE:
            values = coeffs.reshape(spec.channels, spec.spatial).mean(axis=1)
        else:
            values = coeffs.astype(np.float64)
        mean = float(np.mean(values))
        if values.shape[0] >= 2:
            half = float(1.96 * np.std(values, ddof=1) / np.sqrt(values.shape[0]))
            ci = (mean - half, mean + half)
        else:
            ci = None
        rows.append((spec.name, mean, ci, values.shape[0]))
    return rows


def _cmd_inspect(args) -> int:
    ckpt = io.load_checkpoint(args.ckpt)
    rows = mask_stage_summary(ckpt.mask)
    if args.format == "csv":
        print("stage,mean,ci_low,ci_high,count")
        for name, mean, ci, count in rows:
            lo = repr(ci[0]) if ci else ""
            hi = repr(ci[1]) if ci else ""
            print(f"{name},{mean!r},{lo},{hi},{count}")
    else:
        for name, mean, ci, count in rows:
            span = f"[{ci[0]:.4f}, {ci[1]:.4f}]" if ci else "[--]"
            print(f"{name}: mean {mean:.4f}  95% CI {span}  ({count} values)")
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_gradient_check(
        seed=args.seed, instances=args.instances, corrupt=args.corrupt
    )
    status = "PASS" if report.passed else "FAIL"
    print(
        f"{status}: {report.instances} instances, max relative error "
        f"{report.max_rel_error:.3e} (tolerance {report.tolerance:.1e})"
    )
    if report.failures:
        print(f"failing instances: {report.failures}")
    return 0 if report.passed else 1


_HANDLERS = {
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "inspect-mask": _cmd_inspect,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
