"""Command line entry point: gen, run, bench, ablate, sweep."""

import os

# Pin BLAS to one thread before numpy loads so results never depend on core count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict  # noqa: E402

from .bench import (SWEEP_GRID, ExperimentConfig, ExperimentError, run_experiment,  # noqa: E402
                    split_dataset, summary_table, sweep_alpha_beta)
from .datagen import SemiSynSpec, SynSpec, build_semi_synthetic, generate_synthetic, write_dataset  # noqa: E402
from .errors import CivBalanceError  # noqa: E402
from .estimator import ABLATIONS, TrainConfig, run_cbrl_civ  # noqa: E402
from .rng import derive_seed  # noqa: E402

SEED_ENV = "CIVBALANCE_SEED"


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--setting", nargs=2, type=int, metavar=("P", "Q"), default=[4, 4],
                        help="observed and hidden confounder counts (Syn-P-Q)")
    common.add_argument("--n", type=int, default=6000, help="samples per synthetic dataset")
    common.add_argument("--seed", type=int, default=None,
                        help=f"base seed (falls back to ${SEED_ENV}, then 0)")
    common.add_argument("--replications", type=int, default=None)
    common.add_argument("--alpha", type=float, default=0.1)
    common.add_argument("--beta", type=float, default=0.1)
    common.add_argument("--ablation", choices=ABLATIONS, default="full")
    common.add_argument("--split", type=_floats, default=None, help="0.7,0.3 or 0.63,0.27,0.10")
    common.add_argument("--out", default=None, help="report path (bench/ablate/sweep) or directory (gen)")
    common.add_argument("--covariates", default=None, help="covariate table for semi-synthetic mode")
    common.add_argument("--drop", default="", help="comma-separated covariate columns to ignore")
    common.add_argument("--data", default=None, help="existing dataset manifest instead of generating")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replications")
    common.add_argument("--epochs", type=int, default=None, help="override epochs per stage")

    ap = argparse.ArgumentParser(prog="civbalance", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write datasets and manifests")
    sub.add_parser("run", parents=[common], help="one training run; prints the estimate")
    sub.add_parser("bench", parents=[common], help="replicated experiment for one method")
    sub.add_parser("ablate", parents=[common], help="full vs no_civ_balance vs no_balance")
    sw = sub.add_parser("sweep", parents=[common], help="alpha = beta grid sweep")
    sw.add_argument("--grid", type=_floats, default=list(SWEEP_GRID))
    return ap


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CivBalanceError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _dataset(args, seed):
    if args.data:
        return args.data
    p, q = args.setting
    if args.covariates:
        drop = tuple(x.strip() for x in args.drop.split(",") if x.strip())
        return SemiSynSpec(args.covariates, p, q, seed, drop=drop)
    return SynSpec(p, q, args.n, seed)


def _train_overrides(args, with_weights=True):
    out = {}
    if with_weights:
        out.update(alpha=args.alpha, beta=args.beta)
    if args.epochs is not None:
        out["epochs_per_stage"] = args.epochs
    return out


def _default_split(args):
    if args.split:
        return tuple(args.split)
    return (0.63, 0.27, 0.10) if args.covariates else (0.7, 0.3)


def _experiment(args, methods, with_weights=True):
    seed = _seed(args)
    reps = args.replications if args.replications is not None else 30
    return ExperimentConfig(_dataset(args, seed), methods, _train_overrides(args, with_weights), reps,
                            _default_split(args), seed, args.out, args.threads)


def _cmd_gen(args):
    seed = _seed(args)
    out = args.out or "."
    reps = args.replications or 1
    for r in range(reps):
        rs = seed if reps == 1 else derive_seed(seed, "replication", r)
        spec = _dataset(args, rs)
        if isinstance(spec, SemiSynSpec):
            data, chosen = build_semi_synthetic(spec)
            hidden = chosen[spec.p:]
            notes = ["outcome surface reused from the synthetic generator"]
        else:
            data, hidden, notes = generate_synthetic(spec), [f"U_{j + 1}" for j in range(spec.q)], []
        name = spec.name if reps == 1 else f"{spec.name}-r{r}"
        sd = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
        print(write_dataset(data, out, name, sd, rs, hidden, notes))


def _cmd_run(args):
    seed = _seed(args)
    spec = _dataset(args, seed)
    if isinstance(spec, str):
        from .datagen import read_dataset
        data = read_dataset(spec)
    elif isinstance(spec, SemiSynSpec):
        data = build_semi_synthetic(spec)[0]
    else:
        data = generate_synthetic(spec)
    parts = split_dataset(data, _default_split(args), seed)
    val = parts[1] if len(parts) == 3 else None
    cfg = TrainConfig(seed=derive_seed(seed, "train"), ablation=args.ablation, **_train_overrides(args))
    est = run_cbrl_civ(parts[0], cfg, test=parts[-1], val=val)
    print(json.dumps(asdict(est), indent=2, sort_keys=True))


def _report(args, report):
    sys.stdout.write(summary_table(report))


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "gen":
            _cmd_gen(args)
        elif args.command == "run":
            _cmd_run(args)
        elif args.command == "bench":
            _report(args, run_experiment(_experiment(args, (args.ablation,))))
        elif args.command == "ablate":
            _report(args, run_experiment(_experiment(args, ABLATIONS)))
        else:
            _report(args, sweep_alpha_beta(_experiment(args, ("full",), with_weights=False), args.grid))
    except ExperimentError as exc:
        if exc.report is not None:
            sys.stdout.write(summary_table(exc.report))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CivBalanceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
