"""Replicated experiments, ablation suites, alpha/beta sweeps and their reports.

Every replication r draws its own dataset seed from ``(base_seed, "replication", r)``
and its split and training seeds below that, so a replication's numbers do not
depend on how many workers ran or in which order. All methods within a
replication share the dataset, the split and the training seed.
"""

from __future__ import annotations

import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import __version__
from .datagen import SemiSynSpec, SynSpec, build_semi_synthetic, generate_synthetic, read_dataset
from .errors import CivBalanceError, ConfigurationError
from .estimator import ABLATIONS, CivDataset, TrainConfig, run_cbrl_civ
from .rng import derive_seed, substream

FAILURE_CEILING = 0.2
SWEEP_GRID = (0.0, 0.0001, 0.001, 0.01, 0.1, 1.0, 10.0)
REPORT_FORMAT = "civbalance-report/1"

DEVIATION_NOTES = (
    "std is the sample standard deviation (n-1)",
    "errors are |ACE_hat - mean(Y1 - Y0)| over the same rows (training rows for within, test rows for out)",
    "each replication regenerates the dataset from its own seed",
    "validation rows, when present, are used only to early-stop the outcome stage",
    "covariates are standardized once on the training rows in place of batch normalization",
    "balance uses the Sinkhorn divergence (squared euclidean cost, eps=0.5) on unit-norm representations",
    "balance terms are evaluated on the first 128 rows of each 256-row mini-batch",
    "semi-synthetic outcomes reuse the synthetic response surface over the selected columns",
)


class ExperimentError(CivBalanceError, RuntimeError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


def ace_error(estimate: float, truth: float) -> float:
    if not np.isfinite(truth):
        raise ValueError("true ACE must be finite")
    return abs(float(estimate) - float(truth))


def _parse_split(split):
    fr = tuple(float(x) for x in split)
    if len(fr) not in (2, 3) or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigurationError(f"split must be 2 or 3 positive fractions summing to 1, got {split}")
    return fr


def split_dataset(data: CivDataset, split, seed):
    """Seeded shuffle, then contiguous parts: (train, test) or (train, val, test)."""
    fr = _parse_split(split)
    perm = substream(seed, "split").permutation(data.n)
    bounds = np.floor(np.cumsum(fr)[:-1] * data.n + 1e-9).astype(int)
    parts = np.split(perm, bounds)
    if any(len(p) == 0 for p in parts):
        raise ConfigurationError(f"split {fr} of {data.n} rows leaves an empty part")
    return tuple(data.take(p) for p in parts)


@dataclass
class ExperimentConfig:
    dataset: Union[SynSpec, SemiSynSpec, str]
    methods: tuple = ("full",)
    train: dict = field(default_factory=dict)
    replications: int = 30
    split: tuple = (0.7, 0.3)
    base_seed: int = 0
    output_path: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods or any(m not in ABLATIONS for m in self.methods):
            raise ConfigurationError(f"methods must be drawn from {ABLATIONS}")
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        self.split = _parse_split(self.split)
        bad = (set(self.train) - set(TrainConfig.__dataclass_fields__)) | ({"seed", "ablation"} & set(self.train))
        if bad:
            raise ConfigurationError(f"invalid train overrides: {sorted(bad)}")

    @property
    def setting(self) -> str:
        if isinstance(self.dataset, str):
            return os.path.basename(self.dataset).replace(".manifest.json", "")
        return self.dataset.name

    @property
    def semi_synthetic(self) -> bool:
        return not isinstance(self.dataset, SynSpec)

    def echo(self) -> dict:
        """Everything that determines the numbers (worker count and output path excluded)."""
        if isinstance(self.dataset, str):
            ds = {"kind": "file", "path": os.path.basename(self.dataset)}
        else:
            ds = {"kind": type(self.dataset).__name__, **asdict(self.dataset)}
            if "covariate_table_path" in ds:
                ds["covariate_table_path"] = os.path.basename(ds["covariate_table_path"])
                ds["drop"] = list(ds["drop"])
        echo = {"dataset": ds, "methods": list(self.methods), "train": dict(sorted(self.train.items())),
                "replications": self.replications, "split": list(self.split),
                "base_seed": int(self.base_seed)}
        return json.loads(json.dumps(echo))  # plain JSON types, so reports round-trip exactly


@dataclass
class ReportRow:
    setting: str
    method: str
    alpha: float
    beta: float
    within_mean: Optional[float]
    within_std: Optional[float]
    out_mean: Optional[float]
    out_std: Optional[float]
    within_errors: list
    out_errors: list
    ace_within: list
    ace_out: list
    seeds: list
    failed: list = field(default_factory=list)
    flags: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    rows: list
    config: dict
    version: str = __version__
    format: str = REPORT_FORMAT
    notes: list = field(default_factory=lambda: list(DEVIATION_NOTES))
    semi_synthetic: bool = False
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        d = dict(d)
        d["rows"] = [ReportRow(**r) for r in d["rows"]]
        return cls(**d)

    def row(self, method: str, alpha: Optional[float] = None) -> ReportRow:
        for r in self.rows:
            if r.method == method and (alpha is None or r.alpha == alpha):
                return r
        raise KeyError((method, alpha))


# --- execution -------------------------------------------------------------------


def _load(cfg: ExperimentConfig, rep_seed: int) -> CivDataset:
    ds = cfg.dataset
    if isinstance(ds, SynSpec):
        return generate_synthetic(replace(ds, seed=rep_seed))
    if isinstance(ds, SemiSynSpec):
        return build_semi_synthetic(replace(ds, seed=rep_seed))[0]
    return read_dataset(ds)


def _replication(cfg: ExperimentConfig, r: int) -> dict:
    """All methods of one replication; failures are captured per method."""
    rep_seed = derive_seed(cfg.base_seed, "replication", r)
    out = {"index": r, "seed": rep_seed, "methods": {}}
    try:
        data = _load(cfg, rep_seed)
        parts = split_dataset(data, cfg.split, rep_seed)
    except Exception as exc:  # isolate the replication
        for m in cfg.methods:
            out["methods"][m] = {"error": _describe(exc)}
        return out
    train, test = parts[0], parts[-1]
    val = parts[1] if len(parts) == 3 else None
    for m in cfg.methods:
        try:
            tc = TrainConfig(seed=derive_seed(rep_seed, "train"), ablation=m, **cfg.train)
            est = run_cbrl_civ(train, tc, test=test, val=val)
            if est.within_error is None or est.out_error is None:
                raise ConfigurationError("dataset has no ground truth; errors cannot be computed")
            out["methods"][m] = {"ace_within": est.ace, "ace_out": est.ace_out,
                                 "within": est.within_error, "out": est.out_error}
        except Exception as exc:
            out["methods"][m] = {"error": _describe(exc)}
    return out


def _describe(exc) -> str:
    return "".join(traceback.format_exception_only(type(exc), exc)).strip()


def _mean_std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    a = np.array(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _run_all(cfg: ExperimentConfig):
    idx = list(range(cfg.replications))
    if cfg.threads == 1 or cfg.replications == 1:
        results = [_replication(cfg, r) for r in idx]
    else:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, cfg.replications)) as pool:
            results = list(pool.map(_replication, [cfg] * len(idx), idx))
    return sorted(results, key=lambda res: res["index"])


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Replicate, train every method, aggregate, and write the report if an output path is set.

    Failed replications are recorded and skipped in the aggregates; if 20% or
    more of them fail for any method an ExperimentError (carrying the report)
    is raised after writing.
    """
    results = _run_all(cfg)
    base = TrainConfig(**cfg.train)
    rows, failures = [], []
    for m in cfg.methods:
        res = [r["methods"][m] for r in results]
        failed = [r["index"] for r, x in zip(results, res) if "error" in x]
        for r, x in zip(results, res):
            if "error" in x:
                failures.append({"method": m, "replication": r["index"], "error": x["error"]})

        def col(key):
            return [x.get(key) for x in res]

        wm, ws = _mean_std(col("within"))
        om, os_ = _mean_std(col("out"))
        flags = []
        if cfg.replications - len(failed) == 1:
            flags.append("single replication: std reported as 0")
        if failed:
            flags.append(f"{len(failed)} failed replication(s) excluded from aggregates")
        tc = replace(base, ablation=m)
        rows.append(ReportRow(cfg.setting, m, tc.effective_alpha, tc.effective_beta, wm, ws, om, os_,
                              col("within"), col("out"), col("ace_within"), col("ace_out"),
                              [r["seed"] for r in results], failed, flags))
    report = ExperimentReport(rows, cfg.echo(), semi_synthetic=cfg.semi_synthetic, failures=failures)
    if cfg.output_path:
        write_report(report, cfg.output_path)
    worst = max(len(r.failed) for r in rows) / cfg.replications
    if worst >= FAILURE_CEILING:
        raise ExperimentError(f"{worst:.0%} of replications failed (ceiling {FAILURE_CEILING:.0%})", report)
    return report


def sweep_alpha_beta(cfg: ExperimentConfig, grid=SWEEP_GRID) -> ExperimentReport:
    """One run_experiment per grid value g with alpha = beta = g; one row per value."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ConfigurationError("grid must be non-empty")
    rows, failures = [], []
    for g in grid:
        sub = replace(cfg, train={**cfg.train, "alpha": g, "beta": g}, output_path=None)
        rep = run_experiment(sub)
        rows.extend(rep.rows)
        failures.extend({**f, "grid": g} for f in rep.failures)
    echo = cfg.echo()
    echo["grid"] = grid
    report = ExperimentReport(rows, echo, semi_synthetic=cfg.semi_synthetic, failures=failures)
    if cfg.output_path:
        write_report(report, cfg.output_path)
    return report


# --- report files --------------------------------------------------------------------


def summary_path(path: str) -> str:
    stem = path[:-5] if path.endswith(".json") else path
    return stem + ".summary.csv"


def _fmt(mean, std, digits):
    if mean is None:
        return "failed"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def summary_table(report: ExperimentReport) -> str:
    digits = 3 if report.semi_synthetic else 2
    lines = ["setting,method,alpha,beta,within,out"]
    for r in report.rows:
        lines.append(f"{r.setting},{r.method},{r.alpha:g},{r.beta:g},"
                     f"{_fmt(r.within_mean, r.within_std, digits)},{_fmt(r.out_mean, r.out_std, digits)}")
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, path: str):
    """Write the JSON report at ``path`` and the summary table beside it."""
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"report directory does not exist: {directory}")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        with open(summary_path(path), "w", encoding="utf-8") as fh:
            fh.write(summary_table(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_report(path: str) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        return ExperimentReport.from_dict(json.load(fh))
