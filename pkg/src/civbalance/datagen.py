"""Synthetic and semi-synthetic CIV datasets with known potential outcomes.

Confounders (C, U) are jointly normal with covariance 0.95 I + 0.05 (all ones).
The instrument and treatment follow logistic assignment,

    P(S=1 | C, U)    = sigmoid(sum C + sum U)
    P(W=1 | S, C, U) = sigmoid(S * sum C + sum C + sum U)

and the potential outcomes are Y1 = (sum C^2 + sum U^2) / (p+q) and
Y0 = (sum C + sum U) / (p+q), so E[Y1 - Y0] = 1. U is used for generation and
then kept only with the ground truth.

Semi-synthetic data reuse these formulas over p+q standardized columns drawn
at random from a real covariate table.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, IngestionError
from .estimator import CivDataset
from .rng import substream

STREAMS = ("confounders", "instrument", "treatment", "noise", "selection")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SynSpec:
    p: int
    q: int
    n: int
    seed: int = 0
    noise_sd: float = 0.0

    def __post_init__(self):
        if self.p < 1 or self.q < 0 or self.n < 2:
            raise ConfigurationError(f"need p >= 1, q >= 0, n >= 2; got p={self.p} q={self.q} n={self.n}")
        if not self.noise_sd >= 0:
            raise ConfigurationError("noise_sd must be >= 0")

    @property
    def name(self) -> str:
        return f"Syn-{self.p}-{self.q}"


@dataclass(frozen=True)
class SemiSynSpec:
    covariate_table_path: str
    p: int
    q: int
    seed: int = 0
    selection: str = "seeded-random"
    drop: tuple = ()
    noise_sd: float = 0.0

    def __post_init__(self):
        if self.p < 1 or self.q < 0:
            raise ConfigurationError("need p >= 1 and q >= 0")
        if self.selection != "seeded-random":
            raise ConfigurationError(f"unknown selection rule {self.selection!r}")
        object.__setattr__(self, "drop", tuple(self.drop))

    @property
    def name(self) -> str:
        stem = os.path.splitext(os.path.basename(self.covariate_table_path))[0]
        return f"{stem}-{self.p}-{self.q}"


def make_covariance(d: int) -> np.ndarray:
    if d < 1:
        raise ConfigurationError("dimension must be >= 1")
    return 0.95 * np.eye(d) + 0.05 * np.ones((d, d))


def sample_confounders(spec: SynSpec):
    """(C, U): rows of N(0, make_covariance(p+q)) via its Cholesky factor."""
    L = np.linalg.cholesky(make_covariance(spec.p + spec.q))
    X = substream(spec.seed, "confounders").standard_normal((spec.n, spec.p + spec.q)) @ L.T
    return X[:, :spec.p], X[:, spec.p:]


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _row_sum(M):
    return np.zeros(M.shape[0]) if M.shape[1] == 0 else M.sum(axis=1)


def instrument_prob(C, U):
    return _sigmoid(_row_sum(C) + _row_sum(U))


def treatment_prob(S, C, U):
    sc = _row_sum(C)
    return _sigmoid(S * sc + sc + _row_sum(U))


def _bernoulli(prob, rng):
    return (rng.random(prob.shape[0]) < prob).astype(np.float64)


def gen_instrument(C, U, seed) -> np.ndarray:
    return _bernoulli(instrument_prob(C, U), substream(seed, "instrument"))


def gen_treatment(S, C, U, seed) -> np.ndarray:
    return _bernoulli(treatment_prob(S, C, U), substream(seed, "treatment"))


def gen_outcome(W, C, U, noise_sd: float = 0.0, seed=0):
    """(Y, Y1, Y0) on the quadratic-vs-linear response surface."""
    d = C.shape[1] + U.shape[1]
    y1 = (_row_sum(C ** 2) + _row_sum(U ** 2)) / d
    y0 = (_row_sum(C) + _row_sum(U)) / d
    y = np.where(W == 1, y1, y0)
    if noise_sd > 0:
        y = y + noise_sd * substream(seed, "noise").standard_normal(y.shape[0])
    return y, y1, y0


def _assemble(C, U, seed, noise_sd, columns=None) -> CivDataset:
    S = gen_instrument(C, U, seed)
    W = gen_treatment(S, C, U, seed)
    Y, Y1, Y0 = gen_outcome(W, C, U, noise_sd, seed)
    return CivDataset(C, S, W, Y, Y1=Y1, Y0=Y0, U=U, columns=columns)


def generate_synthetic(spec: SynSpec) -> CivDataset:
    C, U = sample_confounders(spec)
    return _assemble(C, U, spec.seed, spec.noise_sd)


def check_positivity(C, U, S) -> bool:
    """Every assignment probability lies inside [PROB_FLOOR, 1 - PROB_FLOOR]."""
    ps, pw = instrument_prob(C, U), treatment_prob(S, C, U)
    return bool(np.all((ps >= PROB_FLOOR) & (ps <= 1 - PROB_FLOOR)) and
                np.all((pw >= PROB_FLOOR) & (pw <= 1 - PROB_FLOOR)))


# --- covariate tables and semi-synthetic data ---------------------------------


def read_covariate_table(path, drop=(), delimiter=None):
    """Read a delimited numeric table: header row of names, one sample per row.

    Columns named in ``drop`` are skipped. Any other cell that does not parse as a
    finite number is an IngestionError giving its row (1-based, header = row 1)
    and column name. The delimiter is sniffed from the header when not given.
    """
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read covariate table {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise IngestionError("covariate table is empty", row=1)
    if delimiter is None:
        header = lines[0]
        delimiter = max([",", "\t", ";", " "], key=header.count)
    rows = list(csv.reader(lines, delimiter=delimiter, skipinitialspace=True))
    names = [h.strip() for h in rows[0]]
    if len(set(names)) != len(names):
        raise IngestionError("duplicate column names in header", row=1)
    unknown = set(drop) - set(names)
    if unknown:
        raise IngestionError(f"drop-list names not in header: {sorted(unknown)}", row=1)
    keep = [j for j, name in enumerate(names) if name not in set(drop)]
    data = []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(names):
            raise IngestionError(f"expected {len(names)} cells, found {len(row)}", row=r)
        vals = []
        for j in keep:
            try:
                v = float(row[j])
            except ValueError:
                raise IngestionError(f"non-numeric cell {row[j]!r}", row=r, column=names[j]) from None
            if not np.isfinite(v):
                raise IngestionError(f"non-finite cell {row[j]!r}", row=r, column=names[j])
            vals.append(v)
        data.append(vals)
    if not data:
        raise IngestionError("covariate table has no data rows", row=2)
    return [names[j] for j in keep], np.array(data, dtype=np.float64)


def standardize_columns(X):
    sd = X.std(axis=0)
    if np.any(sd == 0):
        raise IngestionError("constant column cannot be standardized", column=int(np.argmin(sd)))
    return (X - X.mean(axis=0)) / sd


def build_semi_synthetic(spec: SemiSynSpec):
    """Graft S, W and outcomes onto randomly chosen real covariates.

    Returns (dataset, selected column names); the first p names are observed,
    the rest are hidden confounders.
    """
    names, X = read_covariate_table(spec.covariate_table_path, spec.drop)
    if spec.p + spec.q > len(names):
        raise ConfigurationError(f"p+q={spec.p + spec.q} exceeds the {len(names)} available columns")
    if X.shape[0] < 2:
        raise ConfigurationError("need at least two rows")
    pick = substream(spec.seed, "selection").choice(len(names), spec.p + spec.q, replace=False)
    chosen = [names[j] for j in pick]
    Z = standardize_columns(X[:, pick])
    C, U = Z[:, :spec.p], Z[:, spec.p:]
    return _assemble(C, U, spec.seed, spec.noise_sd, columns=chosen[:spec.p]), chosen


# --- two-file dataset format ----------------------------------------------------


@dataclass
class Manifest:
    name: str
    spec: dict
    seed: int
    substreams: list
    observed_path: str
    truth_path: str
    true_ace: float
    n_rows: int
    columns: list
    hidden_columns: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def write_dataset(data: CivDataset, directory, name, spec, seed, hidden_columns=(), notes=()):
    """Write ``name.csv`` (observed C, S, W, Y), ``name.truth.csv`` and ``name.manifest.json``."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"output directory does not exist: {directory}")
    obs = os.path.join(directory, f"{name}.csv")
    truth = os.path.join(directory, f"{name}.truth.csv")
    cols = [f"C_{j + 1}" for j in range(data.p)]
    np.savetxt(obs, np.column_stack([data.C, data.S, data.W, data.Y]), delimiter=",",
               header=",".join(cols + ["S", "W", "Y"]), comments="", fmt="%.17g")
    u = data.U if data.U is not None else np.zeros((data.n, 0))
    ucols = [f"U_{j + 1}" for j in range(u.shape[1])]
    np.savetxt(truth, np.column_stack([data.Y1, data.Y0, u]), delimiter=",",
               header=",".join(["Y1", "Y0"] + ucols), comments="", fmt="%.17g")
    man = Manifest(name=name, spec=spec, seed=int(seed), substreams=list(STREAMS),
                   observed_path=os.path.basename(obs), truth_path=os.path.basename(truth),
                   true_ace=data.true_ace, n_rows=data.n, columns=list(data.columns),
                   hidden_columns=list(hidden_columns), notes=list(notes))
    mpath = os.path.join(directory, f"{name}.manifest.json")
    with open(mpath, "w") as fh:
        json.dump(asdict(man), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return mpath


def read_dataset(manifest_path, with_truth: bool = True) -> CivDataset:
    """Load a dataset written by ``write_dataset``; ground truth only when asked for."""
    with open(manifest_path) as fh:
        man = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    obs = np.loadtxt(os.path.join(base, man["observed_path"]), delimiter=",", skiprows=1, ndmin=2)
    C, S, W, Y = obs[:, :-3], obs[:, -3], obs[:, -2], obs[:, -1]
    if not with_truth:
        return CivDataset(C, S, W, Y, columns=man["columns"])
    tr = np.loadtxt(os.path.join(base, man["truth_path"]), delimiter=",", skiprows=1, ndmin=2)
    return CivDataset(C, S, W, Y, Y1=tr[:, 0], Y0=tr[:, 1], U=tr[:, 2:], columns=man["columns"])
