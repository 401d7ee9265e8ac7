"""Three-stage CIV estimator with confounding-balanced representations.

Stage 1 fits P(S=1 | C) (network phi_mu) and draws S_hat from it.
Stage 2 fits P(W=1 | S_hat, C) (network phi_nu).
Stage 3 learns a representation Z = psi_theta(C) and two outcome heads
f_1, f_0 on Z by minimizing

    L_Y + alpha * D(Z weighted by P(w | s_hat, c)) + beta * D(Z weighted by P(s_hat | c)) + l2,

where L_Y is the squared error of the treatment-probability mixture
f_1 p + f_0 (1 - p) against Y and D is the Sinkhorn divergence. The ACE is
the mean of f_1 - f_0 over the rows of interest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffkit as dk
from .balance import SinkhornConfig, ipm_term, safe_ipm_term
from .diffkit import MlpSpec, ParamSet, Tensor
from .errors import ConfigurationError, DegenerateGroupError, ShapeError
from .rng import derive_seed, substream

ABLATIONS = ("full", "no_civ_balance", "no_balance")
# Training-time balance solver; the module default in balance stays at eps=0.1.
TRAIN_SINKHORN = SinkhornConfig(epsilon=0.5, max_iter=1000, stop_tol=1e-4)


# --- data ------------------------------------------------------------------


@dataclass
class CivDataset:
    """Observed columns (C, S, W, Y) plus optional ground truth."""

    C: np.ndarray
    S: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    Y1: Optional[np.ndarray] = None
    Y0: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    columns: Optional[list] = None

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim == 1:
            self.C = self.C[:, None]
        if self.C.ndim != 2:
            raise ShapeError("C must be a 2-D matrix")
        n = self.C.shape[0]
        self.S = np.asarray(self.S, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        for name in ("S", "W", "Y"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have length {n}")
        for name in ("S", "W"):
            v = getattr(self, name)
            if not np.all((v == 0) | (v == 1)):
                raise ValueError(f"{name} must be binary")
        if (self.Y1 is None) != (self.Y0 is None):
            raise ValueError("Y1 and Y0 must be given together")
        if self.Y1 is not None:
            self.Y1 = np.asarray(self.Y1, dtype=np.float64)
            self.Y0 = np.asarray(self.Y0, dtype=np.float64)
            if self.Y1.shape != (n,) or self.Y0.shape != (n,):
                raise ShapeError(f"Y1 and Y0 must have length {n}")
        if self.U is not None:
            self.U = np.asarray(self.U, dtype=np.float64).reshape(n, -1)
        if not np.all(np.isfinite(self.C)) or not np.all(np.isfinite(self.Y)):
            raise ValueError("C and Y must be finite")
        if self.columns is None:
            self.columns = [f"C_{j + 1}" for j in range(self.C.shape[1])]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.C.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.Y1 is not None

    @property
    def true_ace(self) -> Optional[float]:
        return float(np.mean(self.Y1 - self.Y0)) if self.has_truth else None

    def take(self, idx) -> "CivDataset":
        idx = np.asarray(idx)

        def pick(v):
            return None if v is None else v[idx]

        return CivDataset(self.C[idx], self.S[idx], self.W[idx], self.Y[idx],
                          pick(self.Y1), pick(self.Y0), pick(self.U), list(self.columns))

    def with_C(self, C) -> "CivDataset":
        return replace(self, C=np.asarray(C, dtype=np.float64), columns=list(self.columns))


# --- configuration and results ----------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    civ_lr: float = 0.05
    treat_lr: float = 0.05
    outcome_lr: float = 0.0005
    epochs_per_stage: int = 300
    alpha: float = 0.1
    beta: float = 0.1
    l2_lambda: float = 1e-4
    repr_dim: int = 16
    hidden_dims: tuple = (32, 32)
    seed: int = 0
    ablation: str = "full"
    batch_size: int = 256
    ipm_batch: int = 128
    patience: int = 30
    min_delta: float = 1e-6
    resample_s_hat: bool = False
    sinkhorn: SinkhornConfig = TRAIN_SINKHORN

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("alpha", "beta", "l2_lambda"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v!r}")
        for name in ("civ_lr", "treat_lr", "outcome_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.epochs_per_stage < 0 or self.patience < 1:
            raise ConfigurationError("epochs_per_stage must be >= 0 and patience >= 1")
        if self.repr_dim < 1 or self.batch_size < 1 or self.ipm_batch < 2:
            raise ConfigurationError("repr_dim and batch_size must be >= 1, ipm_batch >= 2")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.ablation == "no_balance" else float(self.alpha)

    @property
    def effective_beta(self) -> float:
        return float(self.beta) if self.ablation == "full" else 0.0


@dataclass
class ModelBundle:
    civ_spec: MlpSpec
    treat_spec: MlpSpec
    repr_spec: MlpSpec
    head_spec: MlpSpec
    civ_params: ParamSet
    treat_params: ParamSet
    repr_params: ParamSet
    head0_params: ParamSet
    head1_params: ParamSet
    c_mean: np.ndarray
    c_scale: np.ndarray

    def standardize(self, C):
        return (np.asarray(C, dtype=np.float64) - self.c_mean) / self.c_scale


@dataclass
class AceEstimate:
    ace: float
    ace_out: Optional[float] = None
    within_error: Optional[float] = None
    out_error: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)


# --- network helpers ----------------------------------------------------------


def network_specs(p: int, cfg: TrainConfig):
    """(civ, treat, repr, head) specs; init seeds are substreams of cfg.seed."""
    h = cfg.hidden_dims

    def seed(name):
        return derive_seed(cfg.seed, "init", name)

    return (MlpSpec(p, h, 1, "sigmoid", seed("civ")),
            MlpSpec(p + 1, h, 1, "sigmoid", seed("treat")),
            MlpSpec(p, h, cfg.repr_dim, "identity", seed("repr")),
            MlpSpec(cfg.repr_dim, h, 1, "identity", seed("head")))


def spec_of(params: ParamSet, output_activation: str) -> MlpSpec:
    """Recover the architecture of an MLP from its parameter shapes."""
    n_layers = sum(1 for k in params if dk.is_weight(k))
    dims = [np.shape(params[f"layer{k}.W"]) for k in range(n_layers)]
    return MlpSpec(dims[0][0], tuple(d[1] for d in dims[:-1]), dims[-1][1], output_activation)


def _prob(params, C):
    return dk.mlp_forward(params, spec_of(params, "sigmoid"), C)[:, 0]


def _sub(params, prefix):
    """View of the entries under ``prefix.`` with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _join(**parts):
    out = ParamSet()
    for prefix, ps in parts.items():
        for k, v in ps.items():
            out[f"{prefix}.{k}"] = v
    return out


def represent(repr_params, C, spec: Optional[MlpSpec] = None):
    """Z = psi(C), each row scaled to unit euclidean norm (a Tensor)."""
    spec = spec or spec_of(repr_params, "identity")
    return dk.row_normalize(dk.mlp_apply(repr_params, spec, C))


def bce(prob, target):
    """Mean binary cross-entropy of clamped probabilities (a Tensor)."""
    t = np.asarray(target, dtype=np.float64)[:, None]
    ll = dk.add(dk.mul(dk.log(prob), t), dk.mul(dk.log(dk.sub(1.0, prob)), 1.0 - t))
    return dk.scale(dk.mean_all(ll), -1.0)


def civ_loss(params, spec: MlpSpec, C, S):
    """L_S: cross-entropy of S given C under phi_mu."""
    return bce(dk.mlp_apply(params, spec, C), S)


def treatment_inputs(s, C):
    return np.column_stack([np.asarray(s, dtype=np.float64), np.asarray(C, dtype=np.float64)])


def treatment_loss(params, spec: MlpSpec, s_hat, C, W):
    """L_W: cross-entropy of W given (S_hat, C) under phi_nu."""
    return bce(dk.mlp_apply(params, spec, treatment_inputs(s_hat, C)), W)


# --- generic training loop -------------------------------------------------------


def _train(params: ParamSet, objective, n: int, cfg: TrainConfig, stage: str, lr: float,
           optimizer: str, monitor=None):
    """Mini-batch training with plateau early stopping; returns the best parameters seen.

    ``objective(leaves, idx, epoch)`` builds the batch loss. The stopping signal is
    ``monitor(params)`` when given, otherwise the epoch mean of batch losses.
    """
    if cfg.epochs_per_stage == 0:
        return params.copy(), []
    order_rng = substream(cfg.seed, "batches", stage)
    state = dk.AdamState.zeros(params, lr=lr) if optimizer == "adam" else None
    best, best_params, stale, history = np.inf, params.copy(), 0, []
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs_per_stage):
        perm = order_rng.permutation(n)
        total = 0.0
        starts = range(0, n - bs + 1, bs) if n >= bs else [0]
        for start in starts:
            idx = perm[start:start + bs]
            value, grads = dk.value_and_grad(lambda leaves: objective(leaves, idx, epoch), params, stage)
            total += value
            if state is None:
                params = dk.sgd_step(params, grads, lr)
            else:
                state, params = dk.adam_step(state, params, grads)
        score = monitor(params) if monitor is not None else total / len(starts)
        history.append(score)
        if score < best - cfg.min_delta:
            best, best_params, stale = score, params.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_params, history


# --- stages -----------------------------------------------------------------------


def fit_civ_stage(data: CivDataset, cfg: TrainConfig, spec: Optional[MlpSpec] = None) -> ParamSet:
    """Stage 1: phi_mu fitted to S by SGD on the cross-entropy."""
    spec = spec or network_specs(data.p, cfg)[0]
    C, S = data.C, data.S

    def objective(leaves, idx, epoch):
        return civ_loss(leaves, spec, C[idx], S[idx])

    params, _ = _train(dk.mlp_init(spec), objective, data.n, cfg, "civ", cfg.civ_lr, "sgd")
    return params


def sample_s_hat(civ_params: ParamSet, C, seed, *path) -> np.ndarray:
    """One Bernoulli draw of S_hat per row from phi_mu(C), on a dedicated substream."""
    prob = _prob(civ_params, C)
    return (substream(seed, "s_hat", *path).random(prob.shape[0]) < prob).astype(np.float64)


def _s_hat_for_epoch(civ_params, C, s_hat, cfg, epoch):
    if not cfg.resample_s_hat or civ_params is None:
        return s_hat
    return sample_s_hat(civ_params, C, cfg.seed, "epoch", epoch)


def fit_treatment_stage(data: CivDataset, s_hat, cfg: TrainConfig, spec: Optional[MlpSpec] = None,
                        civ_params: Optional[ParamSet] = None) -> ParamSet:
    """Stage 2: phi_nu fitted to W from (S_hat, C) by SGD on the cross-entropy.

    With ``cfg.resample_s_hat`` and ``civ_params`` given, S_hat is redrawn each epoch.
    """
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.shape != (data.n,):
        raise ShapeError(f"s_hat must have length {data.n}")
    spec = spec or network_specs(data.p, cfg)[1]
    C, W = data.C, data.W

    def objective(leaves, idx, epoch):
        s = _s_hat_for_epoch(civ_params, C, s_hat, cfg, epoch)
        return treatment_loss(leaves, spec, s[idx], C[idx], W[idx])

    params, _ = _train(dk.mlp_init(spec), objective, data.n, cfg, "treatment", cfg.treat_lr, "sgd")
    return params


def treat_prob(treat_params: ParamSet, s, C) -> np.ndarray:
    """P(W=1 | s, c) per row; inputs are concatenated as (s, c)."""
    return _prob(treat_params, treatment_inputs(s, C))


def _outcome_objective(leaves, repr_spec, head_spec, C, Y, p_w, p_s, alpha, beta, l2, sinkhorn,
                       ipm_rows=None, terms=None):
    Z = represent(_sub(leaves, "repr"), C, repr_spec)
    f1 = dk.mlp_apply(_sub(leaves, "head1"), head_spec, Z)
    f0 = dk.mlp_apply(_sub(leaves, "head0"), head_spec, Z)
    pw = p_w[:, None]
    mix = dk.add(dk.mul(f1, pw), dk.mul(f0, 1.0 - pw))
    loss = dk.mean_all(dk.square(dk.sub(Y[:, None], mix)))
    if terms is not None:
        terms["L_Y"] = loss.item()
    Zb = Z if ipm_rows is None else dk.take_rows(Z, ipm_rows)
    sel = slice(None) if ipm_rows is None else ipm_rows
    if alpha > 0:
        d = safe_ipm_term(Zb, p_w[sel], sinkhorn, "treatment balance")
        loss = dk.add(loss, dk.scale(d, alpha))
    if beta > 0:
        d = safe_ipm_term(Zb, p_s[sel], sinkhorn, "instrument balance")
        loss = dk.add(loss, dk.scale(d, beta))
    if l2 > 0:
        loss = dk.add(loss, dk.l2_penalty(leaves, l2))
    return loss


def outcome_loss(bundle: ModelBundle, data: CivDataset, s_hat, cfg: TrainConfig,
                 params: Optional[ParamSet] = None):
    """Full-data stage-3 objective as a Tensor (differentiable in repr and heads).

    ``params`` may carry Tensors keyed ``repr.*``, ``head0.*``, ``head1.*``; by
    default the bundle's arrays are used. The civ and treatment networks are frozen.
    """
    if params is None:
        params = _join(repr=bundle.repr_params, head0=bundle.head0_params, head1=bundle.head1_params)
    p_w = treat_prob(bundle.treat_params, s_hat, data.C)
    p_s = _prob(bundle.civ_params, data.C)
    return _outcome_objective(params, bundle.repr_spec, bundle.head_spec, data.C, data.Y, p_w, p_s,
                              cfg.effective_alpha, cfg.effective_beta, cfg.l2_lambda, cfg.sinkhorn)


def mixture_mse(repr_params, head0, head1, C, Y, p_w) -> float:
    Z = represent(repr_params, C).value
    spec = spec_of(head1, "identity")
    f1 = dk.mlp_forward(head1, spec, Z)[:, 0]
    f0 = dk.mlp_forward(head0, spec, Z)[:, 0]
    return float(np.mean((Y - f1 * p_w - f0 * (1.0 - p_w)) ** 2))


def fit_outcome_stage(data: CivDataset, s_hat, civ_params: ParamSet, treat_params: ParamSet,
                      cfg: TrainConfig, val: Optional[CivDataset] = None, val_s_hat=None):
    """Stage 3: Adam on the balanced mixture objective. Returns (repr, head0, head1).

    Each mini-batch uses its first ``cfg.ipm_batch`` rows for the balance terms.
    When ``val`` is given, early stopping watches the validation mixture error;
    otherwise it watches the epoch-mean training objective.
    """
    _, _, repr_spec, head_spec = network_specs(data.p, cfg)
    params = _join(repr=dk.mlp_init(repr_spec), head0=dk.mlp_init(replace(head_spec, init_seed=derive_seed(cfg.seed, "init", "head0"))),
                   head1=dk.mlp_init(replace(head_spec, init_seed=derive_seed(cfg.seed, "init", "head1"))))
    C, Y = data.C, data.Y
    s_hat = np.asarray(s_hat, dtype=np.float64)
    p_s = _prob(civ_params, C)
    p_w_fixed = treat_prob(treat_params, s_hat, C)
    alpha, beta = cfg.effective_alpha, cfg.effective_beta

    def objective(leaves, idx, epoch):
        if cfg.resample_s_hat:
            p_w = treat_prob(treat_params, _s_hat_for_epoch(civ_params, C, s_hat, cfg, epoch), C)
        else:
            p_w = p_w_fixed
        rows = np.arange(min(cfg.ipm_batch, len(idx)))
        return _outcome_objective(leaves, repr_spec, head_spec, C[idx], Y[idx], p_w[idx], p_s[idx],
                                  alpha, beta, cfg.l2_lambda, cfg.sinkhorn, ipm_rows=rows)

    monitor = None
    if val is not None:
        vs = sample_s_hat(civ_params, val.C, cfg.seed, "validation") if val_s_hat is None else val_s_hat
        vp = treat_prob(treat_params, vs, val.C)

        def monitor(ps):
            return mixture_mse(_sub(ps, "repr"), _sub(ps, "head0"), _sub(ps, "head1"), val.C, val.Y, vp)

    params, _ = _train(params, objective, data.n, cfg, "outcome", cfg.outcome_lr, "adam", monitor)
    return (ParamSet(_sub(params, "repr")), ParamSet(_sub(params, "head0")), ParamSet(_sub(params, "head1")))


def estimate_ace(repr_params, head0, head1, C) -> float:
    """Mean over the rows of C of f_1(psi(c)) - f_0(psi(c))."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] == 0:
        raise ValueError("estimate_ace needs a non-empty 2-D covariate matrix")
    Z = represent(repr_params, C).value
    spec = spec_of(head1, "identity")
    return float(np.mean(dk.mlp_forward(head1, spec, Z) - dk.mlp_forward(head0, spec, Z)))


# --- whole pipeline ----------------------------------------------------------------


def _standardizer(C):
    mean = C.mean(axis=0)
    sd = C.std(axis=0)
    return mean, np.where(sd > 1e-12, sd, 1.0)


def balance_diagnostics(repr_params, C, p_w, p_s, cfg: TrainConfig, max_rows: int = 512) -> dict:
    """D(S_hat, Z) and D(W_hat, Z) on a fixed subsample of at most ``max_rows`` rows."""
    n = C.shape[0]
    rows = np.sort(substream(cfg.seed, "diagnostics").permutation(n)[:max_rows])
    Z = represent(repr_params, C[rows])
    out = {}
    for key, prob in (("D_S", p_s), ("D_W", p_w)):
        try:
            out[key] = ipm_term(Z, prob[rows], cfg.sinkhorn).item()
        except DegenerateGroupError:
            out[key] = 0.0
    return out


def fit_bundle(data: CivDataset, cfg: TrainConfig, val: Optional[CivDataset] = None):
    """Run the three stages. Returns (bundle, s_hat, diagnostics)."""
    c_mean, c_scale = _standardizer(data.C)
    train = data.with_C((data.C - c_mean) / c_scale)
    vstd = None if val is None else val.with_C((val.C - c_mean) / c_scale)
    civ_spec, treat_spec, repr_spec, head_spec = network_specs(data.p, cfg)

    civ_params = fit_civ_stage(train, cfg, civ_spec)
    s_hat = sample_s_hat(civ_params, train.C, cfg.seed)
    treat_params = fit_treatment_stage(train, s_hat, cfg, treat_spec, civ_params)
    repr_params, head0, head1 = fit_outcome_stage(train, s_hat, civ_params, treat_params, cfg, vstd)

    bundle = ModelBundle(civ_spec, treat_spec, repr_spec, head_spec, civ_params, treat_params,
                         repr_params, head0, head1, c_mean, c_scale)
    p_s = _prob(civ_params, train.C)
    p_w = treat_prob(treat_params, s_hat, train.C)
    diag = {
        "L_S": civ_loss(civ_params, civ_spec, train.C, train.S).item(),
        "L_W": treatment_loss(treat_params, treat_spec, s_hat, train.C, train.W).item(),
        "L_Y": mixture_mse(repr_params, head0, head1, train.C, train.Y, p_w),
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        diag.update(balance_diagnostics(repr_params, train.C, p_w, p_s, cfg))
    return bundle, s_hat, diag


def run_cbrl_civ(data: CivDataset, cfg: TrainConfig, test: Optional[CivDataset] = None,
                 val: Optional[CivDataset] = None) -> AceEstimate:
    """Fit on ``data`` and estimate the ACE on its rows (and on ``test`` rows if given).

    Errors are measured against the mean of Y1 - Y0 over the same rows.
    """
    bundle, _, diag = fit_bundle(data, cfg, val)
    ace = estimate_ace(bundle.repr_params, bundle.head0_params, bundle.head1_params,
                       bundle.standardize(data.C))
    est = AceEstimate(ace=ace, diagnostics=diag)
    if data.has_truth:
        est.within_error = abs(ace - data.true_ace)
    if test is not None:
        est.ace_out = estimate_ace(bundle.repr_params, bundle.head0_params, bundle.head1_params,
                                   bundle.standardize(test.C))
        if test.has_truth:
            est.out_error = abs(est.ace_out - test.true_ace)
    return est
