"""Acceptance criteria 1-7. Criteria 1-3 train on Syn-4-4 with n=6000 and take tens of minutes."""

import time

import numpy as np
import pytest

from civbalance import diffkit as dk
from civbalance.balance import SinkhornConfig, WeightedCloud, exact_w1_1d, sinkhorn_divergence
from civbalance.bench import ExperimentConfig, read_report, run_experiment, sweep_alpha_beta
from civbalance.cli import main
from civbalance.datagen import SynSpec, generate_synthetic, make_covariance
from civbalance.diffkit import ParamSet
from civbalance.estimator import (CivDataset, ModelBundle, TrainConfig, _join, civ_loss, network_specs,
                                  outcome_loss, treatment_loss)

SETTING = ["--setting", "4", "4", "--n", "6000"]
REPS = 10


@pytest.fixture(scope="module")
def headline(tmp_path_factory):
    """The literal criterion-1 command; its rows are shared with criteria 2 and 3."""
    path = str(tmp_path_factory.mktemp("acc") / "bench.json")
    start = time.perf_counter()
    code = main(["bench", *SETTING, "--replications", str(REPS), "--out", path])
    return code, read_report(path), time.perf_counter() - start


def _syn_cfg(**kw):
    return ExperimentConfig(SynSpec(4, 4, 6000), replications=REPS, base_seed=0, **kw)


def test_criterion_1_synthetic_headline(headline, criterion):
    code, rep, seconds = headline
    row = rep.row("full")
    criterion(1, code == 0 and row.out_mean <= 0.35,
              f"out-of-sample error {row.out_mean:.3f}±{row.out_std:.3f} over {REPS} replications "
              f"(need <= 0.35), {seconds / 60:.1f} min")


def test_criterion_2_ablation_ordering(headline, criterion):
    # Methods in one replication share data, split and training seed, so the headline's
    # full row is exactly what an ablate run would produce for "full".
    rest = run_experiment(_syn_cfg(methods=("no_civ_balance", "no_balance")))
    full = headline[1].row("full").out_mean
    civ, none = rest.row("no_civ_balance").out_mean, rest.row("no_balance").out_mean
    ok = civ - full >= 0.05 and none - civ >= 0.05
    criterion(2, ok, f"full {full:.3f}, no_civ_balance {civ:.3f}, no_balance {none:.3f} (gaps >= 0.05)")


def test_criterion_3_alpha_beta_sensitivity(headline, criterion):
    low = headline[1].row("full")
    assert (low.alpha, low.beta) == (0.1, 0.1)
    high = sweep_alpha_beta(_syn_cfg(), [10.0]).rows[0]
    criterion(3, low.out_mean < high.out_mean,
              f"alpha=beta=0.1: {low.out_mean:.3f}, alpha=beta=10: {high.out_mean:.3f}")


def test_criterion_4_generator_oracle(criterion):
    d = generate_synthetic(SynSpec(4, 4, 50000, seed=2024))
    diff = d.Y1 - d.Y0
    ace_ok = abs(diff.mean() - 1.0) <= 3 * diff.std(ddof=1) / np.sqrt(d.n)
    cov_gap = np.abs(np.cov(np.column_stack([d.C, d.U]).T) - make_covariance(8)).max()
    s_gap = abs(d.S.mean() - 0.5)
    criterion(4, ace_ok and cov_gap <= 0.02 and s_gap <= 0.02,
              f"mean(Y1-Y0)={diff.mean():.4f}, max covariance gap {cov_gap:.4f}, P(S=1)={d.S.mean():.4f}")


def _fd_error(fn, params):
    _, g = dk.value_and_grad(fn, params)
    fd = dk.finite_difference_grad(lambda ps: fn(ps).item(), params, 1e-5)
    return dk.relative_error(g.flatten(), fd.flatten())


def _jitter(params, rng, scale=0.3):
    return ParamSet((k, v + scale * rng.normal(size=v.shape)) for k, v in params.items())


def test_criterion_5_gradient_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    n, p = 24, 3
    C = rng.normal(size=(n, p))
    S, W, Y = rng.integers(0, 2, n).astype(float), rng.integers(0, 2, n).astype(float), rng.normal(size=n)
    data = CivDataset(C, S, W, Y)
    cfg = TrainConfig(hidden_dims=(4,), repr_dim=3, seed=1)
    civ, treat, rep, head = network_specs(p, cfg)
    cp, tp = _jitter(dk.mlp_init(civ), rng), _jitter(dk.mlp_init(treat), rng)
    errors = {"L_S": _fd_error(lambda ps: civ_loss(ps, civ, C, S), cp),
              "L_W": _fd_error(lambda ps: treatment_loss(ps, treat, S, C, W), tp)}
    bundle = ModelBundle(civ, treat, rep, head, cp, tp, dk.mlp_init(rep), dk.mlp_init(head),
                         dk.mlp_init(head), np.zeros(p), np.ones(p))
    params = _jitter(_join(repr=bundle.repr_params, head0=bundle.head0_params, head1=bundle.head1_params), rng)
    sizes = [cp.size, tp.size, params.size]
    for a, b, l2 in ((0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.3, 0.4, 0.01)):
        tc = TrainConfig(hidden_dims=(4,), repr_dim=3, alpha=a, beta=b, l2_lambda=l2)
        errors[f"objective(alpha={a},beta={b},l2={l2})"] = _fd_error(
            lambda ps: outcome_loss(bundle, data, S, tc, ps), params)
    seconds = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-3 and max(sizes) <= 200 and seconds <= 60
    criterion(5, ok, f"worst relative error {errors[worst]:.1e} ({worst}), {max(sizes)} params, {seconds:.1f}s")


def test_criterion_6_ipm_oracle(criterion):
    rng = np.random.default_rng(6)
    cfg = SinkhornConfig(epsilon=0.01, max_iter=200000)
    ratios, self_worst = [], 0.0
    for _ in range(20):
        clouds = []
        for _ in range(2):
            k = int(rng.integers(1, 11))
            w = rng.uniform(0.05, 1, k)
            clouds.append(WeightedCloud(rng.normal(size=(k, 1)), w / w.sum()))
        a, b = clouds
        value = np.sqrt(max(sinkhorn_divergence(a, b, cfg).item(), 0.0))
        ratios.append(abs(value - exact_w1_1d(a, b)) / exact_w1_1d(a, b))
        self_worst = max(self_worst, sinkhorn_divergence(a, a, cfg).item(), sinkhorn_divergence(b, b, cfg).item())
    inside = sum(r <= 0.10 for r in ratios)
    criterion(6, inside == 20 and self_worst <= 1e-6,
              f"{inside}/20 pairs within 10% of exact W1 (worst {max(ratios):.0%}), "
              f"max self-divergence {self_worst:.1e}")


def test_criterion_7_determinism(tmp_path, criterion):
    flags = ["bench", "--setting", "4", "4", "--n", "600", "--epochs", "5", "--replications", "4", "--seed", "9"]
    paths = [str(tmp_path / f"{k}.json") for k in ("a", "b", "c")]
    codes = [main([*flags, "--out", paths[0]]), main([*flags, "--out", paths[1]]),
             main([*flags, "--out", paths[2], "--threads", "4"])]
    blobs = [open(p, "rb").read() for p in paths]
    ok = codes == [0, 0, 0] and blobs[0] == blobs[1] == blobs[2]
    criterion(7, ok, f"repeat identical: {blobs[0] == blobs[1]}, threads 1 vs 4 identical: {blobs[0] == blobs[2]}")
