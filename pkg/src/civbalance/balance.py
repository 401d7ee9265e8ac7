"""Distribution balance between probability-weighted representation clouds.

The discrepancy used for confounding balance is the debiased entropic optimal
transport divergence with squared euclidean cost,

    S_eps(a, b) = OT_eps(a, b) - OT_eps(a, a) / 2 - OT_eps(b, b) / 2,

computed with Sinkhorn iterations on dual potentials. Gradients are obtained
by running reverse mode through every stored Sinkhorn iteration, so they are
exact for the value that was actually computed.

``exact_w1_1d`` is an independent closed-form oracle for one-dimensional
clouds, used to pin the entropic solver in tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffkit import Tensor, value_of
from .errors import ConfigurationError, ConvergenceError, DegenerateGroupError, ShapeError

DEGENERATE_MASS = 1e-8
# Above this cost/epsilon ratio the exp(-C/eps) kernel can underflow; switch to
# the dense log-domain solver.
_KERNEL_RATIO_LIMIT = 600.0


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    max_iter: int = 1000
    stop_tol: float = 1e-6
    cost: str = "sqeuclidean"
    relaxation: float = 1.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")
        if not self.stop_tol > 0:
            raise ConfigurationError("stop_tol must be > 0")
        if not 0.0 < self.relaxation < 2.0:
            raise ConfigurationError("relaxation must lie in (0, 2)")
        if self.cost != "sqeuclidean":
            raise ConfigurationError(f"unsupported cost {self.cost!r}")


class WeightedCloud:
    """Points (n x dim, array or Tensor) with nonnegative weights summing to one."""

    __slots__ = ("points", "weights")

    def __init__(self, points, weights):
        pv, wv = value_of(points), value_of(weights)
        if pv.ndim == 1:
            pv = pv[:, None]
            points = pv if not isinstance(points, Tensor) else points
        if pv.ndim != 2 or wv.ndim != 1 or wv.shape[0] != pv.shape[0]:
            raise ShapeError(f"points {pv.shape} and weights {wv.shape} do not match")
        if np.any(wv < 0) or not np.all(np.isfinite(wv)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(wv.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {wv.sum()!r}")
        if not np.any(wv > 0):
            raise DegenerateGroupError("cloud has no positive weight")
        if isinstance(points, Tensor) and points.value.ndim != 2:
            raise ShapeError("Tensor points must be 2-D")
        self.points = points
        self.weights = weights

    @classmethod
    def uniform(cls, points):
        n = value_of(points).shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return value_of(self.points).shape[1]

    def __len__(self):
        return value_of(self.points).shape[0]


def clouds_from_probs(Z, prob1):
    """Split the rows of Z into a treated-side and a control-side weighted cloud.

    Both clouds use every row; the first is weighted by prob1, the second by
    1 - prob1, each normalized to unit mass.
    """
    p = np.asarray(value_of(prob1), dtype=np.float64)
    if value_of(Z).shape[0] != p.shape[0]:
        raise ShapeError(f"{value_of(Z).shape[0]} rows but {p.shape[0]} probabilities")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    m1, m0 = p.sum(), (1.0 - p).sum()
    if m1 < DEGENERATE_MASS or m0 < DEGENERATE_MASS:
        raise DegenerateGroupError(f"group masses {m1:.3g} / {m0:.3g} leave one side empty")
    return WeightedCloud(Z, p / m1), WeightedCloud(Z, (1.0 - p) / m0)


def exact_w1_1d(a: WeightedCloud, b: WeightedCloud) -> float:
    """Exact 1-Wasserstein distance between two 1-D weighted clouds.

    Integrates |F_a(x) - F_b(x)| over the merged support.
    """
    if a.dim != 1 or b.dim != 1:
        raise ShapeError("exact_w1_1d needs one-dimensional clouds")
    xa, wa = value_of(a.points)[:, 0], value_of(a.weights)
    xb, wb = value_of(b.points)[:, 0], value_of(b.weights)
    xs = np.concatenate([xa, xb])
    order = np.argsort(xs, kind="stable")
    xs = xs[order]
    jumps = np.concatenate([wa, -wb])[order]
    cdf_gap = np.cumsum(jumps)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(xs)))


def sq_distances(X, Y):
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


# --- Sinkhorn core ---------------------------------------------------------


def _safe_log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def _shifted_exp(h):
    s = np.max(h, axis=0)
    return np.exp(h - s), s


def _lse(h, axis):
    m = np.max(h, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(h - m), axis=axis))


def _violation(alpha, f, t, eps):
    """L1 row-marginal error of the plan whose row potential is f and whose soft-min image is t."""
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp((f - t) / eps)
    return float(np.max(np.sum(np.where(alpha > 0, alpha * np.abs(ratio - 1.0), 0.0), axis=0)))


class _Cost:
    """A cost matrix and the soft-min operator built on it.

    ``softmin(h, lw)`` returns T with T_i = -eps * logsumexp_j(lw_j + (h_j - C_ij) / eps)
    (or the same over i for ``transpose=True``) for k problems stored as columns,
    plus a record for ``vjp``. Vector-Jacobian products accumulate dL/dC.
    """

    def __init__(self, C, eps):
        self.C = C
        self.eps = eps
        self.dense = np.max(C) / eps > _KERNEL_RATIO_LIMIT
        if self.dense:
            self._dC = np.zeros_like(C)
        else:
            self.K = np.exp(-C / eps)
            self._left, self._right = [], []

    def softmin(self, h, lw, transpose=False):
        eps = self.eps
        if self.dense:
            C = self.C.T if transpose else self.C
            H = lw[None, :, :] + h[None, :, :] / eps - C[:, :, None] / eps
            T = -eps * _lse(H, axis=1)
            return T, (transpose, np.exp(H + T[:, None, :] / eps))
        K = self.K.T if transpose else self.K
        w, s = _shifted_exp(lw + h / eps)
        r = K @ w
        return -eps * (s + np.log(r)), (transpose, w, r)

    def vjp(self, rec, Tbar):
        """Return (dh, dlw) and accumulate dC for the soft-min that produced ``rec``."""
        if self.dense:
            transpose, A = rec
            AT = np.einsum("ijk,ik->jk", A, Tbar)
            dC = np.einsum("ijk,ik->ij", A, Tbar)
            self._dC += dC.T if transpose else dC
        else:
            transpose, w, r = rec
            K = self.K.T if transpose else self.K
            Tr = Tbar / r
            AT = w * (K.T @ Tr)
            if transpose:
                self._left.append(w)
                self._right.append(Tr)
            else:
                self._left.append(Tr)
                self._right.append(w)
        return -AT, -self.eps * AT

    def take_grad(self):
        """dL/dC accumulated by vjp calls since the last take_grad."""
        if self.dense:
            dC, self._dC = self._dC, np.zeros_like(self.C)
            return dC
        if not self._left:
            return np.zeros_like(self.C)
        dC = self.K * (np.hstack(self._left) @ np.hstack(self._right).T)
        self._left, self._right = [], []
        return dC


def _weights_grad(direct, dlw, weights):
    return direct + np.divide(dlw, weights, out=np.zeros_like(dlw), where=weights > 0)


class _CrossSolve:
    """Over-relaxed alternating Sinkhorn for OT_eps(alpha, beta) with row cost C (n x m).

    One sweep is f <- (1 - rho) f + rho T(g), then g <- (1 - rho) g + rho T'(f).
    rho = 1 is the classical scheme; rho in (1, 2) converges faster on the
    poorly conditioned problems met at small epsilon.
    """

    def __init__(self, cost, alpha, beta, cfg):
        eps, rho = cost.eps, cfg.relaxation
        la, lb = _safe_log(alpha), _safe_log(beta)
        g = np.zeros_like(beta)
        f, self.rec0 = cost.softmin(g, lb)
        self.records = []
        t, rec_t = cost.softmin(g, lb)
        for it in range(cfg.max_iter + 1):
            self.violation = _violation(alpha, f, t, eps) if it else np.inf
            if self.violation < cfg.stop_tol:
                break
            if it == cfg.max_iter:
                raise ConvergenceError(self.violation, cfg.max_iter)
            f = (1.0 - rho) * f + rho * t
            u, rec_u = cost.softmin(f, la, transpose=True)
            g = (1.0 - rho) * g + rho * u
            self.records.append((rec_t, rec_u))
            t, rec_t = cost.softmin(g, lb)
        self.rho = rho
        self.cost, self.alpha, self.beta, self.f, self.g = cost, alpha, beta, f, g
        self.iterations = len(self.records)
        self.values = np.sum(np.where(alpha > 0, alpha * f, 0.0), axis=0) + np.sum(
            np.where(beta > 0, beta * g, 0.0), axis=0)

    def backward(self, omega):
        rho = self.rho
        F = omega * self.alpha
        G = omega * self.beta
        dla = np.zeros_like(self.alpha)
        dlb = np.zeros_like(self.beta)
        for rec_t, rec_u in reversed(self.records):
            dh, dlw = self.cost.vjp(rec_u, rho * G)
            G = (1.0 - rho) * G
            F = F + dh
            dla += dlw
            dh, dlw = self.cost.vjp(rec_t, rho * F)
            F = (1.0 - rho) * F
            G = G + dh
            dlb += dlw
        _, dlw = self.cost.vjp(self.rec0, F)
        dlb += dlw
        return (_weights_grad(omega * self.f, dla, self.alpha),
                _weights_grad(omega * self.g, dlb, self.beta))


class _SymmetricSolve:
    """OT_eps(alpha, alpha) by the averaged fixed point f <- (f + softmin(f)) / 2."""

    def __init__(self, cost, alpha, cfg):
        eps = cost.eps
        la = _safe_log(alpha)
        f = np.zeros_like(alpha)
        self.records = []
        for it in range(cfg.max_iter + 1):
            t, rec = cost.softmin(f, la)
            self.violation = _violation(alpha, f, t, eps)
            if self.violation < cfg.stop_tol:
                break
            if it == cfg.max_iter:
                raise ConvergenceError(self.violation, cfg.max_iter)
            f = 0.5 * (f + t)
            self.records.append(rec)
        self.cost, self.alpha, self.f = cost, alpha, f
        self.iterations = len(self.records)
        self.values = 2.0 * np.sum(np.where(alpha > 0, alpha * f, 0.0), axis=0)

    def backward(self, omega):
        F = 2.0 * omega * self.alpha
        dla = np.zeros_like(self.alpha)
        for rec in reversed(self.records):
            dh, dlw = self.cost.vjp(rec, 0.5 * F)
            F = 0.5 * F + dh
            dla += dlw
        return _weights_grad(2.0 * omega * self.f, dla, self.alpha)


def _columns(w):
    w = np.asarray(w, dtype=np.float64)
    return w[:, None] if w.ndim == 1 else w


def sinkhorn_ot(C, alpha, beta, cfg: SinkhornConfig):
    """Entropic OT values for weight columns of alpha (n x k) vs beta (m x k) under cost C."""
    return _CrossSolve(_Cost(np.asarray(C, dtype=np.float64), cfg.epsilon),
                       _columns(alpha), _columns(beta), cfg)


def sinkhorn_self_ot(C, alpha, cfg: SinkhornConfig):
    return _SymmetricSolve(_Cost(np.asarray(C, dtype=np.float64), cfg.epsilon),
                           _columns(alpha), cfg)


def _canonical(cloud):
    X = value_of(cloud.points)
    w = value_of(cloud.weights)
    order = np.lexsort(X.T[::-1])
    return order, X[order], w[order]


def _points_grad(dC, X, Y):
    gx = 2.0 * (X * dC.sum(1)[:, None] - dC @ Y)
    gy = 2.0 * (Y * dC.sum(0)[:, None] - dC.T @ X)
    return gx, gy


def sinkhorn_divergence(a: WeightedCloud, b: WeightedCloud, cfg: SinkhornConfig = SinkhornConfig()):
    """Debiased entropic OT divergence as a Tensor.

    Differentiable with respect to the points and weights of both clouds when
    they are Tensors. Rows of each cloud are put in a canonical order and the
    pair is put in a canonical order before solving, so the result is exactly
    symmetric and invariant to joint permutation of points and weights.
    """
    if a.dim != b.dim:
        raise ShapeError(f"cloud dimensions differ: {a.dim} vs {b.dim}")
    pa, Xa, wa = _canonical(a)
    pb, Xb, wb = _canonical(b)
    if (Xa.tobytes(), wa.tobytes()) > (Xb.tobytes(), wb.tobytes()):
        a, b = b, a
        pa, Xa, wa, pb, Xb, wb = pb, Xb, wb, pa, Xa, wa

    parents = tuple(x for x in (a.points, a.weights, b.points, b.weights) if isinstance(x, Tensor))
    eps = cfg.epsilon
    shared = Xa.shape == Xb.shape and np.array_equal(Xa, Xb)
    if shared and np.array_equal(wa, wb):
        # Identical measures: the divergence attains its minimum 0 here, so the
        # gradient vanishes too. Solving would only be slow (near-diagonal plan).
        return Tensor(0.0, parents=parents, backward=lambda g: None)
    if shared:
        cost_ab = cost_aa = cost_bb = _Cost(sq_distances(Xa, Xa), eps)
        cross = _CrossSolve(cost_ab, wa[:, None], wb[:, None], cfg)
        selfs = _SymmetricSolve(cost_aa, np.column_stack([wa, wb]), cfg)
        v_aa, v_bb = selfs.values
        self_a = self_b = selfs
    else:
        cost_ab = _Cost(sq_distances(Xa, Xb), eps)
        cost_aa = _Cost(sq_distances(Xa, Xa), eps)
        cost_bb = _Cost(sq_distances(Xb, Xb), eps)
        cross = _CrossSolve(cost_ab, wa[:, None], wb[:, None], cfg)
        self_a = _SymmetricSolve(cost_aa, wa[:, None], cfg)
        self_b = _SymmetricSolve(cost_bb, wb[:, None], cfg)
        v_aa, v_bb = self_a.values[0], self_b.values[0]
    value = cross.values[0] - 0.5 * v_aa - 0.5 * v_bb

    def backward(gout):
        gout = float(gout)
        one = np.array([gout])
        gwa, gwb = cross.backward(one)
        gwa, gwb = gwa[:, 0], gwb[:, 0]
        gx, gy = _points_grad(cost_ab.take_grad(), Xa, Xb)
        gXa, gXb = gx, gy
        if shared and a.points is b.points:
            d = selfs.backward(np.array([-0.5 * gout, -0.5 * gout]))
            gx, gy = _points_grad(cost_aa.take_grad(), Xa, Xa)
            gXa, gXb = gXa + gXb + gx + gy, np.zeros_like(gXb)
            gwa, gwb = gwa + d[:, 0], gwb + d[:, 1]
        elif shared:
            da = selfs.backward(np.array([-0.5 * gout, 0.0]))
            gx, gy = _points_grad(cost_aa.take_grad(), Xa, Xa)
            gXa = gXa + gx + gy
            db = selfs.backward(np.array([0.0, -0.5 * gout]))
            gx, gy = _points_grad(cost_aa.take_grad(), Xb, Xb)
            gXb = gXb + gx + gy
            gwa, gwb = gwa + da[:, 0], gwb + db[:, 1]
        else:
            gwa = gwa + self_a.backward(np.array([-0.5 * gout]))[:, 0]
            gx, gy = _points_grad(cost_aa.take_grad(), Xa, Xa)
            gXa = gXa + gx + gy
            gwb = gwb + self_b.backward(np.array([-0.5 * gout]))[:, 0]
            gx, gy = _points_grad(cost_bb.take_grad(), Xb, Xb)
            gXb = gXb + gx + gy
        for cloud, order, gX, gw in ((a, pa, gXa, gwa), (b, pb, gXb, gwb)):
            for target, g in ((cloud.points, gX), (cloud.weights, gw)):
                if isinstance(target, Tensor) and target.requires_grad:
                    full = np.zeros_like(g)
                    full[order] = g
                    target._accumulate(full)

    return Tensor(value, parents=parents, backward=backward)


def ipm_term(Z, prob1, cfg: SinkhornConfig = SinkhornConfig()):
    """Balance discrepancy of Z between the prob1-weighted and (1 - prob1)-weighted groups."""
    treated, control = clouds_from_probs(Z, prob1)
    return sinkhorn_divergence(treated, control, cfg)


def mmd_rbf(a: WeightedCloud, b: WeightedCloud, bandwidth: float = 1.0) -> float:
    """Weighted squared MMD with a Gaussian kernel; a cross-check, not used in training."""
    Xa, Xb = value_of(a.points), value_of(b.points)
    wa, wb = value_of(a.weights), value_of(b.weights)

    def k(X, Y):
        return np.exp(-sq_distances(X, Y) / (2.0 * bandwidth ** 2))

    return float(wa @ k(Xa, Xa) @ wa + wb @ k(Xb, Xb) @ wb - 2.0 * wa @ k(Xa, Xb) @ wb)


def safe_ipm_term(Z, prob1, cfg: SinkhornConfig, name: str = "balance"):
    """ipm_term, but a degenerate group gives 0 and a warning instead of an error."""
    try:
        return ipm_term(Z, prob1, cfg)
    except DegenerateGroupError as exc:
        warnings.warn(f"{name}: {exc}; term set to 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
