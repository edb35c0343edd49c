"""Gaussian-process surrogate of the cell's one-hour state-increment map.

Four independent interpolating models (one per state increment: average
concentrations, film thickness, capacity fade) share a five-dimensional input:
the state at the END of the hour plus the pack power held during that hour.
Fitting the increment keyed on the arrival state keeps the horizon program's
jump dynamics compact, and fitting increments rather than absolute states is
what makes the two cumulative degradation outputs resolvable at all.

Inputs and outputs are z-scored per dimension from the training statistics;
the kernel is the product-form squared exponential with one inverse-squared
length scale per dimension, and hyperparameters come from multi-start MLE on
the profiled log marginal likelihood (constant mean and process variance have
closed forms).

Because the map is fitted on exact hour-to-hour plant transitions, there is
no discretization-error term in the surrogate: its accuracy is validated
purely against held-out plant transitions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from . import spm
from .spm import PackSpec, SpmParams, SpmState

OUTPUT_NAMES = ("dC_p_avg", "dC_n_avg", "ddelta_SEI", "dc_f")
INPUT_NAMES = ("C_p_avg", "C_n_avg", "delta_SEI", "c_f", "P_kw")
FORMAT_VERSION = 1


class IllConditioned(RuntimeError):
    """Kernel matrix stayed non-positive-definite at the maximum nugget."""


def rbf_kernel(x, x2, theta) -> float:
    """Product squared-exponential correlation: prod_d exp(-theta_d |dx_d|^2)."""
    x, x2, theta = np.asarray(x), np.asarray(x2), np.asarray(theta)
    return float(np.exp(-np.sum(theta * (x - x2) ** 2)))


def _corr_matrix(X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    sq = np.zeros((X.shape[0], X.shape[0]))
    for d, t in enumerate(theta):
        diff = X[:, d, None] - X[None, :, d]
        sq += t * diff * diff
    return np.exp(-sq)


def _corr_cross(X: np.ndarray, Q: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Correlation between queries Q (m,D) and training rows X (n,D): (m,n)."""
    sq = np.zeros((Q.shape[0], X.shape[0]))
    for d, t in enumerate(theta):
        diff = Q[:, d, None] - X[None, :, d]
        sq += t * diff * diff
    return np.exp(-sq)


@dataclass(frozen=True)
class KrigingModel:
    """Fitted interpolator. All arrays refer to normalized data."""

    mu0: float
    theta: np.ndarray          # per-dimension inverse-squared length scales
    sigma2: float              # process variance
    X: np.ndarray              # training inputs (n, D)
    y: np.ndarray              # training outputs (n,)
    chol: np.ndarray           # lower factor of corr(X) + nugget*I
    alpha: np.ndarray          # (corr + nugget I)^-1 (y - mu0)
    nugget: float
    degenerate: bool = False   # constant outputs: reverts to the mean everywhere
    fit_info: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]


DUPLICATE_SCHUR_TOL = 1e-9


def _near_duplicate_filter(
    X: np.ndarray, theta: np.ndarray, nugget: float, tol: float = DUPLICATE_SCHUR_TOL
) -> np.ndarray:
    """Indices of rows kept by greedy pivoted selection in the fitted metric.

    A row is dropped when its conditional (Schur-complement) variance given
    the rows already kept falls below tol: such rows are numerically
    redundant interpolation knots and only blow up the kernel solve. Order
    preserving and deterministic: earlier rows win. This is the dense-data
    analogue of the duplicate dropping done when new points are added online.
    """
    n = X.shape[0]
    corr = _corr_matrix(X, theta)
    low = np.zeros((n, n))
    kept: list[int] = []
    for r in range(n):
        k = corr[np.ix_(kept, [r])][:, 0] if kept else np.zeros(0)
        c = solve_triangular(low[: len(kept), : len(kept)], k, lower=True) if kept else k
        d = 1.0 + nugget - float(c @ c)
        if d > tol:
            m = len(kept)
            low[m, :m] = c
            low[m, m] = math.sqrt(d)
            kept.append(r)
    return np.array(kept, dtype=int)


def _finalize(mu0, theta, sigma2, X, y, nugget, fit_info=None) -> KrigingModel:
    theta = np.asarray(theta, dtype=float)
    keep = _near_duplicate_filter(X, theta, nugget)
    X, y = X[keep], y[keep]
    corr = _corr_matrix(X, theta)
    corr[np.diag_indices_from(corr)] += nugget
    low = cholesky(corr, lower=True)
    alpha = cho_solve((low, True), y - mu0)
    return KrigingModel(
        mu0=mu0, theta=theta, sigma2=sigma2,
        X=X, y=y, chol=low, alpha=alpha, nugget=nugget,
        fit_info=fit_info or {},
    )


def _profiled_nll_and_grad(log_theta, X, y, nugget):
    """Negative profiled log-marginal-likelihood and its log-theta gradient."""
    n = X.shape[0]
    theta = np.exp(log_theta)
    corr = _corr_matrix(X, theta)
    corr[np.diag_indices_from(corr)] += nugget
    try:
        low = cholesky(corr, lower=True)
    except np.linalg.LinAlgError:
        return 1e12, np.zeros_like(log_theta)

    ones = np.ones(n)
    a = solve_triangular(low, y, lower=True)
    b = solve_triangular(low, ones, lower=True)
    mu0 = (b @ a) / (b @ b)
    lr = a - mu0 * b
    sigma2 = (lr @ lr) / n
    if sigma2 <= 0.0:
        return 1e12, np.zeros_like(log_theta)
    nll = 0.5 * n * math.log(sigma2) + np.sum(np.log(np.diag(low)))

    # gradient: 0.5 tr(C^-1 dC) - 0.5 (r^T C^-1 dC C^-1 r)/sigma2, chained by theta_d
    alpha = cho_solve((low, True), y - mu0 * ones)
    c_inv = cho_solve((low, True), np.eye(n))
    grad = np.empty_like(log_theta)
    for d in range(X.shape[1]):
        diff = X[:, d, None] - X[None, :, d]
        dc = -(diff * diff) * (corr - nugget * np.eye(n))
        tr = float(np.sum(c_inv * dc))
        quad = float(alpha @ dc @ alpha)
        grad[d] = (0.5 * tr - 0.5 * quad / sigma2) * theta[d]
    return float(nll), grad


def fit_mle(
    X: np.ndarray,
    y: np.ndarray,
    theta_bounds: tuple[float, float] = (1e-4, 1e2),
    restarts: int = 8,
    nugget: float = 1e-10,
    seed: int = 0,
    theta_init: np.ndarray | None = None,
) -> KrigingModel:
    """Fit hyperparameters by multi-start quasi-Newton MLE in log-theta space.

    The constant mean and the process variance are profiled out in closed
    form. Constant outputs yield a degenerate zero-variance model that
    predicts the constant everywhere. A non-PD kernel escalates the nugget
    tenfold up to 1e-6 before giving up with IllConditioned.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, dim = X.shape
    if n < dim + 2:
        raise ValueError(f"need at least {dim + 2} samples, got {n}")

    if float(np.ptp(y)) < 1e-14:
        mu0 = float(np.mean(y))
        return KrigingModel(
            mu0=mu0, theta=np.ones(dim), sigma2=0.0, X=X, y=y,
            chol=np.eye(n), alpha=np.zeros(n), nugget=nugget, degenerate=True,
        )

    lo, hi = math.log(theta_bounds[0]), math.log(theta_bounds[1])
    rng = np.random.default_rng(seed)
    inits = []
    if theta_init is not None:
        inits.append(np.clip(np.log(np.asarray(theta_init, dtype=float)), lo, hi))
    inits.append(np.zeros(dim))  # unit length scales on normalized data
    while len(inits) < max(restarts, 1) + (theta_init is not None):
        inits.append(rng.uniform(lo, hi, size=dim))

    while nugget <= 1e-6:
        best = None
        init_nlls = []
        for x0 in inits:
            nll0, _ = _profiled_nll_and_grad(x0, X, y, nugget)
            init_nlls.append(nll0)
            res = minimize(
                _profiled_nll_and_grad, x0, args=(X, y, nugget),
                jac=True, method="L-BFGS-B",
                bounds=[(lo, hi)] * dim,
            )
            if best is None or res.fun < best.fun:
                best = res
        if best is None or best.fun >= 1e12:
            nugget = max(10.0 * nugget, 1e-10)
            continue

        theta = np.exp(best.x)
        corr = _corr_matrix(X, theta)
        corr[np.diag_indices_from(corr)] += nugget
        try:
            low = cholesky(corr, lower=True)
        except np.linalg.LinAlgError:
            nugget = max(10.0 * nugget, 1e-10)
            continue
        ones = np.ones(n)
        a = solve_triangular(low, y, lower=True)
        b = solve_triangular(low, ones, lower=True)
        mu0 = float((b @ a) / (b @ b))
        lr = a - mu0 * b
        sigma2 = float((lr @ lr) / n)
        info = {"nll": float(best.fun), "init_nlls": init_nlls, "nugget": nugget}
        return _finalize(mu0, theta, sigma2, X, y, nugget, info)
    raise IllConditioned("Cholesky failed up to the maximum nugget of 1e-6")


def log_likelihood(model: KrigingModel) -> float:
    """Profiled log marginal likelihood of a fitted model (for diagnostics)."""
    if model.degenerate:
        return 0.0
    nll, _ = _profiled_nll_and_grad(np.log(model.theta), model.X, model.y, model.nugget)
    return -nll


def predict(model: KrigingModel, x: np.ndarray) -> tuple[float, float]:
    """Posterior mean and variance (>= 0) at a single normalized input."""
    mean, var = predict_batch(model, np.asarray(x, dtype=float)[None, :])
    return float(mean[0]), float(var[0])


def predict_batch(model: KrigingModel, Q: np.ndarray):
    if model.degenerate:
        m = Q.shape[0]
        return np.full(m, model.mu0), np.zeros(m)
    k = _corr_cross(model.X, Q, model.theta)            # (m, n)
    mean = model.mu0 + k @ model.alpha
    v = solve_triangular(model.chol, k.T, lower=True)   # (n, m)
    var = model.sigma2 * np.maximum(0.0, 1.0 + model.nugget - np.sum(v * v, axis=0))
    return mean, var


def predict_mean_grad(model: KrigingModel, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of the posterior mean w.r.t. the normalized input."""
    if model.degenerate:
        return np.zeros_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    diff = x[None, :] - model.X                          # (n, D)
    k = np.exp(-np.sum(model.theta * diff * diff, axis=1))
    return (k * model.alpha) @ (-2.0 * model.theta * diff)


def add_points(
    model: KrigingModel,
    X_new: np.ndarray,
    y_new: np.ndarray,
    dup_tol: float = 1e-9,
    restarts: int = 1,
    seed: int = 0,
    theta_bounds: tuple[float, float] = (1e-4, 1e2),
) -> KrigingModel:
    """Refit over the union dataset, warm-started from the current theta.

    Rows duplicating existing inputs (within dup_tol on normalized
    coordinates) are dropped; with nothing left the model is returned as is.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    y_new = np.atleast_1d(np.asarray(y_new, dtype=float))
    if X_new.size == 0:
        return model
    keep = []
    for r, row in enumerate(X_new):
        d_old = np.min(np.sum((model.X - row) ** 2, axis=1)) if model.n else np.inf
        d_new = min(
            (np.sum((X_new[k] - row) ** 2) for k in keep), default=np.inf
        )
        if d_old > dup_tol**2 and d_new > dup_tol**2:
            keep.append(r)
    if not keep:
        return model
    X_all = np.vstack([model.X, X_new[keep]])
    y_all = np.concatenate([model.y, y_new[keep]])
    return fit_mle(
        X_all, y_all, theta_bounds=theta_bounds, restarts=restarts,
        nugget=model.nugget, seed=seed,
        theta_init=model.theta if not model.degenerate else None,
    )


# ---------------------------------------------------------------------------
# training data generation (plant rollouts)
# ---------------------------------------------------------------------------


@dataclass
class TrainingDataset:
    """Hour-transition records: inputs are (arrival state, held power)."""

    X: np.ndarray              # (m, 5) raw units: concentrations, film, fade, pack kW
    Y: np.ndarray              # (m, 4) raw state increments over the hour
    train_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    n_attempted: int = 0
    n_clamped: int = 0

    def __len__(self):
        return self.X.shape[0]


def generate_training_data(
    params: SpmParams,
    pack: PackSpec,
    n_cycles: int = 50,
    seed: int = 0,
    cycle_hours: int = 48,
    idle_prob: float = 0.12,
    substeps: int = spm.PLANT_SUBSTEPS_PER_HOUR,
) -> TrainingDataset:
    """Age one cell through randomized hourly charge/discharge cycles.

    One battery evolves continuously across all cycles so the degradation
    inputs sweep through the range the fleet will visit. Hourly powers are
    drawn uniformly inside a cheap SOC-headroom envelope estimate (with
    occasional rest hours); draws the plant still refuses are backed off and
    counted as clamped.
    """
    rng = np.random.default_rng(seed)
    x = spm.state_at_soc(params, rng.uniform(0.2, 0.8))
    rows_x, rows_y = [], []
    n_attempted = n_clamped = 0
    for _ in range(n_cycles * cycle_hours):
        n_attempted += 1
        s = spm.soc(x, params)
        if rng.uniform() < idle_prob:
            p_cell = 0.0
        else:
            charge_max = 0.95 * (1.0 - s) * pack.cell_p1c_w
            discharge_max = 0.95 * s * pack.cell_p1c_w
            p_cell = rng.uniform(-charge_max, discharge_max)
        nxt = None
        for _ in range(4):
            try:
                nxt = spm.integrate_step(x, p_cell, 1.0, substeps, params)
                break
            except (spm.NoConvergence, spm.StateOutOfBounds):
                n_clamped += 1
                p_cell *= 0.5
                if abs(p_cell) < 1e-9:
                    p_cell = 0.0
        if nxt is None:
            continue
        rows_x.append(
            [nxt.C_p_avg, nxt.C_n_avg, nxt.delta_SEI, nxt.c_f, pack.to_pack_kw(p_cell)]
        )
        rows_y.append(
            [
                nxt.C_p_avg - x.C_p_avg,
                nxt.C_n_avg - x.C_n_avg,
                nxt.delta_SEI - x.delta_SEI,
                nxt.c_f - x.c_f,
            ]
        )
        x = nxt
    return TrainingDataset(
        X=np.array(rows_x), Y=np.array(rows_y),
        n_attempted=n_attempted, n_clamped=n_clamped,
    )


def k_center_split(X_norm: np.ndarray, n_train: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy max-min (k-center) subset selection on normalized inputs.

    Keeps the Cholesky cost bounded while covering the visited input region;
    everything not selected becomes the held-out set.
    """
    m = X_norm.shape[0]
    if n_train >= m:
        return np.arange(m), np.array([], dtype=int)
    centroid = X_norm.mean(axis=0)
    first = int(np.argmin(np.sum((X_norm - centroid) ** 2, axis=1)))
    chosen = [first]
    d2 = np.sum((X_norm - X_norm[first]) ** 2, axis=1)
    for _ in range(n_train - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((X_norm - X_norm[nxt]) ** 2, axis=1))
    train = np.array(sorted(chosen))
    mask = np.ones(m, dtype=bool)
    mask[train] = False
    return train, np.nonzero(mask)[0]


# ---------------------------------------------------------------------------
# the four-output ensemble
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    """Per-dimension input/output statistics, plus the output transform.

    The two cumulative degradation increments are strictly positive with a
    huge dynamic range (their rate is exponential in the anode potential), so
    they are fitted in log space; the concentration increments stay linear.
    y_mean/y_scale are the z-score statistics in the transformed space.
    """

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    y_log: tuple = (False, False, True, True)
    y_floor: np.ndarray = None  # log-space offset guards, per output

    def encode_y(self, Y_raw: np.ndarray) -> np.ndarray:
        Y = np.array(Y_raw, dtype=float, copy=True)
        for j, is_log in enumerate(self.y_log):
            if is_log:
                Y[:, j] = np.log(np.maximum(Y[:, j], 0.0) + self.y_floor[j])
        return (Y - self.y_mean) / self.y_scale

    def decode_y_col(self, j: int, col_norm: np.ndarray) -> np.ndarray:
        col = self.y_mean[j] + self.y_scale[j] * col_norm
        if self.y_log[j]:
            col = np.exp(col) - self.y_floor[j]
        return col


@dataclass(frozen=True)
class SurrogateEnsemble:
    """Four per-output models sharing one input layout and normalization."""

    models: tuple
    norm: Normalization
    x_lo: np.ndarray           # raw-unit training envelope, for extrapolation flags
    x_hi: np.ndarray

    def normalize_x(self, X_raw: np.ndarray) -> np.ndarray:
        return (X_raw - self.norm.x_mean) / self.norm.x_scale

    @cached_property
    def _shared_knots(self):
        """Training-input matrix when all four models share it, else None.

        The optimizer's hot loop evaluates all four models at the same
        queries; a shared knot matrix lets the squared-distance tensor be
        built once instead of per model.
        """
        X0 = self.models[0].X
        for m in self.models[1:]:
            if m.X.shape != X0.shape or not np.array_equal(m.X, X0):
                return None
        return X0

    def extrapolating(self, X_raw: np.ndarray, margin: float = 0.05) -> np.ndarray:
        span = self.x_hi - self.x_lo
        lo = self.x_lo - margin * span
        hi = self.x_hi + margin * span
        return np.any((X_raw < lo) | (X_raw > hi), axis=-1)


def _scales(A: np.ndarray) -> np.ndarray:
    s = A.std(axis=0, ddof=0)
    return np.where(s < 1e-15, 1.0, s)


# Per-output hyperparameter search boxes. The two concentration increments
# are nearly linear in the inputs; left unbounded the MLE picks very long
# length scales, which interpolate beautifully but make the kernel matrix
# numerically singular (huge weights, noisy gradients). Their accuracy budget
# is ~300x looser than the degradation outputs, so their length scales are
# capped short instead. The common upper bound keeps the posterior mean
# smooth enough for the optimizer's fixed-point transitions to converge.
THETA_BOUNDS_PER_OUTPUT = ((0.6, 20.0), (0.6, 20.0), (1e-4, 20.0), (1e-4, 20.0))


def fit_ensemble(
    dataset: TrainingDataset,
    n_train: int = 512,
    restarts: int = 8,
    nugget: float = 1e-10,
    seed: int = 0,
) -> SurrogateEnsemble:
    """Split, normalize and fit the four increment models.

    Mutates the dataset's split indices so validation can use the held-out
    remainder.
    """
    x_mean = dataset.X.mean(axis=0)
    x_scale = _scales(dataset.X)
    X_norm_all = (dataset.X - x_mean) / x_scale
    train, test = k_center_split(X_norm_all, n_train)
    dataset.train_idx, dataset.test_idx = train, test

    Xt = dataset.X[train]
    Yt = dataset.Y[train]
    y_log = (False, False, True, True)
    y_floor = np.zeros(4)
    for j, is_log in enumerate(y_log):
        if is_log:
            y_floor[j] = 1e-6 * max(float(np.max(np.abs(Yt[:, j]))), 1e-300)
    Y_enc = np.array(Yt, copy=True)
    for j, is_log in enumerate(y_log):
        if is_log:
            Y_enc[:, j] = np.log(np.maximum(Y_enc[:, j], 0.0) + y_floor[j])
    y_mean = Y_enc.mean(axis=0)
    y_scale = _scales(Y_enc)
    norm = Normalization(
        x_mean=x_mean, x_scale=x_scale, y_mean=y_mean, y_scale=y_scale,
        y_log=y_log, y_floor=y_floor,
    )
    Xn = (Xt - x_mean) / x_scale
    Yn = (Y_enc - y_mean) / y_scale
    models = []
    for j in range(4):
        models.append(
            fit_mle(
                Xn, Yn[:, j], theta_bounds=THETA_BOUNDS_PER_OUTPUT[j],
                restarts=restarts, nugget=nugget, seed=seed + 17 * j,
            )
        )
    return SurrogateEnsemble(
        models=tuple(models), norm=norm,
        x_lo=dataset.X.min(axis=0), x_hi=dataset.X.max(axis=0),
    )


def ensemble_add_points(
    ens: SurrogateEnsemble, X_raw: np.ndarray, Y_raw: np.ndarray, seed: int = 0
) -> SurrogateEnsemble:
    """New plant-evaluated transitions folded into all four models.

    Normalization statistics stay frozen (predictions must remain comparable
    across refits); the extrapolation envelope widens to cover the new rows.
    """
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    Y_raw = np.atleast_2d(np.asarray(Y_raw, dtype=float))
    Xn = (X_raw - ens.norm.x_mean) / ens.norm.x_scale
    Yn = ens.norm.encode_y(Y_raw)
    models = []
    for j, model in enumerate(ens.models):
        models.append(
            add_points(
                model, Xn, Yn[:, j], seed=seed + 17 * j,
                theta_bounds=THETA_BOUNDS_PER_OUTPUT[j],
            )
        )
    return SurrogateEnsemble(
        models=tuple(models), norm=ens.norm,
        x_lo=np.minimum(ens.x_lo, X_raw.min(axis=0)),
        x_hi=np.maximum(ens.x_hi, X_raw.max(axis=0)),
    )


def predict_increment(
    ens: SurrogateEnsemble, x_next: SpmState, p_next_kw: float
) -> tuple[np.ndarray, bool]:
    """De-normalized increment prediction at one (arrival state, power) point.

    The two cumulative outputs are clamped at >= 0. The flag reports whether
    the query left the training envelope.
    """
    raw = np.array([[x_next.C_p_avg, x_next.C_n_avg, x_next.delta_SEI, x_next.c_f,
                     p_next_kw]])
    delta = predict_increment_batch(ens, raw)[0]
    return delta, bool(ens.extrapolating(raw)[0])


def predict_increment_batch(ens: SurrogateEnsemble, X_raw: np.ndarray) -> np.ndarray:
    Q = ens.normalize_x(np.atleast_2d(X_raw))
    out = np.empty((Q.shape[0], 4))
    knots = ens._shared_knots
    if knots is not None and not any(m.degenerate for m in ens.models):
        diff = Q[:, None, :] - knots[None, :, :]
        sq = diff * diff
        for j, model in enumerate(ens.models):
            k = np.exp(-(sq @ model.theta))
            out[:, j] = ens.norm.decode_y_col(j, model.mu0 + k @ model.alpha)
    else:
        for j, model in enumerate(ens.models):
            mean, _ = predict_batch(model, Q)
            out[:, j] = ens.norm.decode_y_col(j, mean)
    out[:, 2] = np.maximum(out[:, 2], 0.0)
    out[:, 3] = np.maximum(out[:, 3], 0.0)
    return out


def predict_increment_jac_batch(ens: SurrogateEnsemble, X_raw: np.ndarray):
    """Increments plus their Jacobians w.r.t. the raw inputs: (m,4), (m,4,5).

    Used by the horizon optimizer; the degradation clamps zero the
    corresponding Jacobian rows when active.
    """
    X_raw = np.atleast_2d(X_raw)
    Q = ens.normalize_x(X_raw)
    m = Q.shape[0]
    out = np.empty((m, 4))
    jac = np.zeros((m, 4, Q.shape[1]))
    knots = ens._shared_knots
    shared_diff = None
    if knots is not None:
        shared_diff = Q[:, None, :] - knots[None, :, :]       # (m, n, D)
        shared_sq = shared_diff * shared_diff
    for j, model in enumerate(ens.models):
        ys = ens.norm.y_scale[j]
        if model.degenerate:
            out[:, j] = ens.norm.decode_y_col(j, np.full(m, model.mu0))
            continue
        if shared_diff is not None:
            diff = shared_diff
            k = np.exp(-(shared_sq @ model.theta))
        else:
            diff = Q[:, None, :] - model.X[None, :, :]
            k = np.exp(-np.einsum("mnd,d->mn", diff * diff, model.theta))
        mean_norm = model.mu0 + k @ model.alpha
        w = k * model.alpha[None, :]                          # (m, n)
        grad_norm = np.einsum("mn,mnd->md", w, diff) * (-2.0 * model.theta)
        if ens.norm.y_log[j]:
            enc = ens.norm.y_mean[j] + ys * mean_norm
            out[:, j] = np.exp(enc) - ens.norm.y_floor[j]
            chain = np.exp(enc) * ys
        else:
            out[:, j] = ens.norm.y_mean[j] + ys * mean_norm
            chain = np.full(m, ys)
        jac[:, j, :] = chain[:, None] * grad_norm
    jac /= ens.norm.x_scale[None, None, :]
    for j in (2, 3):
        clamped = out[:, j] <= 0.0
        out[clamped, j] = 0.0
        jac[clamped, j, :] = 0.0
    return out, jac


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    re_per_output: np.ndarray       # norm-ratio ||y - yhat|| / ||y|| per output
    re_aggregate: float             # same ratio over all normalized outputs stacked
    sample_rel_errors: np.ndarray   # (m, 4), scaled by the per-output max |y|

    def quantile_band(self, j: int, q: float = 0.95) -> float:
        return float(np.quantile(np.abs(self.sample_rel_errors[:, j]), q))


def validate(ens: SurrogateEnsemble, X_raw: np.ndarray, Y_raw: np.ndarray) -> ValidationReport:
    """Held-out accuracy: norm-ratio errors plus per-sample relative errors.

    Per-sample errors are scaled by each output's max |value| over the
    evaluation set (a per-sample denominator would blow up on the rest hours
    where the concentration increments pass through zero).
    """
    pred = predict_increment_batch(ens, X_raw)
    err = pred - Y_raw
    denom = np.linalg.norm(Y_raw, axis=0)
    denom = np.where(denom < 1e-300, 1.0, denom)
    re = np.linalg.norm(err, axis=0) / denom
    err_n = err / ens.norm.y_scale
    y_n = (Y_raw - ens.norm.y_mean) / ens.norm.y_scale
    agg = float(np.linalg.norm(err_n) / max(np.linalg.norm(y_n), 1e-300))
    scale = np.max(np.abs(Y_raw), axis=0)
    scale = np.where(scale < 1e-300, 1.0, scale)
    return ValidationReport(
        re_per_output=re, re_aggregate=agg, sample_rel_errors=err / scale
    )


def validate_on_test_split(ens: SurrogateEnsemble, dataset: TrainingDataset) -> ValidationReport:
    if dataset.test_idx.size == 0:
        raise ValueError("dataset has no held-out rows")
    return validate(ens, dataset.X[dataset.test_idx], dataset.Y[dataset.test_idx])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_ensemble(ens: SurrogateEnsemble, path: str | Path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "norm": {
            "x_mean": ens.norm.x_mean.tolist(),
            "x_scale": ens.norm.x_scale.tolist(),
            "y_mean": ens.norm.y_mean.tolist(),
            "y_scale": ens.norm.y_scale.tolist(),
            "y_log": list(ens.norm.y_log),
            "y_floor": ens.norm.y_floor.tolist(),
        },
        "x_lo": ens.x_lo.tolist(),
        "x_hi": ens.x_hi.tolist(),
        "models": [
            {
                "mu0": m.mu0,
                "theta": m.theta.tolist(),
                "sigma2": m.sigma2,
                "nugget": m.nugget,
                "degenerate": m.degenerate,
                "X": m.X.tolist(),
                "y": m.y.tolist(),
            }
            for m in ens.models
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_ensemble(path: str | Path) -> SurrogateEnsemble:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported surrogate file version: {doc.get('format_version')}")
    models = []
    for m in doc["models"]:
        X = np.array(m["X"], dtype=float).reshape(len(m["y"]), -1)
        y = np.array(m["y"], dtype=float)
        if m["degenerate"]:
            models.append(
                KrigingModel(
                    mu0=m["mu0"], theta=np.array(m["theta"]), sigma2=0.0,
                    X=X, y=y, chol=np.eye(len(y)), alpha=np.zeros(len(y)),
                    nugget=m["nugget"], degenerate=True,
                )
            )
        else:
            models.append(
                _finalize(m["mu0"], np.array(m["theta"]), m["sigma2"], X, y, m["nugget"])
            )
    norm = doc["norm"]
    return SurrogateEnsemble(
        models=tuple(models),
        norm=Normalization(
            x_mean=np.array(norm["x_mean"]), x_scale=np.array(norm["x_scale"]),
            y_mean=np.array(norm["y_mean"]), y_scale=np.array(norm["y_scale"]),
            y_log=tuple(norm["y_log"]), y_floor=np.array(norm["y_floor"]),
        ),
        x_lo=np.array(doc["x_lo"]),
        x_hi=np.array(doc["x_hi"]),
    )


def dataset_to_csv(dataset: TrainingDataset, path: str | Path) -> None:
    header = ",".join(INPUT_NAMES + OUTPUT_NAMES)
    rows = np.hstack([dataset.X, dataset.Y])
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")


def dataset_from_csv(path: str | Path) -> TrainingDataset:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TrainingDataset(X=rows[:, :5], Y=rows[:, 5:9])
