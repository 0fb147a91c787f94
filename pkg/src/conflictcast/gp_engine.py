"""Exact Gaussian-process regression with additive kernel components.

Models are zero-mean GPs whose covariance is a sum of one or two
stationary components (squared-exponential or Matern-3/2) plus white
observation noise.  Everything downstream conditions on one shared
hyperparameter set across many series, so the marginal likelihood and
its analytic gradient are exposed jointly over a collection of
(inputs, targets) problems, and hyperparameters are fitted by
multi-start MAP ascent under log-normal priors.

Numerical conventions
---------------------
* Hyperparameters are handled on the log scale throughout; gradients
  returned by the likelihood functions are with respect to
  [log lengthscale, log amplitude] per component, then [log noise].
* Gram matrices always carry noise^2 plus a diagonal jitter of
  1e-8 * (total signal variance); failed Cholesky factorizations
  escalate the jitter tenfold up to 1e-4 before raising
  SingularModelError.
* The predictive variance reported by posteriors is that of the
  noise-free latent sum (observation noise excluded).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

SQRT3 = math.sqrt(3.0)
LOG_2PI = math.log(2.0 * math.pi)

JITTER_START = 1e-8
JITTER_MAX = 1e-4

# box bounds for log-hyperparameters during optimization; keeps degenerate
# problems (e.g. all-zero targets, whose likelihood rewards vanishing
# variance without bound) on a numerically factorizable floor
LOG_PARAM_BOUND = math.log(1e8)

KERNEL_KINDS = ("se", "matern32")

MODEL_FORMAT = "conflictcast-gp-model"
MODEL_VERSION = 1


class SingularModelError(RuntimeError):
    """Gram matrix stayed non-factorizable through the whole jitter ladder."""


class NonConvergenceError(RuntimeError):
    """Every optimizer start failed; diagnostics carried in the message."""


@dataclass(frozen=True)
class KernelSpec:
    """One stationary covariance component.

    kind : "se" for eta^2 * exp(-d^2 / (2 l^2)), or
           "matern32" for eta^2 * (1 + sqrt(3) d / l) * exp(-sqrt(3) d / l).
    """

    kind: str
    lengthscale: float
    amplitude: float

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (self.amplitude > 0 and np.isfinite(self.amplitude)):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")


def kernel_eval(spec, d):
    """Covariance at separation distance(s) d (scalar or ndarray, >= 0)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    eta2 = spec.amplitude**2
    if spec.kind == "se":
        return eta2 * np.exp(-0.5 * (d / spec.lengthscale) ** 2)
    a = SQRT3 * d / spec.lengthscale
    return eta2 * (1.0 + a) * np.exp(-a)


def _kernel_and_dlogl(spec, d):
    """Component Gram block and its derivative w.r.t. log lengthscale."""
    eta2 = spec.amplitude**2
    if spec.kind == "se":
        r2 = (d / spec.lengthscale) ** 2
        k = eta2 * np.exp(-0.5 * r2)
        return k, k * r2
    a = SQRT3 * d / spec.lengthscale
    e = np.exp(-a)
    return eta2 * (1.0 + a) * e, eta2 * a * a * e


def pairwise_distances(x, z=None):
    """Euclidean distances between rows of x and z (1-d inputs allowed)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input coordinate")
    if x.ndim == 1:
        x = x[:, None]
    if z is None:
        z = x
    else:
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite input coordinate")
        if z.ndim == 1:
            z = z[:, None]
    diff = x[:, None, :] - z[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class GPModel:
    """Additive GP: one or two kernel components plus observation noise.

    The mean function is identically zero; with no conditioning data the
    posterior mean defaults to it.  meta carries optimizer diagnostics
    after fitting and never participates in equality.
    """

    components: tuple
    noise: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not 1 <= len(self.components) <= 2:
            raise ValueError("model needs one or two kernel components")
        if not (self.noise > 0 and np.isfinite(self.noise)):
            raise ValueError(f"noise must be positive, got {self.noise}")

    @property
    def signal_variance(self):
        return sum(c.amplitude**2 for c in self.components)

    @property
    def n_params(self):
        return 2 * len(self.components) + 1

    def log_params(self):
        """[log l, log eta] per component, then log noise."""
        out = []
        for c in self.components:
            out.extend((math.log(c.lengthscale), math.log(c.amplitude)))
        out.append(math.log(self.noise))
        return np.array(out)

    def with_log_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} log-params, got {theta.shape}")
        comps = tuple(
            KernelSpec(c.kind, math.exp(theta[2 * i]), math.exp(theta[2 * i + 1]))
            for i, c in enumerate(self.components)
        )
        return GPModel(comps, math.exp(theta[-1]))


def gram_matrix(model, x, include_noise=True):
    """Dense covariance of x against itself.

    With include_noise the diagonal carries noise^2 plus the initial
    jitter 1e-8 * signal variance; without it the matrix is the pure
    latent covariance (used for cross-covariances and prior draws of the
    noise-free field).
    """
    d = pairwise_distances(x)
    k = np.zeros_like(d)
    for comp in model.components:
        k += kernel_eval(comp, d)
    if include_noise:
        n = k.shape[0]
        k[np.diag_indices(n)] += model.noise**2 + JITTER_START * model.signal_variance
    return k


def _jitter_ladder(model):
    base = model.signal_variance
    scale = JITTER_START
    while scale <= JITTER_MAX * (1 + 1e-12):
        yield scale * base
        scale *= 10.0


def _chol_noisy(model, k_core):
    """Cholesky of k_core + (noise^2 + jitter) I, escalating jitter x10.

    Returns (lower factor, jitter actually used).
    """
    n = k_core.shape[0]
    eye_idx = np.diag_indices(n)
    last_err = None
    for jitter in _jitter_ladder(model):
        k = k_core.copy()
        k[eye_idx] += model.noise**2 + jitter
        try:
            return np.linalg.cholesky(k), jitter
        except np.linalg.LinAlgError as exc:
            last_err = exc
    raise SingularModelError(
        f"covariance not positive definite after jitter escalation to "
        f"{JITTER_MAX} * signal variance ({last_err})"
    )


class _Group:
    """Problems sharing one input grid: one factorization, many targets."""

    def __init__(self, x, y_rows):
        self.x = x
        self.d = pairwise_distances(x)
        self.y = np.vstack(y_rows)  # (T, n)
        if not np.all(np.isfinite(self.y)):
            raise ValueError("non-finite target value")


def _as_xy(problem):
    if isinstance(problem, tuple):
        x, y = problem
    else:
        x, y = problem.months, problem.values  # Timeline-like
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) != (x.shape[0] if x.ndim else 1):
        raise ValueError("targets must be 1-d and aligned with inputs")
    if len(y) == 0:
        raise ValueError("empty problem")
    return x, y


def _group_problems(problems):
    groups = {}
    for p in problems:
        x, y = _as_xy(p)
        key = (x.shape, x.tobytes())
        if key in groups:
            groups[key][1].append(y)
        else:
            groups[key] = (x, [y])
    return [_Group(x, ys) for x, ys in groups.values()]


def _group_lml(model, group):
    """(value, grad) of the summed LML over one group's targets."""
    k_core = np.zeros_like(group.d)
    blocks = []
    for comp in model.components:
        k, dlogl = _kernel_and_dlogl(comp, group.d)
        k_core += k
        blocks.append((k, dlogl))
    chol, jitter = _chol_noisy(model, k_core)
    t, n = group.y.shape
    alphas = cho_solve((chol, True), group.y.T)  # (n, T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    value = (
        -0.5 * float(np.sum(group.y.T * alphas))
        - t * 0.5 * logdet
        - t * n * 0.5 * LOG_2PI
    )
    kinv = cho_solve((chol, True), np.eye(n))
    grad = np.empty(model.n_params)
    # d(jitter)/d(log eta_c) = 2 eta_c^2 * (jitter / signal variance)
    jit_scale = jitter / model.signal_variance
    for i, (comp, (k, dlogl)) in enumerate(zip(model.components, blocks)):
        grad[2 * i] = 0.5 * float(np.sum(alphas * (dlogl @ alphas))) - 0.5 * t * float(
            np.sum(kinv * dlogl)
        )
        # dK/d(log eta) = 2 K_c plus the jitter's own amplitude dependence
        diag_term = 2.0 * comp.amplitude**2 * jit_scale
        quad = 2.0 * float(np.sum(alphas * (k @ alphas))) + diag_term * float(
            np.sum(alphas * alphas)
        )
        tr = 2.0 * t * float(np.sum(kinv * k)) + diag_term * t * float(np.trace(kinv))
        grad[2 * i + 1] = 0.5 * quad - 0.5 * tr
    dnoise = 2.0 * model.noise**2
    grad[-1] = 0.5 * dnoise * float(np.sum(alphas * alphas)) - 0.5 * t * dnoise * float(
        np.trace(kinv)
    )
    return value, grad


def log_marginal_likelihood(model, x, y):
    """Log evidence of one series and its gradient w.r.t. log-params.

    value = -1/2 y^T K^-1 y - 1/2 log|K| - n/2 log 2pi with K the noisy
    Gram matrix; grad follows the component layout of model.log_params().
    """
    x_arr, y_arr = _as_xy((x, y))
    return _group_lml(model, _Group(x_arr, [y_arr]))


def joint_lml(model, problems):
    """Summed LML (and gradient) over independent problems sharing model.

    problems is a sequence of Timeline objects or (inputs, targets)
    tuples.  Problems on identical input grids share one factorization;
    the result equals the naive per-problem sum up to float addition
    order.
    """
    groups = _group_problems(problems)
    if not groups:
        raise ValueError("no problems given")
    value = 0.0
    grad = np.zeros(model.n_params)
    for g in groups:
        v, dg = _group_lml(model, g)
        value += v
        grad += dg
    return value, grad


@dataclass(frozen=True)
class LogNormalPrior:
    """Log-normal prior, i.e. a Normal(log_mean, log_sd) over the log value."""

    log_mean: float
    log_sd: float

    def logpdf(self, theta):
        z = (theta - self.log_mean) / self.log_sd
        return -0.5 * z * z - math.log(self.log_sd) - 0.5 * LOG_2PI

    def dlogpdf(self, theta):
        return -(theta - self.log_mean) / self.log_sd**2

    def sample(self, rng):
        return rng.normal(self.log_mean, self.log_sd)

    @property
    def mode(self):
        return math.exp(self.log_mean)


@dataclass(frozen=True)
class HyperPrior:
    """Per-hyperparameter priors mirroring a model's parameter layout."""

    lengthscales: tuple
    amplitudes: tuple
    noise: LogNormalPrior

    def _flat(self):
        out = []
        for l, a in zip(self.lengthscales, self.amplitudes):
            out.extend((l, a))
        out.append(self.noise)
        return out

    def log_density(self, theta):
        priors = self._flat()
        if len(theta) != len(priors):
            raise ValueError("prior/parameter layout mismatch")
        value = sum(p.logpdf(t) for p, t in zip(priors, theta))
        grad = np.array([p.dlogpdf(t) for p, t in zip(priors, theta)])
        return value, grad

    def sample_log_params(self, rng):
        return np.array([p.sample(rng) for p in self._flat()])

    @classmethod
    def two_trend_default(cls):
        """Priors for a long squared-exponential plus short Matern-3/2 pair.

        Lengthscale log-means ln(100) and ln(5) (log-sd 1), amplitude and
        noise log-means ln(0.5) (log-sd 1.5); component 1 is the long
        trend by construction.
        """
        return cls(
            lengthscales=(
                LogNormalPrior(math.log(100.0), 1.0),
                LogNormalPrior(math.log(5.0), 1.0),
            ),
            amplitudes=(
                LogNormalPrior(math.log(0.5), 1.5),
                LogNormalPrior(math.log(0.5), 1.5),
            ),
            noise=LogNormalPrior(math.log(0.5), 1.5),
        )

    @classmethod
    def single_default(cls, lengthscale_log_mean=0.0, lengthscale_log_sd=1.0):
        """Priors for a single-component model (e.g. a 2-d spatial field)."""
        return cls(
            lengthscales=(LogNormalPrior(lengthscale_log_mean, lengthscale_log_sd),),
            amplitudes=(LogNormalPrior(math.log(0.5), 1.5),),
            noise=LogNormalPrior(math.log(0.5), 1.5),
        )

    def mode_model(self, kinds):
        comps = tuple(
            KernelSpec(kind, l.mode, a.mode)
            for kind, l, a in zip(kinds, self.lengthscales, self.amplitudes)
        )
        return GPModel(comps, self.noise.mode)


def map_estimate(
    model_init,
    priors,
    problems,
    n_starts=8,
    seed=0,
    max_iter=500,
    gtol=1e-5,
):
    """Fit hyperparameters by multi-start MAP ascent.

    Maximizes joint_lml + log prior density over log-hyperparameters with
    L-BFGS (analytic gradients).  Start 0 is model_init's own parameter
    vector; the remaining n_starts - 1 are drawn from the priors with the
    given seed.  A start converges when the projected gradient infinity
    norm drops below gtol or after max_iter iterations; the best
    converged start wins.  All starts failing raises NonConvergenceError.
    """
    if n_starts < 1:
        raise ValueError("need at least one start")
    groups = _group_problems(problems)
    if not groups:
        raise ValueError("no problems given")
    template = model_init
    bounds = [(-LOG_PARAM_BOUND, LOG_PARAM_BOUND)] * template.n_params

    def objective(theta):
        model = template.with_log_params(theta)
        try:
            value = 0.0
            grad = np.zeros(model.n_params)
            for g in groups:
                v, dg = _group_lml(model, g)
                value += v
                grad += dg
        except SingularModelError:
            return 1e25, np.zeros(len(theta))
        pv, pg = priors.log_density(theta)
        return -(value + pv), -(grad + pg)

    rng = np.random.default_rng(seed)
    starts = [np.clip(template.log_params(), -LOG_PARAM_BOUND, LOG_PARAM_BOUND)]
    for _ in range(n_starts - 1):
        starts.append(
            np.clip(priors.sample_log_params(rng), -LOG_PARAM_BOUND, LOG_PARAM_BOUND)
        )

    best = None
    failures = []
    for i, x0 in enumerate(starts):
        try:
            res = minimize(
                objective,
                x0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-12},
            )
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            failures.append(f"start {i}: {exc}")
            continue
        if not np.isfinite(res.fun) or res.fun >= 1e24:
            failures.append(f"start {i}: objective not finite at optimum")
            continue
        if best is None or res.fun < best[0].fun:
            best = (res, i)
    if best is None:
        raise NonConvergenceError(
            f"all {n_starts} starts failed: " + "; ".join(failures)
        )
    res, start_idx = best
    fitted = template.with_log_params(res.x)
    value, grad = joint_lml(fitted, problems)
    meta = {
        "starts": n_starts,
        "seed": seed,
        "best_start": start_idx,
        "iterations": int(res.nit),
        "grad_inf_norm": float(np.max(np.abs(res.jac))),
        "joint_lml": float(value),
        "log_posterior": float(-res.fun),
    }
    return GPModel(fitted.components, fitted.noise, meta)


@dataclass(frozen=True)
class PosteriorSummary:
    """Latent posterior at query points, split by additive component.

    mu_components sums to mu_full elementwise (additive decomposition);
    sigma_full is the noise-free predictive standard deviation.
    """

    query: np.ndarray
    mu_full: np.ndarray
    sigma_full: np.ndarray
    mu_components: tuple


def _posterior_core(model, x, x_star):
    """Shared factorization pieces for one conditioning grid."""
    d_train = pairwise_distances(x)
    k_core = np.zeros_like(d_train)
    for comp in model.components:
        k_core += kernel_eval(comp, d_train)
    chol, _ = _chol_noisy(model, k_core)
    d_cross = pairwise_distances(x_star, x)
    cross_blocks = tuple(kernel_eval(comp, d_cross) for comp in model.components)
    k_cross = sum(cross_blocks)
    v = solve_triangular(chol, k_cross.T, lower=True)
    var = model.signal_variance - np.einsum("ij,ij->j", v, v)
    sigma = np.sqrt(np.clip(var, 0.0, None))
    return chol, cross_blocks, k_cross, sigma


def posterior(model, x, y, x_star):
    """Condition on (x, y) and summarize the latent GP at x_star."""
    x_arr, y_arr = _as_xy((x, y))
    chol, cross_blocks, k_cross, sigma = _posterior_core(model, x_arr, x_star)
    alpha = cho_solve((chol, True), y_arr)
    mu_components = tuple(block @ alpha for block in cross_blocks)
    mu_full = k_cross @ alpha
    return PosteriorSummary(
        query=np.asarray(x_star, dtype=float),
        mu_full=mu_full,
        sigma_full=sigma,
        mu_components=mu_components,
    )


def posterior_many(model, x, y_rows, x_star):
    """Posterior summaries for many target rows sharing one grid.

    y_rows has shape (T, n).  Returns (mu_full (T, m), mu_components
    (C, T, m), sigma (m,)); sigma is target-independent.  Identical to
    calling posterior per row, up to float addition order.
    """
    y_rows = np.asarray(y_rows, dtype=float)
    if not np.all(np.isfinite(y_rows)):
        raise ValueError("non-finite target value")
    chol, cross_blocks, k_cross, sigma = _posterior_core(model, x, x_star)
    alphas = cho_solve((chol, True), y_rows.T)  # (n, T)
    mu_components = np.stack([(block @ alphas).T for block in cross_blocks])
    mu_full = (k_cross @ alphas).T
    return mu_full, mu_components, sigma


def latent_sigma(model, x, x_star):
    """Noise-free predictive sd at x_star given conditioning inputs x.

    Depends only on the input geometry, never on targets.
    """
    _, _, _, sigma = _posterior_core(model, x, x_star)
    return sigma


def sample_prior(model, x, seed):
    """One draw from N(0, K_noisy) at inputs x, deterministic in seed."""
    k_core = gram_matrix(model, x, include_noise=False)
    chol, _ = _chol_noisy(model, k_core)
    z = np.random.default_rng(seed).standard_normal(k_core.shape[0])
    return chol @ z


def model_to_dict(model, priors=None):
    out = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "components": [
            {"kind": c.kind, "lengthscale": c.lengthscale, "amplitude": c.amplitude}
            for c in model.components
        ],
        "noise": model.noise,
        "optimizer": dict(model.meta),
    }
    if priors is not None:
        out["prior"] = {
            "lengthscales": [[p.log_mean, p.log_sd] for p in priors.lengthscales],
            "amplitudes": [[p.log_mean, p.log_sd] for p in priors.amplitudes],
            "noise": [priors.noise.log_mean, priors.noise.log_sd],
        }
    return out


def model_from_dict(data):
    if data.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model file (format {data.get('format')!r})")
    comps = tuple(
        KernelSpec(c["kind"], c["lengthscale"], c["amplitude"]) for c in data["components"]
    )
    return GPModel(comps, data["noise"], dict(data.get("optimizer", {})))


def save_model(path, model, priors=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, priors), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
