"""Inference-time integrators and log-probability evaluation.

The low-level integrators act on plain callables so they can be driven
by closed-form stub fields in tests as well as by trained networks:

* ``integrate_fm_ode``: fixed-step Euler/midpoint/Heun on a velocity field,
* ``integrate_fm_sde``: Euler-Maruyama on a velocity field augmented with a
  score-dependent drift correction and a vanishing-at-the-ends diffusion,
* ``integrate_sm_reverse_sde`` / ``integrate_sm_pf_ode``: reverse-time
  sampling for VP/VE score models, stochastic or deterministic,
* ``edm_sample``: sigma-space Heun with optional stochastic churn,
* ``fm_log_prob``: continuous change of variables, integrating the state
  backward while accumulating the divergence (exact sum of directional
  derivatives, or a Hutchinson estimate with Rademacher probes).

The estimator-aware layer at the bottom builds those callables from a
trained artifact, enforces solver/method compatibility, standardizes in
and out, and splits RNG streams deterministically per sample index so
batched results do not depend on chunking or worker count.

Times follow the package convention, t=0 noise and t=1 data, with both
endpoints clamped away by the shared epsilon. Score-matching formulas
are evaluated on the diffusion clock via the internal flip tau = 1 - t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IntegrationError, MethodSolverMismatch
from .paths import (
    EPS_T,
    AffinePath,
    EDMPreconditioner,
    edm_precondition,
    edm_sigma_schedule,
    score_from_velocity,
)
from .training import Estimator, make_method
from .utils import map_workers, spawn_rngs

ODE_METHODS = ("euler", "midpoint", "heun")


@dataclass(frozen=True)
class ODESolverConfig:
    method: str = "euler"
    n_steps: int = 100
    t_start: float = EPS_T
    t_end: float = 1.0 - EPS_T

    def __post_init__(self):
        if self.method not in ODE_METHODS:
            raise ConfigurationError(f"method must be one of {ODE_METHODS}, got {self.method!r}")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        clamp = lambda t: float(min(max(t, EPS_T), 1.0 - EPS_T))
        object.__setattr__(self, "t_start", clamp(self.t_start))
        object.__setattr__(self, "t_end", clamp(self.t_end))
        if self.t_start == self.t_end:
            raise ConfigurationError("t_start and t_end coincide after clamping")


@dataclass(frozen=True)
class ChurnParams:
    s_churn: float = 0.0
    s_min: float = 0.0
    s_max: float = math.inf
    s_noise: float = 1.0

    def __post_init__(self):
        if self.s_churn < 0:
            raise ConfigurationError("s_churn must be >= 0")
        if self.s_min > self.s_max:
            raise ConfigurationError("s_min must not exceed s_max")


@dataclass
class LogProbResult:
    """Change-of-variables output; log_density = source_log_density + divergence_integral."""

    log_density: np.ndarray
    divergence_integral: np.ndarray
    source_log_density: np.ndarray
    n_evals: int
    divergence_std_error: np.ndarray | None = None


def _check_finite(x: np.ndarray, step: int):
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite state at step {step}", step=step)


# -- deterministic ODE integration --------------------------------------


def integrate_fm_ode(field, x0: np.ndarray, cfg: ODESolverConfig | None = None,
                     record_trajectory: bool = False):
    """Integrate dx/dt = field(x, t) from cfg.t_start to cfg.t_end.

    Returns the terminal state, or (terminal, times, trajectory) when
    ``record_trajectory`` is set; trajectory has shape (n_steps+1, *x0.shape).
    """
    cfg = cfg or ODESolverConfig()
    x = np.array(x0, dtype=float, copy=True)
    ts = np.linspace(cfg.t_start, cfg.t_end, cfg.n_steps + 1)
    traj = [x.copy()] if record_trajectory else None
    for k in range(cfg.n_steps):
        t, h = ts[k], ts[k + 1] - ts[k]
        x = _ODE_STEPS[cfg.method](field, x, t, h)
        _check_finite(x, k)
        if record_trajectory:
            traj.append(x.copy())
    if record_trajectory:
        return x, ts, np.stack(traj)
    return x


def _euler_step(f, x, t, h):
    return x + h * f(x, t)


def _midpoint_step(f, x, t, h):
    k1 = f(x, t)
    return x + h * f(x + 0.5 * h * k1, t + 0.5 * h)


def _heun_step(f, x, t, h):
    k1 = f(x, t)
    k2 = f(x + h * k1, t + h)
    return x + 0.5 * h * (k1 + k2)


_ODE_STEPS = {"euler": _euler_step, "midpoint": _midpoint_step, "heun": _heun_step}


# -- stochastic flow-matching sampling ----------------------------------

FM_SDE_VARIANTS = ("zero_ends", "non_singular")


def fm_diffusion(variant: str, alpha: float, t):
    if variant == "zero_ends":
        return alpha * np.sqrt(t * (1.0 - t))
    if variant == "non_singular":
        return alpha * np.sqrt(1.0 - t)
    raise ConfigurationError(f"variant must be one of {FM_SDE_VARIANTS}, got {variant!r}")


def integrate_fm_sde(field, score, x0: np.ndarray, rng=None, variant: str = "zero_ends",
                     alpha: float = 1.0, n_steps: int = 200, noise: np.ndarray | None = None,
                     mask: np.ndarray | None = None) -> np.ndarray:
    """Euler-Maruyama on dx = [v + (g^2/2) s] dt + g dW with g = fm_diffusion.

    alpha=0 reduces bit-exactly to Euler ODE integration of the field; the
    score callable is then never evaluated. ``noise`` may supply the
    per-step standard-normal increments, shape (n_steps, *x0.shape).
    """
    if alpha < 0:
        raise ConfigurationError("alpha must be >= 0")
    if alpha > 0 and rng is None and noise is None:
        raise ConfigurationError("stochastic sampling needs an rng or a noise array")
    x = np.array(x0, dtype=float, copy=True)
    ts = np.linspace(EPS_T, 1.0 - EPS_T, n_steps + 1)
    for k in range(n_steps):
        t, h = ts[k], ts[k + 1] - ts[k]
        g = fm_diffusion(variant, alpha, t)
        if g == 0.0:
            x = x + h * field(x, t)
        else:
            drift = field(x, t) + 0.5 * g * g * score(x, t)
            xi = noise[k] if noise is not None else rng.standard_normal(x.shape)
            if mask is not None:
                xi = (1.0 - mask) * xi
            x = x + h * drift + g * math.sqrt(h) * xi
        _check_finite(x, k)
    return x


# -- score-model sampling -----------------------------------------------


def _sm_drift(sde_method, x, tau):
    """Forward-process drift f(x, tau) on the diffusion clock."""
    if sde_method.sde == "vp":
        return -0.5 * sde_method.vp.beta(tau) * x
    return np.zeros_like(x)


def integrate_sm_reverse_sde(score, x0: np.ndarray, sde_method, rng=None,
                             n_steps: int = 1000, noise: np.ndarray | None = None,
                             mask: np.ndarray | None = None) -> np.ndarray:
    """Reverse-time diffusion dx = [g^2 s - f] dt + g dW, noise to data."""
    if rng is None and noise is None:
        raise ConfigurationError("reverse SDE needs an rng or a noise array")
    x = np.array(x0, dtype=float, copy=True)
    ts = np.linspace(EPS_T, 1.0 - EPS_T, n_steps + 1)
    for k in range(n_steps):
        t, h = ts[k], ts[k + 1] - ts[k]
        tau = 1.0 - t
        g2 = sde_method.squared_diffusion(tau)
        drift = g2 * score(x, t) - _sm_drift(sde_method, x, tau)
        xi = noise[k] if noise is not None else rng.standard_normal(x.shape)
        if mask is not None:
            drift = (1.0 - mask) * drift
            xi = (1.0 - mask) * xi
        x = x + h * drift + math.sqrt(g2 * h) * xi
        _check_finite(x, k)
    return x


def sm_pf_ode_field(score, sde_method):
    """Probability-flow right-hand side: dx/dt = (g^2/2) s - f in package time."""

    def rhs(x, t):
        tau = 1.0 - t
        return 0.5 * sde_method.squared_diffusion(tau) * score(x, t) - _sm_drift(sde_method, x, tau)

    return rhs


def integrate_sm_pf_ode(score, x0: np.ndarray, sde_method,
                        cfg: ODESolverConfig | None = None) -> np.ndarray:
    cfg = cfg or ODESolverConfig(n_steps=200)
    return integrate_fm_ode(sm_pf_ode_field(score, sde_method), x0, cfg)


def sm_prior_std(sde_method) -> float:
    return 1.0 if sde_method.sde == "vp" else sde_method.ve.sigma_max


# -- EDM sampling -------------------------------------------------------


def edm_sample(denoiser, latents: np.ndarray, p: EDMPreconditioner, rng=None,
               n_steps: int = 18, churn: ChurnParams = ChurnParams(),
               noise: np.ndarray | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    """Heun integration over the sigma schedule with optional churn.

    ``latents`` must already be scaled by sigma_max. The denoiser is
    called as denoiser(x, sigma) with scalar sigma; it is never invoked
    at sigma=0 (the final grid point only serves as an update target).
    """
    if churn.s_churn > 0 and rng is None and noise is None:
        raise ConfigurationError("churn needs an rng or a noise array")
    sigmas = edm_sigma_schedule(n_steps, p)
    x = np.array(latents, dtype=float, copy=True)
    for i in range(n_steps):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        gamma = 0.0
        if churn.s_churn > 0 and churn.s_min <= sigma <= churn.s_max:
            gamma = min(churn.s_churn / n_steps, math.sqrt(2.0) - 1.0)
        if gamma > 0:
            sigma_hat = sigma * (1.0 + gamma)
            eps = noise[i] if noise is not None else rng.standard_normal(x.shape)
            if mask is not None:
                eps = (1.0 - mask) * eps
            x_hat = x + math.sqrt(sigma_hat**2 - sigma**2) * churn.s_noise * eps
        else:
            sigma_hat = sigma
            x_hat = x
        d = (x_hat - denoiser(x_hat, sigma_hat)) / sigma_hat
        if mask is not None:
            d = (1.0 - mask) * d
        x = x_hat + (sigma_next - sigma_hat) * d
        if sigma_next > 0:
            d_next = (x - denoiser(x, sigma_next)) / sigma_next
            if mask is not None:
                d_next = (1.0 - mask) * d_next
            x = x_hat + (sigma_next - sigma_hat) * 0.5 * (d + d_next)
        _check_finite(x, i)
    return x


# -- log probability ----------------------------------------------------


def standard_normal_logpdf(x: np.ndarray, std: float = 1.0, indices=None) -> np.ndarray:
    """Row-wise log N(0, std^2 I), optionally over a coordinate subset."""
    z = x if indices is None else x[:, indices]
    d = z.shape[1]
    return -0.5 * np.sum((z / std) ** 2, axis=1) - d * (0.5 * math.log(2.0 * math.pi) + math.log(std))


def fm_log_prob(field, jvp, x1: np.ndarray, divergence: str = "exact",
                n_probes: int = 32, rng=None, n_steps: int = 200,
                source_std: float = 1.0, indices=None,
                probes: np.ndarray | None = None) -> LogProbResult:
    """Backward change-of-variables: state t:1->0 with a divergence accumulator.

    ``jvp(x, t, direction)`` must return the Jacobian-vector product of the
    field at (x, t). Exact mode sums the directional derivatives along the
    coordinate basis (restricted to ``indices`` when given, as in joint
    conditioning where only unobserved coordinates flow). Hutchinson mode
    averages eps.J.eps over Rademacher probes held fixed along the
    trajectory, so the probe spread directly yields a standard error for
    the integral.
    """
    if divergence not in ("exact", "hutchinson"):
        raise ConfigurationError(f"divergence must be 'exact' or 'hutchinson', got {divergence!r}")
    x = np.array(x1, dtype=float, copy=True)
    n, d = x.shape
    idx = np.arange(d) if indices is None else np.asarray(indices, dtype=int)
    ts = np.linspace(1.0 - EPS_T, EPS_T, n_steps + 1)

    if divergence == "exact":
        basis = [np.zeros((1, d)) for _ in idx]
        for row, i in zip(basis, idx):
            row[0, i] = 1.0
        acc = np.zeros(n)
        n_dirs = len(idx)
    else:
        if probes is None:
            if rng is None:
                raise ConfigurationError("hutchinson divergence needs an rng or explicit probes")
            probes = rng.choice([-1.0, 1.0], size=(n_probes, n, d))
            if indices is not None:
                off = np.ones(d, dtype=bool)
                off[idx] = False
                probes[:, :, off] = 0.0
        n_probes = probes.shape[0]
        acc = np.zeros((n_probes, n))
        n_dirs = n_probes

    for k in range(n_steps):
        t, h = ts[k], ts[k] - ts[k + 1]
        if divergence == "exact":
            div = np.zeros(n)
            for row, i in zip(basis, idx):
                div += jvp(x, t, np.broadcast_to(row, (n, d)))[:, i]
            acc += h * div
        else:
            for pi in range(n_probes):
                acc[pi] += h * np.sum(probes[pi] * jvp(x, t, probes[pi]), axis=1)
        x = x - h * field(x, t)
        _check_finite(x, k)

    source = standard_normal_logpdf(x, std=source_std, indices=idx)
    n_evals = n_steps * (1 + n_dirs)
    if divergence == "exact":
        div_integral = -acc
        return LogProbResult(source + div_integral, div_integral, source, n_evals,
                             np.zeros(n))
    div_integral = -acc.mean(axis=0)
    if n_probes > 1:
        se = acc.std(axis=0, ddof=1) / math.sqrt(n_probes)
    else:
        se = np.full(n, np.nan)
    return LogProbResult(source + div_integral, div_integral, source, n_evals, se)


# -- estimator-aware layer ----------------------------------------------

SOLVERS_BY_METHOD = {
    "flow_matching": ("ode", "sde"),
    "score_matching": ("sde", "pf_ode"),
    "diffusion_edm": ("edm",),
}
DEFAULT_STEPS = {
    ("flow_matching", "ode"): 100,
    ("flow_matching", "sde"): 200,
    ("score_matching", "sde"): 1000,
    ("score_matching", "pf_ode"): 200,
    ("diffusion_edm", "edm"): 18,
}


def resolve_solver(method_tag: str, solver: str | None) -> str:
    allowed = SOLVERS_BY_METHOD.get(method_tag)
    if allowed is None:
        raise ConfigurationError(f"unknown method tag {method_tag!r}")
    if solver is None:
        return allowed[0]
    if solver not in allowed:
        raise MethodSolverMismatch(
            f"solver {solver!r} does not apply to a {method_tag} model; choose from {allowed}"
        )
    return solver


class BoundFields:
    """Network callables over the standardized state for one conditioning context.

    In joint mode the network sees observed coordinates clean (substituted
    after any input scaling) and the dynamics are zeroed there, so every
    solver keeps them pinned bit-exactly.
    """

    def __init__(self, estimator: Estimator, cond: np.ndarray | None = None,
                 mask: np.ndarray | None = None, clean: np.ndarray | None = None):
        self.estimator = estimator
        self.model = estimator.model
        self.params = estimator.eval_params
        self.cond = cond
        self.mask = mask
        self.clean = clean
        self.method = make_method(estimator.method, estimator.method_state)
        if mask is not None and clean is None:
            raise ConfigurationError("a mask needs the observed clean values")

    def _mask_rows(self, n: int):
        return None if self.mask is None else np.broadcast_to(self.mask, (n, self.mask.shape[-1]))

    def _cond_rows(self, n: int):
        if self.cond is None:
            return None
        cond = np.atleast_2d(self.cond)
        return np.broadcast_to(cond, (n, cond.shape[-1]))

    def _net(self, x_in, tvec, n):
        return self.model.forward(self.params, x_in, tvec, cond=self._cond_rows(n),
                                  mask=self._mask_rows(n))

    def _substitute(self, x):
        if self.mask is None:
            return x
        return (1.0 - self.mask) * x + self.mask * self.clean

    def _mask_out(self, out):
        return out if self.mask is None else (1.0 - self.mask) * out

    def mask_wrap(self, fn):
        """Zero a field's dynamics on observed coordinates."""
        if self.mask is None:
            return fn
        return lambda x, t: (1.0 - self.mask) * fn(x, t)

    def raw(self, x, t_scalar):
        n = x.shape[0]
        return self._net(self._substitute(x), np.full(n, t_scalar), n)

    def field(self, x, t_scalar):
        """Masked velocity or score, by whichever the method regressed."""
        return self._mask_out(self.raw(x, t_scalar))

    def jvp(self, x, t_scalar, direction):
        n = x.shape[0]
        if self.mask is not None:
            direction = (1.0 - self.mask) * direction
        out = self.model.jvp_input(self.params, self._substitute(x), np.full(n, t_scalar),
                                   cond=self._cond_rows(n), mask=self._mask_rows(n),
                                   direction=direction)
        return self._mask_out(out)

    def denoiser(self, x, sigma):
        p = self.precond
        c_skip, c_out, c_in, c_noise = edm_precondition(p, sigma)
        n = x.shape[0]
        out = self._net(self._substitute(c_in * x), np.full(n, c_noise), n)
        return c_skip * x + c_out * out

    @property
    def precond(self) -> EDMPreconditioner:
        return self.method.preconditioner()


def _fm_score(bound: BoundFields, path: AffinePath):
    def score(x, t):
        return bound._mask_out(score_from_velocity(path, t, x, bound.field(x, t)))

    return score


def _prior_rows(estimator, bound, sample_rngs, d):
    """Per-sample latent draws in standardized space, observed coords pinned."""
    if estimator.method == "flow_matching":
        std = 1.0
    elif estimator.method == "score_matching":
        std = sm_prior_std(bound.method)
    else:
        std = bound.precond.sigma_max
    x0 = np.stack([g.standard_normal(d) for g in sample_rngs]) * std
    if bound.mask is not None:
        x0 = (1.0 - bound.mask) * x0 + bound.mask * bound.clean
    return x0


def _noise_paths(sample_rngs, n_steps, d):
    return np.stack([g.standard_normal((n_steps, d)) for g in sample_rngs], axis=1)


def _sample_chunk(estimator, bound, sample_rngs, solver, n_steps, scheme,
                  variant, alpha, churn):
    d = estimator.config.input_dim
    x0 = _prior_rows(estimator, bound, sample_rngs, d)
    if solver == "ode":
        cfg = ODESolverConfig(method=scheme, n_steps=n_steps)
        return integrate_fm_ode(bound.field, x0, cfg)
    if solver == "pf_ode":
        cfg = ODESolverConfig(method=scheme, n_steps=n_steps)
        rhs = bound.mask_wrap(sm_pf_ode_field(bound.field, bound.method))
        return integrate_fm_ode(rhs, x0, cfg)
    noise = _noise_paths(sample_rngs, n_steps, d)
    if solver == "sde" and estimator.method == "flow_matching":
        path = AffinePath.condot()
        return integrate_fm_sde(bound.field, _fm_score(bound, path), x0, variant=variant,
                                alpha=alpha, n_steps=n_steps, noise=noise, mask=bound.mask)
    if solver == "sde":
        return integrate_sm_reverse_sde(bound.field, x0, bound.method, n_steps=n_steps,
                                        noise=noise, mask=bound.mask)
    return edm_sample(bound.denoiser, x0, bound.precond, n_steps=n_steps,
                      churn=churn or ChurnParams(), noise=noise, mask=bound.mask)


def sample_conditioned(estimator: Estimator, n_samples: int, rng,
                       cond: np.ndarray | None = None, mask: np.ndarray | None = None,
                       observed: np.ndarray | None = None, solver: str | None = None,
                       n_steps: int | None = None, scheme: str = "euler",
                       variant: str = "zero_ends", alpha: float = 1.0,
                       churn: ChurnParams | None = None, chunk_size: int = 1024) -> np.ndarray:
    """Draw standardized-space samples; the public wrappers map units.

    ``mask``/``observed`` (joint pipeline) are in standardized space too;
    entries of ``observed`` at unobserved coordinates are ignored.
    """
    solver = resolve_solver(estimator.method, solver)
    n_steps = n_steps if n_steps is not None else DEFAULT_STEPS[(estimator.method, solver)]
    bound = BoundFields(estimator, cond=cond, mask=mask, clean=observed)
    rngs = spawn_rngs(rng, n_samples)
    chunks = [(lo, min(lo + chunk_size, n_samples)) for lo in range(0, n_samples, chunk_size)]

    def run(bounds):
        lo, hi = bounds
        return _sample_chunk(estimator, bound, rngs[lo:hi], solver, n_steps, scheme,
                             variant, alpha, churn)

    return np.concatenate(map_workers(run, chunks), axis=0)


def sample_posterior(estimator: Estimator, x_obs: np.ndarray, n_samples: int, rng,
                     **options) -> np.ndarray:
    """Posterior draws for one observation, in original parameter units."""
    from .training import destandardize, standardize

    x_obs = np.asarray(x_obs, dtype=float).reshape(-1)
    if x_obs.shape[0] != len(estimator.x_mean):
        raise ConfigurationError(
            f"observation has {x_obs.shape[0]} entries, expected {len(estimator.x_mean)}"
        )
    x_std = standardize(x_obs, estimator.x_mean, estimator.x_std)
    d_theta = estimator.d_theta
    if estimator.pipeline == "conditional":
        z = sample_conditioned(estimator, n_samples, rng, cond=x_std, **options)
        return destandardize(z, estimator.theta_mean, estimator.theta_std)
    if estimator.pipeline == "joint":
        d = estimator.config.input_dim
        mask = np.zeros(d)
        mask[d_theta:] = 1.0
        observed = np.concatenate([np.zeros(d_theta), x_std])
        z = sample_conditioned(estimator, n_samples, rng, mask=mask, observed=observed, **options)
        return destandardize(z[:, :d_theta], estimator.theta_mean, estimator.theta_std)
    raise ConfigurationError("posterior sampling needs a conditional or joint estimator")


def sample_likelihood(estimator: Estimator, theta: np.ndarray, n_samples: int, rng,
                      **options) -> np.ndarray:
    """Simulator-space draws with the parameters held observed (joint models only)."""
    from .training import destandardize, standardize

    if estimator.pipeline != "joint":
        raise ConfigurationError("likelihood sampling needs a joint estimator")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    d_theta = estimator.d_theta
    if theta.shape[0] != d_theta:
        raise ConfigurationError(f"theta has {theta.shape[0]} entries, expected {d_theta}")
    theta_s = standardize(theta, estimator.theta_mean, estimator.theta_std)
    d = estimator.config.input_dim
    mask = np.zeros(d)
    mask[:d_theta] = 1.0
    observed = np.concatenate([theta_s, np.zeros(d - d_theta)])
    z = sample_conditioned(estimator, n_samples, rng, mask=mask, observed=observed, **options)
    return destandardize(z[:, d_theta:], estimator.x_mean, estimator.x_std)


def sample_unconditional(estimator: Estimator, n_samples: int, rng, **options) -> np.ndarray:
    """Draws from the modelled marginal, in original units."""
    from .training import destandardize

    if estimator.pipeline != "unconditional":
        raise ConfigurationError(f"estimator pipeline is {estimator.pipeline!r}, not unconditional")
    z = sample_conditioned(estimator, n_samples, rng, **options)
    return destandardize(z, estimator.theta_mean, estimator.theta_std)


def log_prob(estimator: Estimator, thetas: np.ndarray, x_obs: np.ndarray | None = None,
             divergence: str = "exact", n_probes: int = 32, rng=None,
             n_steps: int = 200, solver: str | None = None) -> LogProbResult:
    """Exact-dynamics log density of thetas (given x_obs unless unconditional).

    Supported for flow matching (velocity ODE) and score matching
    (probability-flow ODE); the stochastic EDM sampler admits no exact
    density and is rejected. Densities are reported in original units,
    with the standardization Jacobian folded into source_log_density so
    the additive invariant still holds on the returned numbers.
    """
    from .training import standardize

    if estimator.method == "diffusion_edm":
        raise MethodSolverMismatch("log_prob needs deterministic dynamics; "
                                   "the EDM sampler has no exact density")
    solver = resolve_solver(estimator.method, solver if solver is not None
                            else ("ode" if estimator.method == "flow_matching" else "pf_ode"))
    if solver == "sde":
        raise MethodSolverMismatch("log_prob requires an ODE solver, not 'sde'")

    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    theta_std = standardize(thetas, estimator.theta_mean, estimator.theta_std)
    n = theta_std.shape[0]
    d_theta = estimator.d_theta

    cond = mask = observed = None
    indices = None
    if estimator.pipeline == "conditional":
        if x_obs is None:
            raise ConfigurationError("conditional log_prob needs x_obs")
        cond = standardize(np.asarray(x_obs, dtype=float).reshape(-1),
                           estimator.x_mean, estimator.x_std)
        state = theta_std
    elif estimator.pipeline == "joint":
        if x_obs is None:
            raise ConfigurationError("joint log_prob needs x_obs")
        x_std = standardize(np.asarray(x_obs, dtype=float).reshape(-1),
                            estimator.x_mean, estimator.x_std)
        d = estimator.config.input_dim
        mask = np.zeros(d)
        mask[d_theta:] = 1.0
        observed = np.concatenate([np.zeros(d_theta), x_std])
        state = np.concatenate([theta_std, np.broadcast_to(x_std, (n, x_std.shape[0]))], axis=1)
        indices = np.arange(d_theta)
    else:
        state = theta_std

    bound = BoundFields(estimator, cond=cond, mask=mask, clean=observed)
    if estimator.method == "flow_matching":
        field, jvp = bound.field, bound.jvp
        source_std = 1.0
    else:
        field = bound.mask_wrap(sm_pf_ode_field(bound.field, bound.method))
        jvp = _pf_ode_jvp(bound)
        source_std = sm_prior_std(bound.method)

    result = fm_log_prob(field, jvp, state, divergence=divergence, n_probes=n_probes,
                         rng=rng, n_steps=n_steps, source_std=source_std, indices=indices)
    jac = float(np.sum(np.log(estimator.theta_std)))
    result.log_density = result.log_density - jac
    result.source_log_density = result.source_log_density - jac
    return result


def _pf_ode_jvp(bound: BoundFields):
    """Jacobian-vector product of the probability-flow right-hand side."""

    def jvp(x, t, direction):
        tau = 1.0 - t
        g2 = bound.method.squared_diffusion(tau)
        out = 0.5 * g2 * bound.jvp(x, t, direction)
        if bound.method.sde == "vp":
            drift_dir = -0.5 * bound.method.vp.beta(tau) * direction
            out = out - (bound._mask_out(drift_dir) if bound.mask is not None else drift_dir)
        return out

    return jvp
