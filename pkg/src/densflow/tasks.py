"""Benchmark tasks: simulators, priors, and reference posteriors.

Four desk-scale problems with known structure:

* two_moons: crescent-shaped 2-D posterior with a global sign ambiguity;
  reference posterior by rejection sampling against the closed-form
  likelihood (the angle integrates out analytically in polar form).
* gaussian_linear: 10-D conjugate Gaussian with an analytic posterior.
* gaussian_mixture: equal-weight wide/narrow mixture centred on theta;
  reference posterior by categorical resampling of a dense grid.
* checkerboard: unconditional 2-D density on the even cells of a 4x4
  grid over [-2, 2]^2; no conditioning, no reference sampler.

All simulators are pure functions of (theta, rng); dataset generation
splits one RNG stream per row so the file content is reproducible byte
for byte and independent of any parallel execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .training import Dataset, save_dataset
from .utils import spawn_rngs

REFERENCE_KINDS = ("analytic", "grid_oracle", "rejection_oracle", "none")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    d_theta: int
    d_x: int
    prior_sample: Callable  # (rng, n) -> (n, d_theta)
    prior_logpdf: Callable  # (thetas) -> (n,)
    simulate_row: Callable  # (theta, rng) -> (d_x,)
    reference: str
    reference_sample: Callable | None = None  # (x_obs, n, rng) -> (n, d_theta)

    def __post_init__(self):
        if self.reference not in REFERENCE_KINDS:
            raise ConfigurationError(f"reference must be one of {REFERENCE_KINDS}")
        if self.reference != "none" and self.reference_sample is None:
            raise ConfigurationError("a reference kind needs a reference_sample callable")


# -- two moons ----------------------------------------------------------

_TM_R_MEAN = 0.1
_TM_R_STD = 0.01


def _two_moons_shift(theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(theta)
    s = np.stack([-np.abs(theta[:, 0] + theta[:, 1]),
                  -theta[:, 0] + theta[:, 1]], axis=1)
    return s / math.sqrt(2.0)


def two_moons_simulate(theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a = rng.uniform(-math.pi / 2, math.pi / 2)
    r = rng.normal(_TM_R_MEAN, _TM_R_STD)
    crescent = np.array([r * math.cos(a) + 0.25, r * math.sin(a)])
    return crescent + _two_moons_shift(theta)[0]


def two_moons_log_likelihood(thetas: np.ndarray, x_obs: np.ndarray) -> np.ndarray:
    """log p(x_obs | theta), the angle marginalised in closed form.

    In the crescent frame u = x - shift(theta), the generative map is
    polar: u = (r cos a + 0.25, r sin a) with a uniform on (-pi/2, pi/2)
    and r Gaussian. Changing variables gives density
    p(u) = (1/pi) * N(r(u); 0.1, 0.01^2) / r(u) on the half-plane
    u_1 > 0.25, zero elsewhere (negative r carries negligible mass).
    """
    u = np.asarray(x_obs, dtype=float) - _two_moons_shift(thetas)
    du = u[:, 0] - 0.25
    r = np.hypot(du, u[:, 1])
    with np.errstate(divide="ignore"):
        log_pr = (-0.5 * ((r - _TM_R_MEAN) / _TM_R_STD) ** 2
                  - math.log(_TM_R_STD * math.sqrt(2.0 * math.pi)))
        out = log_pr - np.log(r) - math.log(math.pi)
    out = np.where((du > 0) & (r > 0), out, -np.inf)
    return out


def two_moons_reference(x_obs: np.ndarray, n_samples: int, rng: np.random.Generator,
                        batch: int = 20000) -> np.ndarray:
    """Rejection sampling from the prior against the closed-form likelihood.

    The acceptance bound comes from a dense grid scan of the likelihood
    over the prior square, doubled for safety; acceptance probabilities
    are clipped at 1 so an underestimated bound degrades accuracy
    gracefully instead of crashing.
    """
    g = np.linspace(-1.0, 1.0, 257)
    t0, t1 = np.meshgrid(g, g, indexing="ij")
    grid = np.stack([t0.ravel(), t1.ravel()], axis=1)
    log_m = two_moons_log_likelihood(grid, x_obs).max()
    if not np.isfinite(log_m):
        raise ValueError("likelihood vanishes on the prior support")
    log_m += math.log(2.0)
    out = np.empty((n_samples, 2))
    got = 0
    while got < n_samples:
        props = rng.uniform(-1.0, 1.0, (batch, 2))
        logp = two_moons_log_likelihood(props, x_obs)
        accept = np.log(rng.uniform(size=batch)) < np.minimum(logp - log_m, 0.0)
        keep = props[accept][: n_samples - got]
        out[got : got + keep.shape[0]] = keep
        got += keep.shape[0]
    return out


def _uniform_box_logpdf(thetas: np.ndarray, lo: float, hi: float) -> np.ndarray:
    thetas = np.atleast_2d(thetas)
    inside = np.all((thetas >= lo) & (thetas <= hi), axis=1)
    d = thetas.shape[1]
    return np.where(inside, -d * math.log(hi - lo), -np.inf)


# -- gaussian linear ----------------------------------------------------

_GL_DIM = 10
_GL_PRIOR_VAR = 0.1
_GL_LIK_VAR = 0.1


def gaussian_linear_simulate(theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return theta + math.sqrt(_GL_LIK_VAR) * rng.standard_normal(_GL_DIM)


def gaussian_linear_posterior(x_obs: np.ndarray):
    """Conjugate posterior (mean, covariance) given one observation."""
    x_obs = np.asarray(x_obs, dtype=float)
    post_var = 1.0 / (1.0 / _GL_PRIOR_VAR + 1.0 / _GL_LIK_VAR)
    mean = post_var * x_obs / _GL_LIK_VAR
    return mean, post_var * np.eye(_GL_DIM)


def gaussian_linear_reference(x_obs: np.ndarray, n_samples: int,
                              rng: np.random.Generator) -> np.ndarray:
    mean, cov = gaussian_linear_posterior(x_obs)
    std = math.sqrt(cov[0, 0])
    return mean + std * rng.standard_normal((n_samples, _GL_DIM))


# -- gaussian mixture ---------------------------------------------------

_GM_STDS = (1.0, 0.1)
_GM_BOX = 10.0
_GM_GRID = 512


def gaussian_mixture_simulate(theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    std = _GM_STDS[0] if rng.uniform() < 0.5 else _GM_STDS[1]
    return theta + std * rng.standard_normal(2)


def gaussian_mixture_log_likelihood(thetas: np.ndarray, x_obs: np.ndarray) -> np.ndarray:
    thetas = np.atleast_2d(thetas)
    diff_sq = np.sum((np.asarray(x_obs) - thetas) ** 2, axis=1)
    comps = []
    for std in _GM_STDS:
        comps.append(-0.5 * diff_sq / std**2 - 2.0 * math.log(std) - math.log(2.0 * math.pi))
    a, b = comps
    hi = np.maximum(a, b)
    return hi + np.log(0.5 * np.exp(a - hi) + 0.5 * np.exp(b - hi))


def gaussian_mixture_reference(x_obs: np.ndarray, n_samples: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Categorical resampling of the posterior on a dense grid.

    Cell weights are likelihood times (flat) prior; half-a-cell Gaussian
    jitter removes the lattice artefacts.
    """
    edges = np.linspace(-_GM_BOX, _GM_BOX, _GM_GRID + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    h = edges[1] - edges[0]
    c0, c1 = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([c0.ravel(), c1.ravel()], axis=1)
    logw = gaussian_mixture_log_likelihood(pts, x_obs)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    idx = rng.choice(pts.shape[0], size=n_samples, p=w)
    return pts[idx] + (h / 2.0) * rng.standard_normal((n_samples, 2))


# -- checkerboard -------------------------------------------------------

_CB_LO, _CB_HI = -2.0, 2.0
_CB_CELLS = 4


def _cell_index(coord: np.ndarray) -> np.ndarray:
    # Boundary points resolve to the lower cell by the ceil convention.
    idx = np.ceil(np.asarray(coord) - _CB_LO).astype(int) - 1
    return np.clip(idx, 0, _CB_CELLS - 1)


def checkerboard_indicator(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    inside = np.all((x >= _CB_LO) & (x <= _CB_HI), axis=1)
    parity = (_cell_index(x[:, 0]) + _cell_index(x[:, 1])) % 2 == 0
    return inside & parity


def valid_checkerboard_cells() -> np.ndarray:
    """Lower-left integer indices of the valid cells, row-major."""
    cells = [(i, j) for i in range(_CB_CELLS) for j in range(_CB_CELLS) if (i + j) % 2 == 0]
    return np.asarray(cells)


def checkerboard_sample(n: int, rng: np.random.Generator) -> np.ndarray:
    cells = valid_checkerboard_cells()
    pick = rng.integers(0, cells.shape[0], size=n)
    corner = _CB_LO + cells[pick]
    return corner + rng.uniform(0.0, 1.0, (n, 2))


def checkerboard_logpdf(x: np.ndarray) -> np.ndarray:
    valid = checkerboard_indicator(x)
    return np.where(valid, -math.log(float(valid_checkerboard_cells().shape[0])), -np.inf)


# -- registry and dataset generation ------------------------------------


def _make_two_moons() -> TaskSpec:
    return TaskSpec(
        name="two_moons", d_theta=2, d_x=2,
        prior_sample=lambda rng, n: rng.uniform(-1.0, 1.0, (n, 2)),
        prior_logpdf=lambda th: _uniform_box_logpdf(th, -1.0, 1.0),
        simulate_row=two_moons_simulate,
        reference="rejection_oracle",
        reference_sample=two_moons_reference,
    )


def _make_gaussian_linear() -> TaskSpec:
    std = math.sqrt(_GL_PRIOR_VAR)

    def prior_logpdf(th):
        th = np.atleast_2d(th)
        return (-0.5 * np.sum(th * th, axis=1) / _GL_PRIOR_VAR
                - _GL_DIM * (0.5 * math.log(2.0 * math.pi) + math.log(std)))

    return TaskSpec(
        name="gaussian_linear", d_theta=_GL_DIM, d_x=_GL_DIM,
        prior_sample=lambda rng, n: std * rng.standard_normal((n, _GL_DIM)),
        prior_logpdf=prior_logpdf,
        simulate_row=gaussian_linear_simulate,
        reference="analytic",
        reference_sample=gaussian_linear_reference,
    )


def _make_gaussian_mixture() -> TaskSpec:
    return TaskSpec(
        name="gaussian_mixture", d_theta=2, d_x=2,
        prior_sample=lambda rng, n: rng.uniform(-_GM_BOX, _GM_BOX, (n, 2)),
        prior_logpdf=lambda th: _uniform_box_logpdf(th, -_GM_BOX, _GM_BOX),
        simulate_row=gaussian_mixture_simulate,
        reference="grid_oracle",
        reference_sample=gaussian_mixture_reference,
    )


def _make_checkerboard() -> TaskSpec:
    return TaskSpec(
        name="checkerboard", d_theta=2, d_x=0,
        prior_sample=lambda rng, n: checkerboard_sample(n, rng),
        prior_logpdf=checkerboard_logpdf,
        simulate_row=lambda theta, rng: np.zeros(0),
        reference="none",
    )


_REGISTRY = {
    "two_moons": _make_two_moons,
    "gaussian_linear": _make_gaussian_linear,
    "gaussian_mixture": _make_gaussian_mixture,
    "checkerboard": _make_checkerboard,
}

TASK_NAMES = tuple(sorted(_REGISTRY))


def get_task(name: str) -> TaskSpec:
    if name not in _REGISTRY:
        raise ConfigurationError(f"unknown task {name!r}; available: {', '.join(TASK_NAMES)}")
    return _REGISTRY[name]()


def generate_dataset(task: TaskSpec, n_sims: int, seed: int,
                     path: str | None = None) -> Dataset:
    """Prior draws pushed through the simulator, one RNG stream per row."""
    if n_sims < 1:
        raise ConfigurationError("n_sims must be >= 1")
    rngs = spawn_rngs(np.random.default_rng(seed), n_sims)
    thetas = np.empty((n_sims, task.d_theta))
    xs = np.empty((n_sims, task.d_x))
    for i, rng in enumerate(rngs):
        thetas[i] = task.prior_sample(rng, 1)[0]
        xs[i] = task.simulate_row(thetas[i], rng)
    ds = Dataset(thetas=thetas, xs=xs)
    if path is not None:
        save_dataset(ds, path)
    return ds
