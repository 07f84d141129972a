"""Posterior validation: calibration, coverage, and two-sample tests.

Everything here consumes samples (or a sampler callable) and ground
truth; nothing depends on how the posterior was produced. The suite:

* simulation-based calibration ranks with a KS uniformity test,
* TARP expected-coverage curves against random reference points,
* classifier two-sample test (C2ST) with a cross-validated MLP,
* its local variant (LC2ST) with a permutation null at one observation,
* per-dimension marginal coverage via equal-tailed or KDE-HDI intervals.

Binomial uncertainty is reported as Jeffreys intervals throughout.
Classifier-based metrics delegate the classifier to scikit-learn; the
surrounding statistics are computed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier

from .errors import ConfigurationError
from .utils import map_workers


@dataclass
class RankStatistics:
    ranks: np.ndarray  # (n_sbc, d_theta) integers in [0, n_post]
    n_post: int

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks)
        if self.ranks.min() < 0 or self.ranks.max() > self.n_post:
            raise ValueError("ranks must lie in [0, n_post]")


@dataclass
class ECPCurve:
    alphas: np.ndarray
    ecp: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int


@dataclass
class C2STResult:
    accuracy: float
    fold_accuracies: list
    n_per_class: int


@dataclass
class CoverageCurve:
    alphas: np.ndarray
    coverage: np.ndarray  # (n_alphas, d)
    lower: np.ndarray
    upper: np.ndarray
    n: int


# -- simulation-based calibration ---------------------------------------


def run_sbc(posterior_sampler, prior_sample, simulate_row, n_sbc: int, n_post: int,
            rng: np.random.Generator) -> RankStatistics:
    """Rank the ground truth within posterior draws over simulated pairs.

    posterior_sampler(x_obs, n_post, rng) must return an (n_post, d)
    matrix. rank_ij counts posterior draws strictly below the truth, so
    exact posteriors give uniform ranks on {0, ..., n_post}.
    """
    ranks = []
    for _ in range(n_sbc):
        theta = prior_sample(rng, 1)[0]
        x = simulate_row(theta, rng)
        draws = posterior_sampler(x, n_post, rng)
        if draws.shape != (n_post, theta.shape[0]):
            raise ValueError(f"sampler returned shape {draws.shape}, "
                             f"expected {(n_post, theta.shape[0])}")
        ranks.append(np.sum(draws < theta, axis=0))
    return RankStatistics(np.asarray(ranks, dtype=int), n_post)


def ks_uniformity(ranks_column: np.ndarray, n_post: int) -> float:
    """Two-sided asymptotic KS p-value of ranks/n_post against U[0,1]."""
    u = np.asarray(ranks_column, dtype=float) / n_post
    return float(stats.kstest(u, "uniform", mode="asymp").pvalue)


# -- TARP ---------------------------------------------------------------


def jeffreys_interval(k: int, n: int, confidence: float = 0.95):
    """Beta(k+1/2, n-k+1/2) equal-tailed interval, endpoints pinned at 0/1."""
    if not (0 <= k <= n) or n < 1:
        raise ValueError("need 0 <= k <= n with n >= 1")
    lo_q, hi_q = (1.0 - confidence) / 2.0, (1.0 + confidence) / 2.0
    dist = stats.beta(k + 0.5, n - k + 0.5)
    lower = 0.0 if k == 0 else float(dist.ppf(lo_q))
    upper = 1.0 if k == n else float(dist.ppf(hi_q))
    return lower, upper


def tarp_ecp(posterior_samples: np.ndarray, theta_true: np.ndarray,
             rng: np.random.Generator, alphas: np.ndarray | None = None,
             expand: float = 0.1, confidence: float = 0.95) -> ECPCurve:
    """Expected coverage from distances to random reference points.

    Distances are computed after standardizing with the truth set's own
    per-dimension statistics; references are uniform over the truth
    bounding box expanded by ``expand`` per side, one per pair.
    """
    posterior_samples = np.asarray(posterior_samples, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if posterior_samples.ndim != 3 or posterior_samples.shape[0] != theta_true.shape[0]:
        raise ValueError("posterior_samples must be (n_cal, n_post, d) matching theta_true")
    n_cal, _, d = posterior_samples.shape
    alphas = np.linspace(0.0, 1.0, 50) if alphas is None else np.asarray(alphas)

    mean = theta_true.mean(axis=0)
    std = theta_true.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    true_s = (theta_true - mean) / std
    post_s = (posterior_samples - mean) / std

    lo = true_s.min(axis=0)
    hi = true_s.max(axis=0)
    pad = expand * (hi - lo)
    refs = rng.uniform(lo - pad, hi + pad, size=(n_cal, d))

    d_true = np.linalg.norm(true_s - refs, axis=1)
    d_post = np.linalg.norm(post_s - refs[:, None, :], axis=2)
    f = np.mean(d_post < d_true[:, None], axis=1)

    ecp = np.empty(alphas.shape)
    lower = np.empty(alphas.shape)
    upper = np.empty(alphas.shape)
    for i, a in enumerate(alphas):
        k = int(np.sum(f < a))
        ecp[i] = k / n_cal
        lower[i], upper[i] = jeffreys_interval(k, n_cal, confidence)
    return ECPCurve(alphas, ecp, lower, upper, n_cal)


# -- classifier two-sample tests ----------------------------------------


def _classifier(d: int, seed: int) -> MLPClassifier:
    width = 10 * d
    return MLPClassifier(
        hidden_layer_sizes=(width, width),
        early_stopping=True,
        validation_fraction=0.2,
        n_iter_no_change=50,
        max_iter=1000,
        random_state=seed,
    )


def c2st(samples_a: np.ndarray, samples_b: np.ndarray, n_folds: int = 5,
         rng: np.random.Generator | None = None) -> C2STResult:
    """Held-out accuracy of an MLP telling the two sample sets apart.

    0.5 means indistinguishable. The larger set is subsampled to match
    the smaller; features are standardized jointly before training.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must share dimensionality")
    n = min(a.shape[0], b.shape[0])
    if n < 2 * n_folds:
        raise ValueError("too few samples for the requested fold count")
    if a.shape[0] > n:
        a = a[rng.choice(a.shape[0], n, replace=False)]
    if b.shape[0] > n:
        b = b[rng.choice(b.shape[0], n, replace=False)]

    features = np.concatenate([a, b], axis=0)
    labels = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    features = (features - mu) / sd

    seed = int(rng.integers(2**31 - 1))
    folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    splits = list(folds.split(features, labels))

    def run_fold(split):
        train, test = split
        clf = _classifier(features.shape[1], seed)
        clf.fit(features[train], labels[train])
        return float(clf.score(features[test], labels[test]))

    accs = map_workers(run_fold, splits)
    return C2STResult(float(np.mean(accs)), [float(v) for v in accs], n)


def lc2st(cal_thetas: np.ndarray, cal_xs: np.ndarray, approx_thetas: np.ndarray,
          x_obs: np.ndarray, posterior_samples_at_obs: np.ndarray,
          rng: np.random.Generator, n_permutations: int = 100):
    """Local two-sample test at x_obs via joint-vs-surrogate pairs.

    Class 0 holds true joint pairs (theta_i, x_i); class 1 pairs each x_i
    with an approximate posterior draw for that same x_i. The statistic
    is the mean deviation of the classifier's class-1 probability from
    1/2 across posterior draws at x_obs; its null distribution comes
    from label permutations with full retraining.
    """
    cal_thetas = np.atleast_2d(cal_thetas)
    cal_xs = np.atleast_2d(cal_xs)
    approx_thetas = np.atleast_2d(approx_thetas)
    if not (cal_thetas.shape[0] == cal_xs.shape[0] == approx_thetas.shape[0]):
        raise ValueError("calibration arrays must have equal row counts")

    joint_true = np.concatenate([cal_thetas, cal_xs], axis=1)
    joint_approx = np.concatenate([approx_thetas, cal_xs], axis=1)
    features = np.concatenate([joint_true, joint_approx], axis=0)
    n = joint_true.shape[0]
    labels = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])

    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    features_s = (features - mu) / sd

    obs_tile = np.broadcast_to(np.asarray(x_obs, dtype=float).reshape(1, -1),
                               (posterior_samples_at_obs.shape[0], cal_xs.shape[1]))
    eval_pts = (np.concatenate([posterior_samples_at_obs, obs_tile], axis=1) - mu) / sd

    def statistic(lab):
        clf = _classifier(features.shape[1], int(rng.integers(2**31 - 1)))
        clf.fit(features_s, lab)
        prob = clf.predict_proba(eval_pts)[:, 1]
        return float(np.mean(np.abs(prob - 0.5)))

    observed = statistic(labels)
    perms = []
    for _ in range(n_permutations):
        perms.append(statistic(rng.permutation(labels)))
    perms = np.asarray(perms)
    p_value = (1.0 + np.sum(perms >= observed)) / (1.0 + n_permutations)
    return observed, float(p_value)


# -- marginal coverage --------------------------------------------------


def _interval_contains(draws: np.ndarray, truth: float, alpha: float, method: str) -> bool:
    if alpha >= 1.0:
        return True
    if alpha <= 0.0:
        return False
    if method == "histogram":
        lo, hi = np.quantile(draws, [(1.0 - alpha) / 2.0, (1.0 + alpha) / 2.0])
        return bool(lo <= truth <= hi)
    kde = stats.gaussian_kde(draws, bw_method="silverman")
    dens = kde(draws)
    # Highest-density membership: truth is covered when its density
    # clears the (1-alpha) quantile of the draws' own densities.
    return bool(kde([truth])[0] >= np.quantile(dens, 1.0 - alpha))


def marginal_coverage(posterior_samples: np.ndarray, theta_true: np.ndarray,
                      alphas: np.ndarray | None = None, interval_method: str = "histogram",
                      confidence: float = 0.95) -> CoverageCurve:
    """Fraction of pairs whose marginal credible interval contains the truth."""
    if interval_method not in ("histogram", "kde"):
        raise ConfigurationError(f"interval_method must be 'histogram' or 'kde', "
                                 f"got {interval_method!r}")
    posterior_samples = np.asarray(posterior_samples, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    n_cal, _, d = posterior_samples.shape
    alphas = np.linspace(0.0, 1.0, 21) if alphas is None else np.asarray(alphas)

    coverage = np.empty((alphas.shape[0], d))
    lower = np.empty_like(coverage)
    upper = np.empty_like(coverage)
    for ai, alpha in enumerate(alphas):
        for j in range(d):
            hits = sum(
                _interval_contains(posterior_samples[i, :, j], theta_true[i, j],
                                   float(alpha), interval_method)
                for i in range(n_cal)
            )
            coverage[ai, j] = hits / n_cal
            lower[ai, j], upper[ai, j] = jeffreys_interval(hits, n_cal, confidence)
    return CoverageCurve(alphas, coverage, lower, upper, n_cal)
