"""Loss construction and the optimisation loop.

Three generative methods share one training harness:

* flow matching regresses a velocity field onto the constant displacement
  of the optimal-transport path,
* denoising score matching regresses a score field onto the conditional
  Gaussian score of a VP or VE forward process,
* sigma-preconditioned denoising (EDM) regresses a denoiser wrapped in
  the c_skip/c_out/c_in scalings, with log-normal training noise levels.

Each method can run in three pipelines: conditional (the condition is a
separate network input), joint (one vector holds parameters and data, a
random binary mask marks observed coordinates, and the loss only scores
unobserved ones), or unconditional. Data is z-scored per column before
training and samples are mapped back on the way out.

The loop itself is AdamW with linear warmup into cosine decay, an
exponential moving average of the parameters for evaluation, periodic
validation on frozen noise draws, and early stopping when the validation
loss deteriorates past a ratio of its best value for several consecutive
evaluations.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigurationError, TrainingDiverged
from .paths import (
    EPS_T,
    EDMPreconditioner,
    VECoefficients,
    VPCoefficients,
    edm_loss_weight,
    edm_precondition,
    sample_training_sigma,
)
from .utils import as_rng

METHODS = ("flow_matching", "score_matching", "diffusion_edm")
PIPELINES = ("conditional", "joint", "unconditional")


# -- configuration ------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 256
    peak_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_steps: int = 500
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    val_fraction: float = 0.1
    early_stop_ratio: float = 1.5
    patience: int = 5
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if self.warmup_steps >= self.total_steps:
            raise ConfigurationError("warmup_steps must be smaller than total_steps")
        if self.min_lr > self.peak_lr:
            raise ConfigurationError("min_lr must not exceed peak_lr")
        if not (0 < self.val_fraction < 1):
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if not (0 < self.ema_decay < 1):
            raise ConfigurationError("ema_decay must lie in (0, 1)")
        if self.early_stop_ratio <= 1:
            raise ConfigurationError("early_stop_ratio must exceed 1")
        if self.batch_size < 1 or self.patience < 1 or self.eval_interval < 1:
            raise ConfigurationError("batch_size, patience and eval_interval must be >= 1")


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Learning rate at ``step``: linear 0 to peak, then cosine peak to min."""
    if step > cfg.total_steps:
        raise ValueError(f"step {step} beyond total_steps {cfg.total_steps}")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# -- data ---------------------------------------------------------------


def _column_stats(mat: np.ndarray):
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)  # constant-column guard
    return mean, std


@dataclass
class Dataset:
    """Simulation pairs with per-column z-score statistics."""

    thetas: np.ndarray
    xs: np.ndarray
    theta_mean: np.ndarray = field(init=False)
    theta_std: np.ndarray = field(init=False)
    x_mean: np.ndarray = field(init=False)
    x_std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.xs = np.asarray(self.xs, dtype=np.float64)
        if self.thetas.ndim != 2:
            raise ValueError("thetas must be 2-D")
        if self.xs.ndim != 2 or self.xs.shape[0] != self.thetas.shape[0]:
            raise ValueError("xs must be 2-D with the same row count as thetas")
        self.theta_mean, self.theta_std = _column_stats(self.thetas)
        if self.xs.shape[1] > 0:
            self.x_mean, self.x_std = _column_stats(self.xs)
        else:
            self.x_mean = np.zeros(0)
            self.x_std = np.ones(0)

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def d_theta(self) -> int:
        return self.thetas.shape[1]

    @property
    def d_x(self) -> int:
        return self.xs.shape[1]


def standardize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - mean) / std


def destandardize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * std + mean


def save_dataset(ds: Dataset, path: str):
    """CSV with header theta_0..theta_{k},x_0..x_{m}, one simulation per row."""
    header = [f"theta_{i}" for i in range(ds.d_theta)] + [f"x_{i}" for i in range(ds.d_x)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        joined = np.concatenate([ds.thetas, ds.xs], axis=1)
        for row in joined:
            writer.writerow([repr(float(v)) for v in row])


def load_dataset(path: str) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    d_theta = sum(1 for h in header if h.startswith("theta_"))
    data = np.asarray(rows, dtype=np.float64)
    return Dataset(thetas=data[:, :d_theta], xs=data[:, d_theta:])


# -- condition masks ----------------------------------------------------


@dataclass(frozen=True)
class ConditionMaskPolicy:
    """Mixture over mask kinds for joint training. 1 marks observed.

    The all-observed mask would zero the loss and is never emitted; the
    Bernoulli branch resamples until at least one coordinate is free.
    """

    joint: float = 0.1
    posterior: float = 0.35
    likelihood: float = 0.2
    bernoulli: float = 0.35

    def __post_init__(self):
        weights = (self.joint, self.posterior, self.likelihood, self.bernoulli)
        if any(w < 0 for w in weights):
            raise ConfigurationError("mask weights must be nonnegative")
        total = sum(weights)
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ConfigurationError(f"mask weights must sum to 1, got {total}")

    def sample(self, rng: np.random.Generator, n: int, d_theta: int, d_x: int) -> np.ndarray:
        d = d_theta + d_x
        kinds = rng.choice(4, size=n, p=[self.joint, self.posterior, self.likelihood, self.bernoulli])
        masks = np.zeros((n, d))
        masks[kinds == 1, d_theta:] = 1.0  # posterior: data observed
        masks[kinds == 2, :d_theta] = 1.0  # likelihood: parameters observed
        bern = np.flatnonzero(kinds == 3)
        for i in bern:
            while True:
                rate = rng.uniform()
                m = (rng.uniform(size=d) < rate).astype(float)
                if m.sum() < d:
                    masks[i] = m
                    break
        return masks


# -- generative methods -------------------------------------------------


class FlowMatching:
    """Optimal-transport conditional flow matching."""

    tag = "flow_matching"

    def prepare(self, x1: np.ndarray, rng: np.random.Generator) -> dict:
        n, d = x1.shape
        t = rng.uniform(0.0, 1.0, n)
        x0 = rng.standard_normal((n, d))
        xt = (1.0 - t[:, None]) * x0 + t[:, None] * x1
        return {"net_input": xt, "time_input": t, "target": x1 - x0, "weight": None}

    def state(self) -> dict:
        return {}


class ScoreMatching:
    """Denoising score matching on a VP or VE forward process.

    Times are drawn in the package convention (t=1 is data) and flipped
    internally onto the diffusion clock; the data end is clamped away by
    the shared epsilon so the conditional score stays finite.
    """

    tag = "score_matching"

    def __init__(self, sde: str = "vp", weighting: str = "sigma2",
                 beta_min: float = 0.1, beta_max: float = 20.0,
                 sigma_min: float = 0.01, sigma_max: float = 15.0):
        if sde not in ("vp", "ve"):
            raise ConfigurationError(f"sde must be 'vp' or 've', got {sde!r}")
        if weighting not in ("likelihood", "sigma2"):
            raise ConfigurationError(f"weighting must be 'likelihood' or 'sigma2', got {weighting!r}")
        self.sde = sde
        self.weighting = weighting
        self.vp = VPCoefficients(beta_min, beta_max)
        self.ve = VECoefficients(sigma_min, sigma_max)

    def kernel(self, tau):
        """Transition-kernel (signal scale, noise std) at diffusion time tau."""
        if self.sde == "vp":
            return self.vp.mean_scale(tau), self.vp.marginal_std(tau)
        return np.ones_like(np.asarray(tau, dtype=float)), self.ve.sigma(tau)

    def squared_diffusion(self, tau):
        if self.sde == "vp":
            return self.vp.beta(tau)
        sig = self.ve.sigma(tau)
        return 2.0 * math.log(self.ve.sigma_max / self.ve.sigma_min) * sig * sig

    def prepare(self, x1: np.ndarray, rng: np.random.Generator) -> dict:
        n, d = x1.shape
        t = rng.uniform(0.0, 1.0, n)
        tau = np.minimum(1.0 - t, 1.0 - EPS_T)
        t = 1.0 - tau
        scale, std = self.kernel(tau)
        eps = rng.standard_normal((n, d))
        xt = scale[:, None] * x1 + std[:, None] * eps
        target = -eps / std[:, None]
        if self.weighting == "sigma2":
            weight = std * std
        else:
            weight = self.squared_diffusion(tau)
        return {"net_input": xt, "time_input": t, "target": target, "weight": weight}

    def state(self) -> dict:
        return {
            "sde": self.sde,
            "weighting": self.weighting,
            "beta_min": self.vp.beta_min,
            "beta_max": self.vp.beta_max,
            "sigma_min": self.ve.sigma_min,
            "sigma_max": self.ve.sigma_max,
        }


class DiffusionEDM:
    """Preconditioned denoising with log-normal training noise levels.

    ``sigma_data`` defaults to None, meaning it is measured from the
    (standardized) training targets when training starts; 0.5 is the
    fallback when measurement is impossible.
    """

    tag = "diffusion_edm"

    def __init__(self, sigma_data: float | None = None, sigma_min: float = 0.002,
                 sigma_max: float = 80.0, rho: float = 7.0,
                 p_mean: float = -1.2, p_std: float = 1.2):
        self.sigma_data = sigma_data
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.rho = rho
        self.p_mean = p_mean
        self.p_std = p_std

    def preconditioner(self) -> EDMPreconditioner:
        return EDMPreconditioner(
            sigma_data=self.sigma_data if self.sigma_data is not None else 0.5,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            rho=self.rho,
            p_mean=self.p_mean,
            p_std=self.p_std,
        )

    def resolve_sigma_data(self, targets: np.ndarray):
        if self.sigma_data is None:
            pooled = float(np.std(targets))
            self.sigma_data = pooled if pooled > 1e-12 else 0.5

    def prepare(self, x1: np.ndarray, rng: np.random.Generator) -> dict:
        self.resolve_sigma_data(x1)
        p = self.preconditioner()
        n, d = x1.shape
        sigma = sample_training_sigma(p, rng, n)
        eps = rng.standard_normal((n, d))
        noisy = x1 + sigma[:, None] * eps
        c_skip, c_out, c_in, c_noise = edm_precondition(p, sigma)
        weight = edm_loss_weight(p, sigma)
        return {
            "net_input": c_in[:, None] * noisy,
            "time_input": c_noise,
            "target": x1,
            "weight": weight,
            "edm_noisy": noisy,
            "edm_c_skip": c_skip,
            "edm_c_out": c_out,
        }

    def state(self) -> dict:
        return {
            "sigma_data": self.sigma_data,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
            "p_mean": self.p_mean,
            "p_std": self.p_std,
        }


def make_method(tag: str, state: dict | None = None):
    state = state or {}
    if tag == "flow_matching":
        return FlowMatching()
    if tag == "score_matching":
        return ScoreMatching(**state) if state else ScoreMatching()
    if tag == "diffusion_edm":
        return DiffusionEDM(**state) if state else DiffusionEDM()
    raise ConfigurationError(f"unknown method {tag!r}; expected one of {METHODS}")


# -- loss closures ------------------------------------------------------


def _closure(model: nn.FieldModel, prep: dict, cond, mask_rows, residual_mask):
    """Build the scalar loss over (tape-wrapped or plain) parameters."""
    net_input = prep["net_input"]
    if residual_mask is not None:
        # Observed coordinates enter the network clean; the residual on
        # them is struck from the loss before squaring.
        net_input = (1.0 - mask_rows) * net_input + mask_rows * prep["clean"]
    n = net_input.shape[0]
    time_input = prep["time_input"]
    target = prep["target"]
    weight = prep["weight"]
    is_edm = "edm_noisy" in prep

    def loss_fn(params):
        out = model.forward_traced(params, net_input, time_input, cond=cond, mask=mask_rows)
        if is_edm:
            out = prep["edm_c_skip"][:, None] * prep["edm_noisy"] + prep["edm_c_out"][:, None] * out
        r = out - target
        if residual_mask is not None:
            r = r * residual_mask
        sq = r * r
        if weight is not None:
            sq = weight[:, None] * sq
        return ad.sum_all(sq) / n

    return loss_fn


def method_loss_closure(model, method, x1, cond, rng):
    """Unmasked loss closure (conditional or unconditional pipelines)."""
    prep = method.prepare(np.asarray(x1, dtype=np.float64), rng)
    return _closure(model, prep, cond, None, None)


def joint_loss_closure(model, method, z1, policy: ConditionMaskPolicy, rng,
                       d_theta: int, d_x: int):
    """Masked joint loss: score only unobserved coordinates of z."""
    z1 = np.asarray(z1, dtype=np.float64)
    prep = method.prepare(z1, rng)
    masks = policy.sample(rng, z1.shape[0], d_theta, d_x)
    if method.tag == "diffusion_edm":
        # The skip connection must also see clean observed coordinates,
        # otherwise the masked residual would leak scaled noise into D.
        prep["edm_noisy"] = (1.0 - masks) * prep["edm_noisy"] + masks * z1
    prep["clean"] = z1
    return _closure(model, prep, None, masks, 1.0 - masks)


def cfm_loss(model, params, x1, rng, cond=None) -> float:
    """Flow-matching loss on one batch (evaluation only, no gradients)."""
    fn = method_loss_closure(model, FlowMatching(), x1, cond, as_rng(rng))
    return float(fn({k: v for k, v in params.items()}))


def dsm_loss(model, params, x1, rng, cond=None, sde: str = "vp",
             weighting: str = "sigma2") -> float:
    """Denoising score-matching loss on one batch."""
    method = ScoreMatching(sde=sde, weighting=weighting)
    fn = method_loss_closure(model, method, x1, cond, as_rng(rng))
    return float(fn({k: v for k, v in params.items()}))


def edm_loss(model, params, x1, rng, cond=None, method: DiffusionEDM | None = None) -> float:
    """Preconditioned denoising loss on one batch."""
    method = method or DiffusionEDM()
    fn = method_loss_closure(model, method, x1, cond, as_rng(rng))
    return float(fn({k: v for k, v in params.items()}))


def joint_masked_loss(model, params, z1, rng, method=None,
                      policy: ConditionMaskPolicy | None = None,
                      d_theta: int | None = None) -> float:
    """Joint masked loss on one batch of z = (theta, x) rows."""
    method = method or FlowMatching()
    policy = policy or ConditionMaskPolicy()
    z1 = np.asarray(z1)
    d_theta = z1.shape[1] if d_theta is None else d_theta
    fn = joint_loss_closure(model, method, z1, policy, as_rng(rng),
                            d_theta, z1.shape[1] - d_theta)
    return float(fn({k: v for k, v in params.items()}))


# -- optimiser ----------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam. Frozen entries pass through untouched."""

    def __init__(self, params: nn.ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: nn.ParamStore, grads: nn.ParamStore, lr: float) -> nn.ParamStore:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            if name in nn.FROZEN_NAMES:
                out[name] = p
                continue
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p
            out[name] = (p - lr * update).astype(p.dtype)
        return nn.ParamStore(out)


def ema_update(shadow: nn.ParamStore, params: nn.ParamStore, decay: float) -> nn.ParamStore:
    return nn.ParamStore(
        {k: (decay * shadow[k] + (1.0 - decay) * params[k]).astype(shadow[k].dtype)
         for k in shadow}
    )


# -- trained artifact ---------------------------------------------------


@dataclass
class Estimator:
    """A trained model plus everything needed to sample from it."""

    config: nn.FieldModelConfig
    params: nn.ParamStore
    ema_params: nn.ParamStore
    method: str
    pipeline: str
    method_state: dict
    theta_mean: np.ndarray
    theta_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    step: int = 0
    task: str | None = None

    @property
    def model(self) -> nn.FieldModel:
        return nn.FieldModel(self.config)

    @property
    def eval_params(self) -> nn.ParamStore:
        return self.ema_params

    @property
    def d_theta(self) -> int:
        if self.pipeline == "joint":
            return self.config.input_dim - len(self.x_mean)
        return self.config.input_dim

    def save(self, directory: str):
        metadata = {
            "model": dataclasses.asdict(self.config),
            "method": self.method,
            "pipeline": self.pipeline,
            "method_state": self.method_state,
            "theta_mean": self.theta_mean.tolist(),
            "theta_std": self.theta_std.tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "step": self.step,
            "task": self.task,
        }
        nn.save_params(directory, {"raw": self.params, "ema": self.ema_params}, metadata)

    @classmethod
    def load(cls, directory: str) -> "Estimator":
        stores, meta = nn.load_params(directory)
        if "raw" not in stores or "ema" not in stores:
            raise ValueError(f"{directory} does not hold a trained estimator checkpoint")
        config = nn.FieldModelConfig(**meta["model"])
        return cls(
            config=config,
            params=stores["raw"],
            ema_params=stores["ema"],
            method=meta["method"],
            pipeline=meta["pipeline"],
            method_state=meta["method_state"],
            theta_mean=np.asarray(meta["theta_mean"]),
            theta_std=np.asarray(meta["theta_std"]),
            x_mean=np.asarray(meta["x_mean"]),
            x_std=np.asarray(meta["x_std"]),
            step=int(meta["step"]),
            task=meta.get("task"),
        )


# -- the loop -----------------------------------------------------------


@dataclass
class TrainResult:
    estimator: Estimator
    history: list
    stopped_early: bool
    best_val: float


def _batch_closure(model, method, pipeline, policy, thetas_s, xs_s, idx, rng, d_theta, d_x):
    if pipeline == "joint":
        z1 = np.concatenate([thetas_s[idx], xs_s[idx]], axis=1)
        return joint_loss_closure(model, method, z1, policy, rng, d_theta, d_x)
    if pipeline == "conditional":
        return method_loss_closure(model, method, thetas_s[idx], xs_s[idx], rng)
    return method_loss_closure(model, method, thetas_s[idx], None, rng)


def train(model: nn.FieldModel, dataset: Dataset, method, cfg: TrainConfig,
          pipeline: str = "conditional", policy: ConditionMaskPolicy | None = None,
          out_dir: str | None = None, task: str | None = None,
          init_params: nn.ParamStore | None = None, init_ema: nn.ParamStore | None = None,
          start_step: int = 0) -> TrainResult:
    """Run the optimisation loop, returning the trained estimator.

    Deterministic for a fixed config seed. When ``out_dir`` is given,
    checkpoints land there: the running best under checkpoint_best/ and
    the final state at the top level, next to history.csv.
    """
    if pipeline not in PIPELINES:
        raise ConfigurationError(f"unknown pipeline {pipeline!r}")
    if pipeline == "joint" and not model.config.joint_mode:
        raise ConfigurationError("joint pipeline requires a joint_mode model")
    if pipeline != "joint" and model.config.joint_mode:
        raise ConfigurationError("joint_mode model requires the joint pipeline")
    if dataset.n < 2:
        raise ConfigurationError("dataset too small to split")
    policy = policy or ConditionMaskPolicy()

    rng = np.random.default_rng((cfg.seed, start_step)) if start_step else np.random.default_rng(cfg.seed)
    thetas_s = standardize(dataset.thetas, dataset.theta_mean, dataset.theta_std)
    xs_s = standardize(dataset.xs, dataset.x_mean, dataset.x_std) if dataset.d_x else dataset.xs

    if method.tag == "diffusion_edm":
        targets = np.concatenate([thetas_s, xs_s], axis=1) if pipeline == "joint" else thetas_s
        method.resolve_sigma_data(targets)

    n_val = max(1, int(round(dataset.n * cfg.val_fraction)))
    perm = rng.permutation(dataset.n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ConfigurationError("validation split leaves no training rows")

    params = init_params if init_params is not None else nn.init_model(model.config, cfg.seed)
    ema = init_ema if init_ema is not None else params.copy()
    opt = AdamW(params, weight_decay=cfg.weight_decay)

    # Frozen validation draws make successive evaluations comparable.
    val_rng = np.random.default_rng((cfg.seed, 7751))
    val_closures = []
    for lo in range(0, val_idx.size, cfg.batch_size):
        chunk = val_idx[lo : lo + cfg.batch_size]
        val_closures.append(
            _batch_closure(model, method, pipeline, policy, thetas_s, xs_s, chunk,
                           val_rng, dataset.d_theta, dataset.d_x)
        )

    def val_loss(p: nn.ParamStore) -> float:
        plain = {k: v for k, v in p.items()}
        return float(np.mean([fn(plain) for fn in val_closures]))

    history = []
    if start_step and out_dir:
        prior_path = os.path.join(out_dir, "history.csv")
        if os.path.exists(prior_path):
            history = [row for row in load_history(prior_path) if row["step"] <= start_step]
    best_val = math.inf
    bad_evals = 0
    stopped = False
    running = []
    step = start_step

    def build_estimator(p, e, at_step):
        return Estimator(
            config=model.config, params=p, ema_params=e, method=method.tag,
            pipeline=pipeline, method_state=method.state(),
            theta_mean=dataset.theta_mean, theta_std=dataset.theta_std,
            x_mean=dataset.x_mean, x_std=dataset.x_std, step=at_step, task=task,
        )

    for step in range(start_step, cfg.total_steps):
        idx = rng.choice(train_idx, size=min(cfg.batch_size, train_idx.size), replace=True)
        closure = _batch_closure(model, method, pipeline, policy, thetas_s, xs_s, idx,
                                 rng, dataset.d_theta, dataset.d_x)
        loss, grads = model.grad_params(params, closure)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        lr = lr_schedule(cfg, step + 1)
        params = opt.step(params, grads, lr)
        ema = ema_update(ema, params, cfg.ema_decay)
        running.append(loss)

        done = step + 1 == cfg.total_steps
        if (step + 1) % cfg.eval_interval == 0 or done:
            vloss = val_loss(ema)
            if not math.isfinite(vloss):
                raise TrainingDiverged(f"validation loss became {vloss} at step {step}")
            history.append(
                {"step": step + 1, "train_loss": float(np.mean(running)), "val_loss": vloss, "lr": lr}
            )
            running = []
            if vloss < best_val:
                best_val = vloss
                if out_dir:
                    build_estimator(params, ema, step + 1).save(os.path.join(out_dir, "checkpoint_best"))
            if math.isfinite(cfg.early_stop_ratio) and vloss / best_val > cfg.early_stop_ratio:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    stopped = True
            else:
                bad_evals = 0
        if stopped:
            break

    estimator = build_estimator(params, ema, step + 1)
    if out_dir:
        estimator.save(out_dir)
        save_history(history, os.path.join(out_dir, "history.csv"))
    return TrainResult(estimator=estimator, history=history, stopped_early=stopped, best_val=best_val)


def save_history(history: list, path: str):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        writer.writerows(history)


def load_history(path: str) -> list:
    with open(path, newline="") as fh:
        return [
            {"step": int(row["step"]), "train_loss": float(row["train_loss"]),
             "val_loss": float(row["val_loss"]), "lr": float(row["lr"])}
            for row in csv.DictReader(fh)
        ]
