"""Command-line entry points.

One command per stage: simulate, train, sample, logprob, diagnose, and
benchmark. Configuration is JSON with a schema version; every command
is deterministic given its flags and seed. Exit codes: 0 success, 1
runtime failure, 2 usage or configuration error.

Run directory layout:
    out/
      config.json      normalized run configuration
      checkpoint.bin   trained parameters (raw + EMA), single blob
      manifest.json    array index and run metadata
      history.csv      step, train_loss, val_loss, lr
      samples/*.csv    sampler output
      diagnostics/*.csv
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import click
import numpy as np

from . import diagnostics as dg
from . import nn, solvers, tasks
from .errors import ConfigurationError, MethodSolverMismatch
from .training import (
    ConditionMaskPolicy,
    Dataset,
    Estimator,
    TrainConfig,
    load_dataset,
    make_method,
    train,
)

SCHEMA_VERSION = 1

CLI_SOLVERS = {
    "fm_ode": ("flow_matching", "ode"),
    "fm_sde": ("flow_matching", "sde"),
    "sm_sde": ("score_matching", "sde"),
    "sm_pf_ode": ("score_matching", "pf_ode"),
    "edm": ("diffusion_edm", "edm"),
}


# -- configuration ------------------------------------------------------


@dataclass
class RunConfig:
    task: str
    method: str
    pipeline: str
    out_dir: str
    seed: int = 0
    n_sims: int = 10000
    dataset_path: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    method_options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"config schema_version must be {SCHEMA_VERSION}, got {version!r}"
            )
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        missing = {"task", "method", "pipeline", "out_dir"} - set(raw)
        if missing:
            raise ConfigurationError(f"config is missing keys: {sorted(missing)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        tasks.get_task(self.task)
        from .training import METHODS, PIPELINES

        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.pipeline not in PIPELINES:
            raise ConfigurationError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if "name" in self.solver:
            cli_name = self.solver["name"]
            if cli_name not in CLI_SOLVERS:
                raise ConfigurationError(
                    f"solver must be one of {sorted(CLI_SOLVERS)}, got {cli_name!r}"
                )
            method_of_solver, internal = CLI_SOLVERS[cli_name]
            if method_of_solver != self.method:
                raise MethodSolverMismatch(
                    f"solver {cli_name!r} belongs to {method_of_solver}, "
                    f"but the config method is {self.method}"
                )
            solvers.resolve_solver(self.method, internal)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_model_config(task: tasks.TaskSpec, pipeline: str, overrides: dict) -> nn.FieldModelConfig:
    wide = max(task.d_theta, task.d_x) >= 10
    base = {
        "hidden_width": 256 if wide else 128,
        "depth": 6 if wide else 5,
        "time_embed_dim": 64,
        "activation": "gelu",
    }
    base.update(overrides)
    if pipeline == "joint":
        return nn.FieldModelConfig(input_dim=task.d_theta + task.d_x, joint_mode=True, **base)
    if pipeline == "conditional":
        if task.d_x == 0:
            raise ConfigurationError(
                f"task {task.name} has no observation space; use the unconditional pipeline"
            )
        return nn.FieldModelConfig(input_dim=task.d_theta, cond_dim=task.d_x, **base)
    return nn.FieldModelConfig(input_dim=task.d_theta, **base)


DEFAULT_TRAIN_STEPS = {
    "two_moons": 15000,
    "gaussian_linear": 10000,
    "gaussian_mixture": 15000,
    "checkerboard": 15000,
}


def _solver_options(solver_cfg: dict) -> dict:
    """Translate a config/CLI solver block into sampler keyword options."""
    opts = {}
    if solver_cfg.get("name"):
        opts["solver"] = CLI_SOLVERS[solver_cfg["name"]][1]
    for key in ("n_steps", "scheme", "variant", "alpha"):
        if solver_cfg.get(key) is not None:
            opts[key] = solver_cfg[key]
    churn = solver_cfg.get("churn")
    if churn:
        opts["churn"] = solvers.ChurnParams(**churn)
    return opts


# -- shared helpers -----------------------------------------------------


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as exc:
        raise click.UsageError(f"could not parse vector {text!r}: {exc}")


def _write_samples_csv(path: str, samples: np.ndarray, prefix: str = "theta"):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{prefix}_{i}" for i in range(samples.shape[1])])
        for row in samples:
            writer.writerow([repr(float(v)) for v in row])


def _read_points_csv(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [i for i, h in enumerate(header) if h.startswith("theta_")]
        if not cols:
            raise ConfigurationError(f"{path} has no theta_* columns")
        return np.array([[float(row[i]) for i in cols] for row in reader])


def _fail(exc: Exception) -> int:
    click.echo(f"error: {exc}", err=True)
    return 2 if isinstance(exc, (ConfigurationError, MethodSolverMismatch)) else 1


# -- commands -----------------------------------------------------------


@click.group()
def main():
    """Neural posterior estimation with flow-matching and diffusion methods."""


@main.command()
@click.option("--task", "task_name", required=True, help="Benchmark task name.")
@click.option("--n", "n_sims", type=int, required=True, help="Number of simulations.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output CSV path.")
def simulate(task_name, n_sims, seed, out_path):
    """Draw parameters from the prior and push them through the simulator."""
    try:
        task = tasks.get_task(task_name)
        parent = os.path.dirname(os.path.abspath(out_path))
        os.makedirs(parent, exist_ok=True)
        tasks.generate_dataset(task, n_sims, seed, out_path)
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        sys.exit(_fail(exc))
    click.echo(f"wrote {n_sims} simulations to {out_path}")


def run_training(cfg: RunConfig, resume: bool = False):
    task = tasks.get_task(cfg.task)
    if cfg.dataset_path:
        dataset = load_dataset(cfg.dataset_path)
    else:
        dataset = tasks.generate_dataset(task, cfg.n_sims, cfg.seed)
    model_cfg = default_model_config(task, cfg.pipeline, cfg.model)
    model = nn.FieldModel(model_cfg)
    method = make_method(cfg.method, cfg.method_options)
    train_kwargs = dict(cfg.train)
    train_kwargs.setdefault("total_steps", DEFAULT_TRAIN_STEPS.get(cfg.task, 10000))
    train_kwargs.setdefault("seed", cfg.seed)
    tcfg = TrainConfig(**train_kwargs)

    init_params = init_ema = None
    start_step = 0
    if resume:
        previous = Estimator.load(cfg.out_dir)
        init_params, init_ema = previous.params, previous.ema_params
        start_step = previous.step
        if start_step >= tcfg.total_steps:
            raise ConfigurationError(
                f"checkpoint already at step {start_step}; raise train.total_steps to resume"
            )

    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    result = train(model, dataset, method, tcfg, pipeline=cfg.pipeline,
                   policy=ConditionMaskPolicy(), out_dir=cfg.out_dir, task=cfg.task,
                   init_params=init_params, init_ema=init_ema, start_step=start_step)
    return result


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in out_dir.")
def train_cmd(config_path, resume):
    """Train an estimator from a JSON run configuration."""
    try:
        cfg = load_config(config_path)
        result = run_training(cfg, resume=resume)
    except Exception as exc:  # noqa: BLE001
        sys.exit(_fail(exc))
    last = result.history[-1] if result.history else {}
    click.echo(
        f"finished at step {result.estimator.step}"
        + (f" val_loss={last['val_loss']:.4f}" if last else "")
        + (" (early stop)" if result.stopped_early else "")
    )


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--n", "n_samples", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--observation", default=None,
              help="Observed vector, comma or space separated (x for posterior masks, theta for likelihood masks).")
@click.option("--mask", "mask_kind", type=click.Choice(["posterior", "likelihood"]),
              default="posterior", show_default=True, help="Conditioning pattern for joint checkpoints.")
@click.option("--solver", "solver_name", default=None,
              type=click.Choice(sorted(CLI_SOLVERS)), help="Override the method's default solver.")
@click.option("--steps", "n_steps", type=int, default=None, help="Integration step count.")
@click.option("--scheme", type=click.Choice(solvers.ODE_METHODS), default="euler", show_default=True)
@click.option("--variant", type=click.Choice(solvers.FM_SDE_VARIANTS), default="zero_ends",
              show_default=True)
@click.option("--alpha", type=float, default=1.0, show_default=True,
              help="Noise scale of the stochastic flow-matching sampler.")
@click.option("--s-churn", type=float, default=0.0, show_default=True)
@click.option("--s-min", type=float, default=0.0, show_default=True)
@click.option("--s-max", type=float, default=math.inf)
@click.option("--s-noise", type=float, default=1.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--trajectory", "trajectory_path", type=click.Path(), default=None,
              help="Also dump the ODE trajectory (fm_ode only).")
def sample(checkpoint, n_samples, seed, observation, mask_kind, solver_name, n_steps,
           scheme, variant, alpha, s_churn, s_min, s_max, s_noise, out_path, trajectory_path):
    """Draw samples from a trained checkpoint."""
    try:
        estimator = Estimator.load(checkpoint)
        solver_cfg = {
            "name": solver_name, "n_steps": n_steps, "scheme": scheme,
            "variant": variant, "alpha": alpha,
            "churn": {"s_churn": s_churn, "s_min": s_min, "s_max": s_max, "s_noise": s_noise},
        }
        if solver_name and CLI_SOLVERS[solver_name][0] != estimator.method:
            raise MethodSolverMismatch(
                f"solver {solver_name!r} belongs to {CLI_SOLVERS[solver_name][0]}, "
                f"but this checkpoint was trained with {estimator.method}"
            )
        opts = _solver_options(solver_cfg)
        rng = np.random.default_rng(seed)
        obs = _parse_vector(observation) if observation else None

        if trajectory_path is not None:
            _sample_with_trajectory(estimator, obs, n_samples, rng, opts,
                                    out_path, trajectory_path)
            click.echo(f"wrote {n_samples} samples to {out_path} "
                       f"and trajectory to {trajectory_path}")
            return

        if estimator.pipeline == "unconditional":
            samples = solvers.sample_unconditional(estimator, n_samples, rng, **opts)
            prefix = "theta"
        elif estimator.pipeline == "joint" and mask_kind == "likelihood":
            if obs is None:
                raise click.UsageError("--mask likelihood needs --observation with theta values")
            samples = solvers.sample_likelihood(estimator, obs, n_samples, rng, **opts)
            prefix = "x"
        else:
            if obs is None:
                raise click.UsageError("posterior sampling needs --observation")
            samples = solvers.sample_posterior(estimator, obs, n_samples, rng, **opts)
            prefix = "theta"
        _write_samples_csv(out_path, samples, prefix)
    except click.UsageError:
        raise
    except Exception as exc:  # noqa: BLE001
        sys.exit(_fail(exc))
    click.echo(f"wrote {n_samples} samples to {out_path}")


def _sample_with_trajectory(estimator, obs, n_samples, rng, opts, out_path, trajectory_path):
    solver = solvers.resolve_solver(estimator.method, opts.get("solver"))
    if solver != "ode":
        raise ConfigurationError("trajectory recording is supported for the fm_ode solver only")
    from .training import destandardize, standardize
    from .utils import spawn_rngs

    if estimator.pipeline == "conditional":
        if obs is None:
            raise click.UsageError("posterior sampling needs --observation")
        cond = standardize(obs, estimator.x_mean, estimator.x_std)
        bound = solvers.BoundFields(estimator, cond=cond)
    elif estimator.pipeline == "unconditional":
        bound = solvers.BoundFields(estimator)
    else:
        raise ConfigurationError("trajectory dump covers conditional and unconditional runs")
    d = estimator.config.input_dim
    x0 = np.stack([g.standard_normal(d) for g in spawn_rngs(rng, n_samples)])
    cfg = solvers.ODESolverConfig(method=opts.get("scheme", "euler"),
                                  n_steps=opts.get("n_steps", 100))
    terminal, ts, traj = solvers.integrate_fm_ode(bound.field, x0, cfg, record_trajectory=True)
    samples = destandardize(terminal, estimator.theta_mean, estimator.theta_std)
    _write_samples_csv(out_path, samples, "theta")
    os.makedirs(os.path.dirname(os.path.abspath(trajectory_path)), exist_ok=True)
    with open(trajectory_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "step", "t"] + [f"x_{i}" for i in range(d)])
        for step, t in enumerate(ts):
            states = destandardize(traj[step], estimator.theta_mean, estimator.theta_std)
            for sid in range(n_samples):
                writer.writerow([sid, step, repr(float(t))]
                                + [repr(float(v)) for v in states[sid]])


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--points", "points_path", required=True, type=click.Path(exists=True),
              help="CSV with theta_* columns to score.")
@click.option("--observation", default=None, help="Conditioning observation vector.")
@click.option("--divergence", type=click.Choice(["exact", "hutchinson"]), default="exact",
              show_default=True)
@click.option("--probes", "n_probes", type=int, default=32, show_default=True)
@click.option("--steps", "n_steps", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def logprob(checkpoint, points_path, observation, divergence, n_probes, n_steps, seed, out_path):
    """Evaluate log densities at given parameter points."""
    try:
        estimator = Estimator.load(checkpoint)
        points = _read_points_csv(points_path)
        obs = _parse_vector(observation) if observation else None
        result = solvers.log_prob(estimator, points, x_obs=obs, divergence=divergence,
                                  n_probes=n_probes, rng=np.random.default_rng(seed),
                                  n_steps=n_steps)
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["log_density", "divergence_integral", "source_log_density",
                             "divergence_std_error"])
            for i in range(points.shape[0]):
                writer.writerow([repr(float(result.log_density[i])),
                                 repr(float(result.divergence_integral[i])),
                                 repr(float(result.source_log_density[i])),
                                 repr(float(result.divergence_std_error[i]))])
    except Exception as exc:  # noqa: BLE001
        sys.exit(_fail(exc))
    click.echo(f"wrote {points.shape[0]} log densities to {out_path}")


SUITES = ("sbc", "tarp", "c2st", "lc2st", "coverage", "all")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--suite", type=click.Choice(SUITES), default="all", show_default=True)
@click.option("--n-cal", type=int, default=200, show_default=True,
              help="Calibration pairs for sbc/tarp/coverage/lc2st.")
@click.option("--n-post", type=int, default=250, show_default=True,
              help="Posterior draws per calibration pair.")
@click.option("--n-obs", type=int, default=10, show_default=True,
              help="Test observations for the c2st suite.")
@click.option("--n-c2st", type=int, default=2000, show_default=True,
              help="Samples per side of each c2st comparison.")
@click.option("--steps", "n_steps", type=int, default=None, help="Sampler step count override.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def diagnose(checkpoint, suite, n_cal, n_post, n_obs, n_c2st, n_steps, seed, out_dir):
    """Run calibration and two-sample diagnostics on a trained checkpoint."""
    try:
        summary = run_diagnostics(checkpoint, suite, n_cal, n_post, n_obs, n_c2st,
                                  n_steps, seed, out_dir)
    except Exception as exc:  # noqa: BLE001
        sys.exit(_fail(exc))
    for row in summary:
        click.echo("{suite}: {metric} = {value} -> {flag}".format(
            suite=row["suite"], metric=row["metric"], value=row["value"],
            flag="pass" if row["pass"] else "FAIL"))


def run_diagnostics(checkpoint, suite, n_cal, n_post, n_obs, n_c2st, n_steps, seed, out_dir):
    estimator = Estimator.load(checkpoint)
    if estimator.task is None:
        raise ConfigurationError("checkpoint does not record its task name")
    task = tasks.get_task(estimator.task)
    opts = {} if n_steps is None else {"n_steps": n_steps}
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    wanted = set(SUITES[:-1]) if suite == "all" else {suite}
    summary = []

    def sampler(x, n, local_rng):
        return solvers.sample_posterior(estimator, x, n, local_rng, **opts)

    needs_pairs = wanted & {"tarp", "coverage", "lc2st", "sbc"}
    if needs_pairs and task.d_x == 0:
        raise ConfigurationError("calibration suites need a conditional task")

    cal_thetas = cal_xs = posteriors = None
    if wanted & {"tarp", "coverage", "lc2st"}:
        cal_thetas = task.prior_sample(rng, n_cal)
        cal_xs = np.array([task.simulate_row(t, rng) for t in cal_thetas])
        posteriors = np.stack([sampler(x, n_post, rng) for x in cal_xs])

    if "sbc" in wanted:
        ranks = dg.run_sbc(sampler, task.prior_sample, task.simulate_row, n_cal, n_post, rng)
        with open(os.path.join(out_dir, "sbc.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dim", "rank"])
            for j in range(ranks.ranks.shape[1]):
                for r in ranks.ranks[:, j]:
                    writer.writerow([j, int(r)])
        p_values = [dg.ks_uniformity(ranks.ranks[:, j], ranks.n_post)
                    for j in range(ranks.ranks.shape[1])]
        good = sum(p > 0.01 for p in p_values)
        summary.append({"suite": "sbc", "metric": "dims_with_ks_p_above_0.01",
                        "value": f"{good}/{len(p_values)}",
                        "pass": good >= math.ceil(0.9 * len(p_values))})

    if "tarp" in wanted:
        curve = dg.tarp_ecp(posteriors, cal_thetas, rng)
        with open(os.path.join(out_dir, "tarp.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "ecp", "lower", "upper"])
            for i in range(curve.alphas.shape[0]):
                writer.writerow([curve.alphas[i], curve.ecp[i], curve.lower[i], curve.upper[i]])
        in_band = float(np.mean((curve.alphas >= curve.lower) & (curve.alphas <= curve.upper)))
        summary.append({"suite": "tarp", "metric": "fraction_of_alphas_in_jeffreys_band",
                        "value": f"{in_band:.2f}", "pass": in_band >= 0.9})

    if "c2st" in wanted:
        if task.reference == "none":
            raise ConfigurationError(f"task {task.name} has no reference posterior for c2st")
        obs_rng = np.random.default_rng((seed, 1))
        accs = []
        rows = []
        for k in range(n_obs):
            theta_star = task.prior_sample(obs_rng, 1)[0]
            x_star = task.simulate_row(theta_star, obs_rng)
            ours = sampler(x_star, n_c2st, obs_rng)
            ref = task.reference_sample(x_star, n_c2st, obs_rng)
            res = dg.c2st(ours, ref, rng=obs_rng)
            accs.append(res.accuracy)
            rows.extend([(k, f, a) for f, a in enumerate(res.fold_accuracies)])
        with open(os.path.join(out_dir, "c2st.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["observation", "fold", "accuracy"])
            writer.writerows(rows)
        mean, std = float(np.mean(accs)), float(np.std(accs))
        summary.append({"suite": "c2st", "metric": f"accuracy_over_{n_obs}_observations",
                        "value": f"{mean:.3f}+/-{std:.3f}", "pass": mean <= 0.6})

    if "lc2st" in wanted:
        approx = np.stack([sampler(x, 1, rng)[0] for x in cal_xs])
        x_obs = cal_xs[0]
        at_obs = posteriors[0]
        stat, p_value = dg.lc2st(cal_thetas, cal_xs, approx, x_obs, at_obs, rng)
        with open(os.path.join(out_dir, "lc2st.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["statistic", "p_value"])
            writer.writerow([stat, p_value])
        summary.append({"suite": "lc2st", "metric": "permutation_p_value",
                        "value": f"{p_value:.3f}", "pass": p_value > 0.05})

    if "coverage" in wanted:
        curve = dg.marginal_coverage(posteriors, cal_thetas)
        with open(os.path.join(out_dir, "coverage.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "dim", "coverage", "lower", "upper"])
            for ai in range(curve.alphas.shape[0]):
                for j in range(curve.coverage.shape[1]):
                    writer.writerow([curve.alphas[ai], j, curve.coverage[ai, j],
                                     curve.lower[ai, j], curve.upper[ai, j]])
        hit = float(np.mean((curve.alphas[:, None] >= curve.lower)
                            & (curve.alphas[:, None] <= curve.upper)))
        summary.append({"suite": "coverage", "metric": "fraction_of_grid_in_jeffreys_band",
                        "value": f"{hit:.2f}", "pass": hit >= 0.9})

    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["suite", "metric", "value", "pass"])
        writer.writeheader()
        writer.writerows(summary)
    return summary


@main.command()
@click.option("--task", "task_name", required=True)
@click.option("--budget", type=int, default=10000, show_default=True,
              help="Simulation budget.")
@click.option("--method", default="flow_matching", show_default=True)
@click.option("--pipeline", default="conditional", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--train-steps", type=int, default=None,
              help="Override the task's default optimization step count.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def benchmark(task_name, budget, method, pipeline, seed, train_steps, out_dir):
    """End-to-end run: simulate, train, sample, and score against the reference."""
    try:
        row = run_benchmark(task_name, budget, method, pipeline, seed, out_dir,
                            train_steps=train_steps)
    except Exception as exc:  # noqa: BLE001
        sys.exit(_fail(exc))
    click.echo(json.dumps(row, indent=2, sort_keys=True))


def run_benchmark(task_name, budget, method, pipeline, seed, out_dir, train_steps=None):
    started = time.time()
    task = tasks.get_task(task_name)
    if task.reference == "none":
        raise ConfigurationError(f"task {task_name} has no reference posterior to score against")
    train_cfg = {}
    if train_steps is not None:
        train_cfg = {"total_steps": train_steps, "warmup_steps": min(500, train_steps // 10)}
    cfg = RunConfig(task=task_name, method=method, pipeline=pipeline, out_dir=out_dir,
                    seed=seed, n_sims=budget, train=train_cfg)
    result = run_training(cfg)
    estimator = result.estimator

    obs_rng = np.random.default_rng((seed, 1))
    accs = []
    for _ in range(10):
        theta_star = task.prior_sample(obs_rng, 1)[0]
        x_star = task.simulate_row(theta_star, obs_rng)
        ours = solvers.sample_posterior(estimator, x_star, 2000, obs_rng)
        ref = task.reference_sample(x_star, 2000, obs_rng)
        accs.append(dg.c2st(ours, ref, rng=obs_rng).accuracy)

    cal_rng = np.random.default_rng((seed, 2))
    cal_thetas = task.prior_sample(cal_rng, 200)
    cal_xs = np.array([task.simulate_row(t, cal_rng) for t in cal_thetas])
    posteriors = np.stack([solvers.sample_posterior(estimator, x, 250, cal_rng)
                           for x in cal_xs])
    curve = dg.tarp_ecp(posteriors, cal_thetas, cal_rng)
    tarp_in_band = float(np.mean((curve.alphas >= curve.lower) & (curve.alphas <= curve.upper)))

    row = {
        "task": task_name, "method": method, "pipeline": pipeline, "budget": budget,
        "seed": seed, "c2st_mean": round(float(np.mean(accs)), 4),
        "c2st_std": round(float(np.std(accs)), 4),
        "tarp_fraction_in_band": round(tarp_in_band, 4),
        "runtime_s": round(time.time() - started, 1),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "results.csv")
    fields = list(row)
    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new_file:
            writer.writeheader()
        writer.writerow(row)
    return row


if __name__ == "__main__":
    main()
