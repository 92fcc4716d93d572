"""AdamW optimizer and the desk-scale regression harness.

The adaptation-analysis experiment: draw one fixed input grid and one fixed
target grid (both uniform on [0, 1)), freeze the host transformer, and train
only the adapter parameters to regress input -> target under MSE. The
physical-prior arm additionally carries the scheduled route regularization.
Runs are bitwise deterministic per (config, seed) in a single thread.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import ConfigError, DivergenceError, OptimizerError
from .routing import ScheduleConfig, schedule_weight
from .toymodel import ModelConfig, ToyModel, build_model

DIVERGENCE_THRESHOLD = 1e3

_TASK_STREAM, _TRIAL_ADAPTER_STREAM = 1, 2


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Decay applies only to parameters flagged ``weight_decay`` (filter and
    low-rank matrices); router logits and time values are never decayed.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._moments = [
            (np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.params
        ]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, (m, v) in zip(self.params, self._moments):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise OptimizerError(
                    f"non-finite gradient in {p.name} at step {self.step_count}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= lr * update


@dataclass(frozen=True)
class TrainConfig:
    """Iteration budget, optimizer settings, and the trial seed list."""

    iterations: int = 5000
    lr: float = 0.002
    w: float = 0.1
    metric_cadence: int = 100
    seeds: tuple = (1, 2, 3, 4, 5)
    warmup: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.w < 0:
            raise ConfigError(f"regularization coefficient must be >= 0, got {self.w}")
        if self.metric_cadence < 1:
            raise ConfigError(f"metric cadence must be >= 1, got {self.metric_cadence}")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")


@dataclass(frozen=True)
class RegressionTask:
    """One fixed (input, target) pair, both uniform on [0, 1)."""

    input: np.ndarray
    target: np.ndarray
    seed: int


def make_task(width: int, height: int, channels: int, seed: int) -> RegressionTask:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _TASK_STREAM))))
    shape = (width, height, channels)
    return RegressionTask(
        input=rng.uniform(0.0, 1.0, shape),
        target=rng.uniform(0.0, 1.0, shape),
        seed=seed,
    )


@dataclass
class RunMetrics:
    """Outcome of one training run."""

    seed: int
    adapter: str
    iterations: int
    final_mse: float
    param_count: int
    history: tuple = ()
    diverged: bool = False


def loss_nodes(model: ToyModel, tape: Tape, task: RegressionTask, reg_coeff: float):
    """Record the training loss: MSE plus the weighted mean route penalty."""
    y, regs = model.build_forward(tape, task.input)
    loss_mse = ad.mse(y, tape.constant(task.target))
    loss = loss_mse
    if regs and reg_coeff > 0.0:
        penalty = regs[0]
        for r in regs[1:]:
            penalty = ad.add(penalty, r)
        loss = ad.add(loss_mse, ad.scale(penalty, reg_coeff / len(regs)))
    return loss, loss_mse


def train_adapters(model: ToyModel, task: RegressionTask, cfg: TrainConfig) -> RunMetrics:
    """Train only the model's adapter parameters on the regression task."""
    params = model.adapter_parameters()
    schedule = ScheduleConfig(cfg.w, cfg.iterations)
    label = model.cfg.adapter
    count = model.adapter_param_count()

    def finish(history, final):
        return RunMetrics(task.seed, label, cfg.iterations, final, count, tuple(history))

    if not params:
        # Frozen model with no adapter: the loss is constant, skip the loop.
        tape = Tape()
        loss, loss_mse = loss_nodes(model, tape, task, 0.0)
        value = float(loss_mse.value)
        history = [(it, value) for it in range(0, cfg.iterations, cfg.metric_cadence)]
        history.append((cfg.iterations, value))
        return finish(history, value)

    opt = AdamW(params, lr=cfg.lr)
    history = []
    for it in range(cfg.iterations):
        for p in params:
            p.zero_grad()
        tape = Tape()
        coeff = schedule_weight(it, schedule)
        loss, loss_mse = loss_nodes(model, tape, task, coeff)
        mse_value = float(loss_mse.value)
        if it % cfg.metric_cadence == 0:
            history.append((it, mse_value))
        if not np.isfinite(mse_value) or mse_value > DIVERGENCE_THRESHOLD:
            raise DivergenceError(
                f"MSE {mse_value} exceeded {DIVERGENCE_THRESHOLD} at iteration {it}",
                history,
            )
        tape.backward(loss)
        lr = cfg.lr
        if cfg.warmup > 0 and it < cfg.warmup:
            lr = cfg.lr * (it + 1) / cfg.warmup
        opt.step(lr=lr)

    tape = Tape()
    _, loss_mse = loss_nodes(model, tape, task, 0.0)
    final = float(loss_mse.value)
    history.append((cfg.iterations, final))
    return finish(history, final)


def trial_rng(seed: int) -> np.random.Generator:
    """Adapter-initialization stream for one trial."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((seed, _TRIAL_ADAPTER_STREAM)))
    )


def run_trial(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int):
    """One trial: fixed host (model_cfg.seed), per-trial task and adapter init.

    Returns (metrics, model); the model carries the final adapter parameters.
    """
    model = build_model(model_cfg)
    model.reinit_adapters(trial_rng(seed))
    task = make_task(model_cfg.width, model_cfg.height, model_cfg.channels, seed)
    try:
        metrics = train_adapters(model, task, train_cfg)
    except DivergenceError as e:
        metrics = RunMetrics(
            seed, model_cfg.adapter, train_cfg.iterations, float("nan"),
            model.adapter_param_count(), tuple(e.history), diverged=True,
        )
    return metrics, model


def run_single(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int) -> RunMetrics:
    """One trial; metrics only."""
    return run_trial(model_cfg, train_cfg, seed)[0]


def run_regression(model_cfg: ModelConfig, train_cfg: TrainConfig) -> list:
    """All trials of one adapter arm over the configured seed list."""
    return [run_single(model_cfg, train_cfg, seed) for seed in train_cfg.seeds]


ABLATION_CHOICES = ("heat", "wave", "poisson", "all")


def ablation_model_cfg(model_cfg: ModelConfig, removed: str) -> ModelConfig:
    """Model config with one prior excised (router renormalizes) or no adapter."""
    if removed not in ABLATION_CHOICES:
        raise ConfigError(f"removed prior must be one of {ABLATION_CHOICES}, got {removed!r}")
    if removed == "all":
        return replace(model_cfg, adapter="none")
    paths = tuple(p for p in ("heat", "wave", "poisson") if p != removed)
    return replace(model_cfg, adapter="moppa", moppa_paths=paths)


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, removed: str) -> list:
    """Trials with the named path deleted and the router renormalized."""
    return run_regression(ablation_model_cfg(model_cfg, removed), train_cfg)


def summarize(runs) -> tuple:
    """Mean and sample standard deviation of the final MSEs (nan if any diverged)."""
    values = np.array([r.final_mse for r in runs], dtype=np.float64)
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std
