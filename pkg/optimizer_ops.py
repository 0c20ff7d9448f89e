"""
optimizer_ops.py: Curriculum training and frozen-metric registration

Training runs in two stages over a corpus of registration tasks:
    - global: momenta only, under the constant setpoint multi-Gaussian kernel
    - local: momenta and the shared regressor parameters jointly

Individual parameters (one momentum per task plus its optimizer velocity) are
kept in an IndividualStore and restored for every random batch. The shared
parameters live in memory. Both groups use SGD with Nesterov momentum, their
gradients are clipped separately, and a plateau scheduler halves both learning
rates when the mean epoch energy stops improving. The regressor descends the
mean energy of the batch, so its weight decay enters each update once.

Checkpoint directory:
    theta.bin         regressor parameters
    shared_state.bin  regressor velocity, learning rates, stage, epoch and plateau history
    task_<id>.bin     momentum and velocity of each task
    log.csv           one row per epoch
    config.txt        resolved configuration

A run restarted from a checkpoint continues the same trajectory.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import regressor_ops
import vsvf_ops
from field_ops import VectorField
from run_utils import (STREAM_BATCH, STREAM_INIT, DataIOError, DivergenceError, InvalidParameter, ensure_dir,
                       read_csv, write_csv)

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "stage", "lr_shared", "lr_individual", "total") + vsvf_ops.TERMS
HISTORY_HEADER = ("iteration", "stage", "lr", "total") + vsvf_ops.TERMS
SHARED_STATE = "shared_state.bin"


@dataclass(frozen=True)
class OptimizerConfig:
    nesterov_momentum: float = 0.9
    lr_individual: float = 0.1
    lr_shared: float = 0.025
    clip_norm: float = 1.0
    batch_size: int = 100
    inner_steps_per_batch: int = 5
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_threshold: float = 1e-8
    epochs_global: int = 50
    epochs_local: int = 100
    test_iterations_global: int = 250
    test_iterations_local: int = 500

    def __post_init__(self):
        if self.lr_individual <= 0 or self.lr_shared <= 0:
            raise InvalidParameter("learning rates must be positive")
        if not 0 <= self.nesterov_momentum < 1:
            raise InvalidParameter(f"nesterov_momentum must be in [0, 1), got {self.nesterov_momentum}")
        if self.clip_norm <= 0:
            raise InvalidParameter("clip_norm must be positive")
        if self.plateau_patience < 1:
            raise InvalidParameter(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0 < self.plateau_factor < 1:
            raise InvalidParameter("plateau_factor must be in (0, 1)")
        if self.batch_size < 1 or self.inner_steps_per_batch < 1:
            raise InvalidParameter("batch_size and inner_steps_per_batch must be >= 1")
        if min(self.epochs_global, self.epochs_local, self.test_iterations_global, self.test_iterations_local) < 0:
            raise InvalidParameter("epoch and iteration counts must be nonnegative")


# update rules

def sgd_nesterov_step(params, grads, velocity, lr, momentum):
    """Nesterov SGD on lists of arrays; returns ``(params, velocity)`` as new lists.

    v <- mu v + g,  p <- p - lr (g + mu v)
    """
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        v = momentum * v + g
        new_params.append(p - lr * (g + momentum * v))
        new_velocity.append(v)
    return new_params, new_velocity


def clip_gradients(grads, max_norm):
    """Scale a gradient group to l2 norm ``max_norm`` when it is larger; returns ``(grads, norm)``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def epochs_since_best(history, threshold=1e-8):
    best = np.inf
    bad = 0
    for value in history:
        if not np.isfinite(best) or value < best - abs(best) * threshold:
            best = value
            bad = 0
        else:
            bad += 1
    return bad


def plateau_scheduler(history, factor, patience, lr, threshold=1e-8):
    """Learning rate after the latest entry of ``history`` (one monitored value per epoch)."""
    bad = epochs_since_best(history, threshold)
    if bad > 0 and bad % patience == 0:
        return lr * factor
    return lr


# individual parameter persistence

class IndividualStore:
    """Momentum and velocity per task id, in memory or as ``task_<id>.bin`` files in ``directory``."""

    def __init__(self, directory=None):
        self.directory = directory
        self._memory = {}
        if directory is not None:
            ensure_dir(directory)

    def path(self, task_id):
        return os.path.join(self.directory, f"task_{task_id}.bin")

    def save(self, task_id, momentum, velocity):
        if self.directory is None:
            self._memory[task_id] = (np.array(momentum), np.array(velocity))
            return
        try:
            with open(self.path(task_id), "wb") as f:
                np.savez(f, momentum=momentum, velocity=velocity)
        except OSError as e:
            raise DataIOError(f"cannot write {self.path(task_id)}: {e}") from e

    def load(self, task_id):
        if self.directory is None:
            momentum, velocity = self._memory[task_id]
            return momentum.copy(), velocity.copy()
        try:
            with open(self.path(task_id), "rb") as f:
                data = np.load(f)
                return data["momentum"], data["velocity"]
        except (OSError, KeyError, ValueError) as e:
            raise DataIOError(f"cannot read {self.path(task_id)}: {e}") from e


@dataclass
class TrainState:
    theta: regressor_ops.RegressorParams
    theta_velocity: list
    lr_shared: float
    lr_individual: float
    epoch: int = 0
    stage: str = "global"
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    theta: regressor_ops.RegressorParams
    momenta: dict
    log: list


def _log_row(epoch, stage, state, energies):
    row = {"epoch": epoch, "stage": stage, "lr_shared": state.lr_shared, "lr_individual": state.lr_individual}
    for key in ("total",) + vsvf_ops.TERMS:
        row[key] = float(np.mean([getattr(e, key) for e in energies]))
    return row


def write_checkpoint(out_dir, state, store, corpus, log_rows, config_text, config_hash, regressor_config):
    """Write theta, the shared optimizer state, per-task state, the log and the configuration into ``out_dir``."""
    ensure_dir(out_dir)
    regressor_ops.save_params(os.path.join(out_dir, "theta.bin"), state.theta, regressor_config)
    path = os.path.join(out_dir, SHARED_STATE)
    velocity = {f"velocity_{k}": v for k, v in enumerate(state.theta_velocity)}
    try:
        with open(path, "wb") as f:
            np.savez(f, lr_shared=state.lr_shared, lr_individual=state.lr_individual, epoch=state.epoch,
                     stage=state.stage, history=np.asarray(state.history, dtype=np.float64), **velocity)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e
    if store.directory is None or os.path.abspath(store.directory) != os.path.abspath(out_dir):
        target = IndividualStore(out_dir)
        for task in corpus:
            target.save(task.task_id, *store.load(task.task_id))
    write_csv(os.path.join(out_dir, "log.csv"), LOG_HEADER, log_rows, config_hash)
    try:
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write(config_text)
    except OSError as e:
        raise DataIOError(f"cannot write config.txt in {out_dir}: {e}") from e


def _parse_log_row(row):
    parsed = {"epoch": int(row["epoch"]), "stage": row["stage"]}
    parsed.update((key, float(row[key])) for key in LOG_HEADER[2:])
    return parsed


def load_checkpoint(out_dir):
    """Read a checkpoint written by ``write_checkpoint``; returns ``(TrainState, log rows)``."""
    theta, _ = regressor_ops.load_params(os.path.join(out_dir, "theta.bin"))
    path = os.path.join(out_dir, SHARED_STATE)
    try:
        with open(path, "rb") as f:
            data = np.load(f)
            n = len([key for key in data.files if key.startswith("velocity_")])
            state = TrainState(theta, [data[f"velocity_{k}"] for k in range(n)], float(data["lr_shared"]),
                               float(data["lr_individual"]), int(data["epoch"]), str(data["stage"]),
                               [float(v) for v in data["history"]])
    except (OSError, KeyError, ValueError) as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    _, rows = read_csv(os.path.join(out_dir, "log.csv"))
    try:
        log_rows = [_parse_log_row(row) for row in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise DataIOError(f"malformed training log in {out_dir}: {e}") from e
    return state, log_rows


class _BatchRunner:
    def __init__(self, spec, vsvf_config, regressor_config, jobs):
        self.spec = spec
        self.vsvf_config = vsvf_config
        self.regressor_config = regressor_config
        self.jobs = jobs

    def evaluate(self, tasks, momenta, theta, stage):
        def one(i):
            return vsvf_ops.energy_and_gradients(tasks[i], momenta[i], theta, self.spec, self.vsvf_config,
                                                 self.regressor_config, stage)

        if self.jobs > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return list(pool.map(one, range(len(tasks))))
        return [one(i) for i in range(len(tasks))]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    size = min(batch_size, n)
    return [order[i:i + size] for i in range(0, n, size)]


def batch_shared_gradient(per_task):
    """Mean over the batch of per-task regressor gradients (lists of arrays, one list per task)."""
    return [sum(parts) / len(per_task) for parts in zip(*per_task)]


def _run_batch(runner, batch, store, state, config, stage):
    """Inner SGD steps on one batch; returns the energies of the first step."""
    tasks = batch
    loaded = [store.load(t.task_id) for t in tasks]
    momenta = [m for m, _ in loaded]
    velocities = [v for _, v in loaded]
    first = None
    for step in range(config.inner_steps_per_batch):
        results = runner.evaluate(tasks, momenta, state.theta, stage)
        if first is None:
            first = [r[0].breakdown() for r in results]

        grads, _ = clip_gradients([r[1] for r in results], config.clip_norm)
        momenta, velocities = sgd_nesterov_step(momenta, grads, velocities, state.lr_individual,
                                                config.nesterov_momentum)
        if stage == "local":
            shared = batch_shared_gradient([r[2] for r in results])
            shared, _ = clip_gradients(shared, config.clip_norm)
            tensors, state.theta_velocity = sgd_nesterov_step(state.theta.tensors(), shared, state.theta_velocity,
                                                              state.lr_shared, config.nesterov_momentum)
            state.theta = regressor_ops.RegressorParams.from_tensors(tensors)

    for task, m, v in zip(tasks, momenta, velocities):
        store.save(task.task_id, m, v)
    return first


def train_curriculum(corpus, config, spec, vsvf_config, regressor_config, seed=0, out_dir=None,
                     config_text="", config_hash="", jobs=1, resume=False):
    """Two-stage training; returns a TrainResult and writes checkpoints when ``out_dir`` is set.

    With ``resume`` the run continues from the checkpoint in ``out_dir``.
    """
    if not corpus:
        raise InvalidParameter("training needs at least one registration task")
    if resume and out_dir is None:
        raise InvalidParameter("resuming needs a checkpoint directory")
    store = IndividualStore(out_dir)
    if resume:
        state, log_rows = load_checkpoint(out_dir)
        logger.info("Resuming after epoch %d (%s stage)", state.epoch, state.stage)
    else:
        ndim = corpus[0].grid.ndim
        theta = regressor_ops.init_params(regressor_config, spec.n, ndim,
                                          np.random.default_rng([seed, STREAM_INIT, 0]))
        state = TrainState(theta, [np.zeros_like(t) for t in theta.tensors()], config.lr_shared,
                           config.lr_individual)
        log_rows = []
        for task in corpus:
            store.save(task.task_id, task.momentum, np.zeros_like(task.momentum))

    runner = _BatchRunner(spec, vsvf_config, regressor_config, jobs)
    done = state.epoch
    epoch = 0
    good = (state.theta.copy(), [v.copy() for v in state.theta_velocity])
    for stage, epochs in (("global", config.epochs_global), ("local", config.epochs_local)):
        if epochs and epoch >= done:
            # fresh optimizer state at the stage switch
            state.stage = stage
            state.history = []
            state.lr_shared, state.lr_individual = config.lr_shared, config.lr_individual
            state.theta_velocity = [np.zeros_like(t) for t in state.theta.tensors()]
            for task in corpus:
                momentum, _ = store.load(task.task_id)
                store.save(task.task_id, momentum, np.zeros_like(momentum))
            logger.info("Starting %s stage (%d epochs)", stage, epochs)

        for _ in range(epochs):
            epoch += 1
            if epoch <= done:
                continue
            rng = np.random.default_rng([seed, STREAM_BATCH, epoch])
            energies = []
            try:
                for batch in _batches(len(corpus), config.batch_size, rng):
                    energies.extend(_run_batch(runner, [corpus[i] for i in batch], store, state, config, stage))
                    good = (state.theta.copy(), [v.copy() for v in state.theta_velocity])
            except DivergenceError as e:
                if out_dir is not None:
                    state.theta, state.theta_velocity = good
                    write_checkpoint(out_dir, state, store, corpus, log_rows, config_text, config_hash,
                                     regressor_config)
                raise DivergenceError(f"training diverged in {stage} stage: {e}", step=epoch) from e

            row = _log_row(epoch, stage, state, energies)
            if not np.isfinite(row["total"]):
                raise DivergenceError(f"non-finite mean energy in {stage} stage", step=epoch)
            log_rows.append(row)
            logger.info("Epoch %d (%s): energy %.6g", epoch, stage, row["total"])

            state.history.append(row["total"])
            lr = plateau_scheduler(state.history, config.plateau_factor, config.plateau_patience,
                                   state.lr_individual, config.plateau_threshold)
            if lr != state.lr_individual:
                state.lr_individual = lr
                state.lr_shared *= config.plateau_factor
                logger.info("Plateau: learning rates reduced to %g / %g", state.lr_individual, state.lr_shared)
            state.epoch = epoch
            if out_dir is not None:
                write_checkpoint(out_dir, state, store, corpus, log_rows, config_text, config_hash,
                                 regressor_config)

    if out_dir is not None and epoch == 0:
        write_checkpoint(out_dir, state, store, corpus, log_rows, config_text, config_hash, regressor_config)
    momenta = {task.task_id: store.load(task.task_id)[0] for task in corpus}
    return TrainResult(state.theta, momenta, log_rows)


# test-time registration

@dataclass
class RegistrationResult:
    momentum: np.ndarray
    phi_inv: VectorField
    phi_inv_global: VectorField
    energy: vsvf_ops.EnergyBreakdown
    initial_energy: vsvf_ops.EnergyBreakdown
    history: list
    local_weights: object
    diagnostics: list


def _optimize_momentum(task, momentum, theta, config, spec, vsvf_config, regressor_config, stage, iterations,
                       history):
    velocity = [np.zeros_like(momentum)]
    params = [momentum]
    lr = config.lr_individual
    energies = []
    for it in range(iterations):
        evaluation, grad, _ = vsvf_ops.energy_and_gradients(task, params[0], theta, spec, vsvf_config,
                                                            regressor_config, stage, theta_grad=False)
        breakdown = evaluation.breakdown()
        history.append({"iteration": len(history) + 1, "stage": stage, "lr": lr, **breakdown.as_row()})
        grads, _ = clip_gradients([grad], config.clip_norm)
        params, velocity = sgd_nesterov_step(params, grads, velocity, lr, config.nesterov_momentum)
        if not np.all(np.isfinite(params[0])):
            raise DivergenceError(f"non-finite momentum in {stage} registration", step=it + 1)
        energies.append(breakdown.total)
        lr = plateau_scheduler(energies, config.plateau_factor, config.plateau_patience, lr,
                               config.plateau_threshold)
    return params[0]


def register_with_frozen_metric(task, theta, config, spec, vsvf_config, regressor_config):
    """Global then local optimisation of the momentum of ``task`` with the regressor fixed."""
    momentum = np.zeros((task.grid.ndim,) + task.grid.dims)
    history = []

    initial = vsvf_ops.total_energy(task, momentum, theta, spec, vsvf_config, regressor_config, "local")
    momentum = _optimize_momentum(task, momentum, theta, config, spec, vsvf_config, regressor_config, "global",
                                  config.test_iterations_global, history)
    after_global = vsvf_ops.total_energy(task, momentum, theta, spec, vsvf_config, regressor_config, "global")
    momentum = _optimize_momentum(task, momentum, theta, config, spec, vsvf_config, regressor_config, "local",
                                  config.test_iterations_local, history)
    final = vsvf_ops.total_energy(task, momentum, theta, spec, vsvf_config, regressor_config, "local")
    logger.info("Registered %s: energy %.6g -> %.6g", task.task_id, float(initial.total), float(final.total))

    return RegistrationResult(
        momentum=momentum,
        phi_inv=VectorField(task.grid, final.phi_inv),
        phi_inv_global=VectorField(task.grid, after_global.phi_inv),
        energy=final.breakdown(),
        initial_energy=initial.breakdown(),
        history=history,
        local_weights=final.local_weights,
        diagnostics=initial.diagnostics + final.diagnostics,
    )
