"""Training regimes over a shared-encoder model: single-task SGD, joint
multi-task SGD, and episodic meta training.

The meta update follows the two-stage scheme: each sampled task takes one
inner gradient step (its decoder moves, and a candidate copy of the shared
weights moves), then the shared weights are updated to reduce the main-task
loss evaluated at those candidates.  With meta_order=2 the update
differentiates through the candidate, i.e. it applies
(I - alpha * H_task) to the main-task gradient via a Hessian-vector
product; with meta_order=1 that curvature term is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ContractError, DataError, DivergenceError, ParameterError
from .nn import ModelParams, forward
from .taskgen import TaskDataset
from .tensor import Tensor, backward, hvp, no_grad, softmax_cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01          # inner / plain-SGD learning rate
    beta: float = 0.01           # meta learning rate for the shared weights
    episodes: int = 1000
    batch_size: int = 32
    tasks_per_episode: int = 4
    meta_order: int = 2
    seed: int = 0
    loss: str = "cross_entropy"
    hvp_mode: str = "exact"
    eval_every: int = 0          # 0 disables periodic validation accuracy

    def __post_init__(self):
        # the alpha=0 / beta=0 reduction identities are part of the contract,
        # so zero rates are allowed even though real training uses positives
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("learning rates must be non-negative")
        if self.episodes < 1 or self.batch_size < 1 or self.tasks_per_episode < 1:
            raise ParameterError("episodes, batch_size and tasks_per_episode "
                                 "must be positive")
        if self.meta_order not in (1, 2):
            raise ParameterError(f"meta_order must be 1 or 2, got {self.meta_order}")
        if self.loss != "cross_entropy":
            raise ParameterError(f"unsupported loss {self.loss!r}")
        if self.hvp_mode not in ("exact", "fd"):
            raise ParameterError(f"unsupported hvp_mode {self.hvp_mode!r}")


@dataclass
class EpisodeLog:
    episode: int
    task_ids: list[int]
    task_losses: list[float]
    meta_loss: float
    grad_norm_F: float
    val_acc: float | None = None

    def __post_init__(self):
        values = [*self.task_losses, self.meta_loss, self.grad_norm_F]
        if not np.isfinite(values).all():
            raise DivergenceError(
                f"non-finite loss in episode {self.episode}: {values}", self.episode)


class BatchStreams:
    """Named random streams for one training run.

    Stream derivation is a stable function of the seed alone, and the class
    is public so tests can replay the exact draws a trainer makes: stream 0
    samples task ids, stream 1 draws meta batches, stream 2 yields dropout
    seeds, stream 10+t draws task t's batches.
    """

    def __init__(self, seed: int, n_tasks: int):
        def rng(key):
            return np.random.default_rng(
                np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))

        self.sampler = rng(0)
        self.meta = rng(1)
        self.dropout = rng(2)
        self.task = [rng(10 + t) for t in range(n_tasks)]

    def sample_tasks(self, b: int, n_tasks: int) -> list[int]:
        return [int(t) for t in self.sampler.choice(n_tasks, size=b, replace=False)]

    def task_batch(self, t: int, n: int, k: int) -> np.ndarray:
        return self.task[t].choice(n, size=min(k, n), replace=False)

    def meta_batch(self, n: int, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
        pool = np.arange(n) if exclude is None else np.setdiff1d(np.arange(n), exclude)
        if pool.size == 0:
            pool = np.arange(n)
        return pool[self.meta.choice(pool.size, size=min(k, pool.size), replace=False)]

    def dropout_seed(self) -> int:
        return int(self.dropout.integers(2 ** 63))


def _task_loss(model: ModelParams, t: int, x: np.ndarray, y: np.ndarray,
               training: bool, seed: int, theta_F=None, theta_D_t=None) -> Tensor:
    logits = forward(model, t, x, training=training, seed=seed,
                     theta_F=theta_F, theta_D_t=theta_D_t)
    return softmax_cross_entropy(logits, y)


def _flat_norm(arrays) -> float:
    return float(np.sqrt(sum(float((a * a).sum()) for a in arrays)))


def _check_model(model: ModelParams, episode: int) -> None:
    if not model.finite():
        raise DivergenceError(f"non-finite parameter after episode {episode}", episode)


def evaluate(model: ModelParams, dataset: LabeledDataset, t: int = 0,
             batch_size: int = 256) -> float:
    """Argmax-logit accuracy in eval mode."""
    if dataset.n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise DataError("evaluation needs labels")
    correct = 0
    with no_grad():
        for start in range(0, dataset.n, batch_size):
            x = dataset.inputs[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            pred = forward(model, t, x).data.argmax(axis=1)
            correct += int((pred == y).sum())
    return correct / dataset.n


def predict(model: ModelParams, inputs: np.ndarray, t: int = 0,
            batch_size: int = 256) -> np.ndarray:
    """Argmax class indices in eval mode."""
    out = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(forward(model, t, inputs[start:start + batch_size])
                       .data.argmax(axis=1))
    return np.concatenate(out) if out else np.array([], dtype=np.int64)


def _joint_loop(model: ModelParams, tasks: list[tuple[np.ndarray, np.ndarray]],
                cfg: TrainConfig, val_data: LabeledDataset | None):
    streams = BatchStreams(cfg.seed, len(tasks))
    params = list(model.all_tensors())
    logs: list[EpisodeLog] = []
    val_acc = None
    for step in range(cfg.episodes):
        total = None
        losses = []
        for t, (x_all, y_all) in enumerate(tasks):
            idx = streams.task_batch(t, len(x_all), cfg.batch_size)
            loss = _task_loss(model, t, x_all[idx], y_all[idx],
                              training=True, seed=streams.dropout_seed())
            losses.append(loss.item())
            total = loss if total is None else total + loss
        grads = backward(total)
        for p in params:
            p.data -= cfg.alpha * grads.data(p)
        _check_model(model, step)
        if val_data is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            val_acc = evaluate(model, val_data)
        aux = losses[1:] if len(losses) > 1 else losses
        logs.append(EpisodeLog(
            episode=step, task_ids=list(range(len(tasks))), task_losses=aux,
            meta_loss=losses[0],
            grad_norm_F=_flat_norm(grads.data(w) for w in model.theta_F),
            val_acc=val_acc))
    return model, logs


def train_stl(model: ModelParams, main_task: LabeledDataset, cfg: TrainConfig,
              val_data: LabeledDataset | None = None):
    """Minibatch SGD on the main task alone."""
    if model.n_tasks != 1:
        raise ContractError(f"single-task model must have exactly one decoder, "
                            f"got {model.n_tasks}")
    if main_task.labels is None:
        raise DataError("the main task needs labels")
    return _joint_loop(model, [(main_task.inputs, main_task.labels)], cfg, val_data)


def train_mtl_joint(model: ModelParams, main_task: LabeledDataset,
                    aux_tasks: list[TaskDataset], cfg: TrainConfig,
                    val_data: LabeledDataset | None = None):
    """One SGD step per episode on the summed main and auxiliary losses."""
    if model.n_tasks != 1 + len(aux_tasks):
        raise ContractError(f"model has {model.n_tasks} decoders for "
                            f"{1 + len(aux_tasks)} tasks")
    if main_task.labels is None:
        raise DataError("the main task needs labels")
    tasks = [(main_task.inputs, main_task.labels)]
    tasks += [(a.inputs, a.pseudo_labels) for a in aux_tasks]
    return _joint_loop(model, tasks, cfg, val_data)


def meta_shared_gradient(aux_loss_fn, main_loss_fn, shared: list[Tensor],
                         alpha: float, meta_order: int, hvp_mode: str = "exact",
                         after_inner=None, curvature_loss_fn=None):
    """Gradient of main_loss(shared - alpha * grad aux_loss(shared)) wrt shared.

    Computes the one-step candidate weights from aux_loss_fn's gradient and
    differentiates the main loss through them: order 2 applies the exact
    (I - alpha*H) factor via a Hessian-vector product, order 1 drops it.
    after_inner(inner_grad_map), when given, runs between the inner gradient
    and the candidate evaluation (the decoder update hook).  The curvature
    term re-evaluates the auxiliary loss; curvature_loss_fn overrides the
    closure used for that when aux_loss_fn would observe mutated state.

    Returns (inner_loss, main_loss, meta_grads).
    """
    inner_loss = aux_loss_fn(shared)
    gmap = backward(inner_loss)
    if after_inner is not None:
        after_inner(gmap)
    g_s = [gmap.data(w) for w in shared]
    theta_star = [Tensor(w.data - alpha * g, requires_grad=True)
                  for w, g in zip(shared, g_s)]
    main_loss = main_loss_fn(theta_star)
    v_map = backward(main_loss)
    v = [v_map.data(w) for w in theta_star]
    if meta_order == 2 and alpha != 0.0:
        hv = hvp(curvature_loss_fn or aux_loss_fn, shared, v, mode=hvp_mode)
        meta = [vi - alpha * hi for vi, hi in zip(v, hv)]
    else:
        meta = v
    return inner_loss, main_loss, meta


def meta_episode(model: ModelParams, task_batch, main_batch_fn, cfg: TrainConfig,
                 dropout_seeds=None, episode: int = 0) -> EpisodeLog:
    """One episode: per-task inner updates, then one shared-weight meta step.

    task_batch lists (task_id, x, y) with batches already drawn by the
    episode driver; main_batch_fn yields one fresh main-task batch per
    sampled task.  Decoders of unsampled tasks are untouched.
    """
    if not task_batch:
        raise ContractError("meta_episode needs at least one sampled task")
    if dropout_seeds is None:
        dropout_seeds = [(0, 0)] * len(task_batch)
    meta_sum = [np.zeros_like(w.data) for w in model.theta_F]
    task_losses: list[float] = []
    meta_losses: list[float] = []

    for (t, xb, yb), (seed_in, seed_meta) in zip(task_batch, dropout_seeds):
        decoder = model.theta_D[t]
        decoder_prev = [Tensor(w.data.copy()) for w in decoder]

        def live_loss(theta_f, _t=t, _x=xb, _y=yb, _s=seed_in):
            return _task_loss(model, _t, _x, _y, training=True, seed=_s,
                              theta_F=theta_f)

        def frozen_loss(theta_f, _t=t, _x=xb, _y=yb, _s=seed_in, _dec=decoder_prev):
            return _task_loss(model, _t, _x, _y, training=True, seed=_s,
                              theta_F=theta_f, theta_D_t=_dec)

        def update_decoder(gmap, _decoder=decoder):
            for w in _decoder:
                w.data -= cfg.alpha * gmap.data(w)

        def main_loss_at(theta_star, _s=seed_meta):
            x0, y0 = main_batch_fn()
            return _task_loss(model, 0, x0, y0, training=True, seed=_s,
                              theta_F=theta_star)

        inner_loss, meta_loss, meta_g = meta_shared_gradient(
            live_loss, main_loss_at, model.theta_F, cfg.alpha, cfg.meta_order,
            hvp_mode=cfg.hvp_mode, after_inner=update_decoder,
            curvature_loss_fn=frozen_loss)
        task_losses.append(inner_loss.item())
        meta_losses.append(meta_loss.item())
        for acc, g in zip(meta_sum, meta_g):
            acc += g

    meta_mean = [g / len(task_batch) for g in meta_sum]
    if cfg.beta != 0.0:
        for w, g in zip(model.theta_F, meta_mean):
            w.data -= cfg.beta * g
    _check_model(model, episode)
    return EpisodeLog(
        episode=episode, task_ids=[t for t, _, _ in task_batch],
        task_losses=task_losses, meta_loss=float(np.mean(meta_losses)),
        grad_norm_F=_flat_norm(meta_mean))


def train_meta_mtl(model: ModelParams, main_task: LabeledDataset,
                   aux_tasks: list[TaskDataset], cfg: TrainConfig,
                   val_data: LabeledDataset | None = None):
    """Episodic meta training with uniform task sampling over main + auxiliary."""
    n_tasks = 1 + len(aux_tasks)
    if model.n_tasks != n_tasks:
        raise ContractError(f"model has {model.n_tasks} decoders for {n_tasks} tasks")
    if main_task.labels is None:
        raise DataError("the main task needs labels")
    if cfg.tasks_per_episode > n_tasks:
        raise ParameterError(
            f"tasks_per_episode={cfg.tasks_per_episode} exceeds the task pool "
            f"size {n_tasks}")
    pool = [(main_task.inputs, main_task.labels)]
    pool += [(a.inputs, a.pseudo_labels) for a in aux_tasks]

    streams = BatchStreams(cfg.seed, n_tasks)
    logs: list[EpisodeLog] = []
    val_acc = None
    for ep in range(cfg.episodes):
        ids = streams.sample_tasks(cfg.tasks_per_episode, n_tasks)
        task_batch = []
        meta_batches = []
        seeds = []
        for t in ids:
            x_all, y_all = pool[t]
            idx = streams.task_batch(t, len(x_all), cfg.batch_size)
            task_batch.append((t, x_all[idx], y_all[idx]))
            # the meta step sees a fresh main batch, disjoint from the inner
            # batch whenever the sampled task is the main task itself
            exclude = idx if t == 0 else None
            midx = streams.meta_batch(main_task.n, cfg.batch_size, exclude=exclude)
            meta_batches.append((main_task.inputs[midx], main_task.labels[midx]))
            seeds.append((streams.dropout_seed(), streams.dropout_seed()))
        batches = iter(meta_batches)
        log = meta_episode(model, task_batch, lambda: next(batches), cfg,
                           dropout_seeds=seeds, episode=ep)
        if val_data is not None and cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
            val_acc = evaluate(model, val_data)
        log.val_acc = val_acc
        logs.append(log)
    return model, logs


def write_episode_csv(path, logs: list[EpisodeLog]) -> None:
    """Fixed-precision CSV stream of the per-episode log."""
    with open(path, "w") as f:
        f.write("episode,task_ids,aux_loss_mean,meta_loss,grad_norm_F,val_acc\n")
        for log in logs:
            ids = "|".join(str(t) for t in log.task_ids)
            val = "" if log.val_acc is None else f"{log.val_acc:.6f}"
            f.write(f"{log.episode},{ids},{np.mean(log.task_losses):.6f},"
                    f"{log.meta_loss:.6f},{log.grad_norm_F:.6f},{val}\n")
