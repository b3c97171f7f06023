"""
AdamW training loop with early stopping and a tab-separated run log.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from functools import reduce
from typing import List, Optional

import numpy as np

import autodiff as ad
from config import TrainConfig
from errors import EmptyDataset, IncompatibleObjective, StateMismatch, ValidationError
from lora import trainable_fraction
from model import cross_entropy, forward_class, forward_lm, mse_tensor, score_tensor

logger = logging.getLogger(__name__)

# Objective -> head kind it trains
OBJECTIVE_HEADS = {
    'mse': 'regression',
    'ce': 'classification',
    'lm': 'lm',
}


@dataclass(frozen=True)
class Sample:
    """
    One training item.

    mse: `target` is the normalized score. ce: `target` is the class index.
    lm: the loss covers token_ids[prompt_len:] (response and eos) only.
    """
    token_ids: tuple
    target: float = 0.0
    prompt_len: int = 0


@dataclass
class AdamWHyper:
    learning_rate: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_config(cls, config: TrainConfig):
        return cls(
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )


@dataclass
class AdamWState:
    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def for_params(cls, params):
        return cls(
            step=0,
            m=[np.zeros_like(_array(p)) for p in params],
            v=[np.zeros_like(_array(p)) for p in params],
        )


def _array(param):
    return param.data if isinstance(param, ad.Tensor) else param


def adamw_step(params, grads, state, hyper):
    """
    One AdamW update, in place.

    Weight decay is decoupled: p -= lr * wd * p happens before the adaptive
    step p -= lr * m_hat / (sqrt(v_hat) + eps), where m_hat and v_hat are
    the bias-corrected moments at the incremented timestep.

    Args:
        params: Tensors (or ndarrays) updated in place
        grads: ndarrays aligned with params
        state: AdamWState aligned with params

    Returns:
        (params, state)
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise StateMismatch(
            f"{len(params)} params, {len(grads)} grads, {len(state.m)}/{len(state.v)} moment slots"
        )
    state.step += 1
    t = state.step
    correction1 = 1.0 - hyper.beta1 ** t
    correction2 = 1.0 - hyper.beta2 ** t
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        p = _array(param)
        if p.shape != grad.shape or p.shape != m.shape:
            raise StateMismatch(f"param {p.shape}, grad {grad.shape} and state {m.shape} differ")
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * grad
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * grad * grad
        if hyper.weight_decay:
            p -= hyper.learning_rate * hyper.weight_decay * p
        p -= hyper.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
    return params, state


def early_stop_check(val_history, patience):
    """
    True once the best (earliest minimum) validation loss is `patience` or
    more epochs behind the latest one.

    Examples:
        >>> early_stop_check([1.0], 1)
        False
        >>> early_stop_check([1.0, 0.9, 0.95, 0.96], 2)
        True
    """
    if not val_history:
        return False
    # NaN epochs never count as the best one
    history = np.asarray(val_history, dtype=np.float64)
    best_index = int(np.argmin(np.where(np.isnan(history), np.inf, history)))
    return (len(val_history) - 1 - best_index) >= patience


# ==============================================================================
# LOSSES
# ==============================================================================

def check_objective(model, objective):
    if objective not in OBJECTIVE_HEADS:
        raise IncompatibleObjective(f"objective must be one of {sorted(OBJECTIVE_HEADS)}, got {objective!r}")
    if OBJECTIVE_HEADS[objective] != model.config.head_kind:
        raise IncompatibleObjective(
            f"objective {objective!r} needs a {OBJECTIVE_HEADS[objective]} head, "
            f"model has {model.config.head_kind}"
        )


def sample_loss(model, sample, objective):
    """Differentiable loss of one sample, shape (1,)."""
    ids = list(sample.token_ids)
    if objective == 'mse':
        return mse_tensor(score_tensor(model, ids), [sample.target])
    if objective == 'ce':
        logits = forward_class(model, ids)
        return cross_entropy(ad.reshape(logits, (1, logits.size)), [int(sample.target)])
    if not 1 <= sample.prompt_len < len(ids):
        raise ValidationError(f"lm sample needs 1 <= prompt_len < {len(ids)}, got {sample.prompt_len}")
    logits = forward_lm(model, ids[:-1])
    positions = range(sample.prompt_len - 1, len(ids) - 1)
    return cross_entropy(ad.take_rows(logits, positions), ids[sample.prompt_len:])


def batch_loss(model, samples, objective):
    losses = [sample_loss(model, s, objective) for s in samples]
    return ad.scale(reduce(ad.add, losses), 1.0 / len(losses))


def evaluate_loss(model, samples, objective):
    """Mean per-sample loss without recording a graph."""
    if not samples:
        raise EmptyDataset("cannot evaluate on an empty split")
    with ad.no_grad():
        return float(np.mean([sample_loss(model, s, objective).item() for s in samples]))


# ==============================================================================
# TRAINING LOOP
# ==============================================================================

@dataclass
class TrainReport:
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None  # None when no epoch had a finite validation loss
    stopped_early: bool = False
    trainable_fraction: float = 0.0
    initial_val_loss: Optional[float] = None

    @property
    def epochs_run(self):
        return len(self.val_losses)

    @property
    def best_val_loss(self):
        return math.nan if self.best_epoch is None else self.val_losses[self.best_epoch - 1]


def _global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def train(model, train_set, val_set, objective, config: TrainConfig):
    """
    Fit the model's trainable parameters and restore the best epoch.

    Each epoch visits train_set in a permutation drawn from (seed, epoch),
    in mini-batches of config.batch_size. Validation loss after every epoch
    drives early stopping and best-epoch selection.

    Raises:
        EmptyDataset: either split is empty
        IncompatibleObjective: objective does not match the model head
    """
    config.validate()
    check_objective(model, objective)
    if not train_set or not val_set:
        raise EmptyDataset(f"need nonempty train and validation splits, got {len(train_set)} and {len(val_set)}")

    params = model.trainable_parameters()
    state = AdamWState.for_params(params)
    hyper = AdamWHyper.from_config(config)
    report = TrainReport(trainable_fraction=trainable_fraction(model))
    report.initial_val_loss = evaluate_loss(model, val_set, objective)
    logger.info("Training %d params (%.4f of model) on %d samples, objective %s, initial val loss %.6f",
                len(params), report.trainable_fraction, len(train_set), objective, report.initial_val_loss)

    best_val = math.inf
    best_snapshot = [p.data.copy() for p in params]
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng((config.seed, epoch)).permutation(len(train_set))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            model.zero_grad()
            loss = batch_loss(model, batch, objective)
            ad.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            norm = _global_norm(grads)
            if not math.isfinite(norm):
                logger.warning("Skipping step in epoch %d: non-finite gradient norm", epoch)
                continue
            if config.grad_clip_norm is not None and norm > config.grad_clip_norm:
                factor = config.grad_clip_norm / norm
                grads = [g * factor for g in grads]
            adamw_step(params, grads, state, hyper)
            epoch_losses.append(loss.item())

        val_loss = evaluate_loss(model, val_set, objective)
        report.train_losses.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        report.val_losses.append(val_loss)
        report.seconds.append(time.perf_counter() - started)
        logger.info("Epoch %d: train %.6f val %.6f", epoch, report.train_losses[-1], val_loss)

        if val_loss < best_val:
            best_val = val_loss
            report.best_epoch = epoch
            best_snapshot = [p.data.copy() for p in params]
        if early_stop_check(report.val_losses, config.early_stop_patience):
            report.stopped_early = True
            logger.info("Early stop after epoch %d (best epoch %s)", epoch, report.best_epoch)
            break

    if report.best_epoch is None:
        logger.warning("No finite validation loss in %d epochs; keeping the initial parameters", report.epochs_run)
    for param, saved in zip(params, best_snapshot):
        param.data[...] = saved
    model.zero_grad()
    return report


# ==============================================================================
# RUN LOG
# ==============================================================================

RUN_LOG_COLUMNS = ('epoch', 'train_loss', 'val_loss', 'seconds')
UNDEFINED = 'n/a'


def format_run_log(report):
    """
    One `epoch<TAB>train_loss<TAB>val_loss<TAB>seconds` line per epoch,
    a leading column header and a trailing `#` summary line.
    """
    lines = ['# ' + '\t'.join(RUN_LOG_COLUMNS)]
    for i, (train_loss, val_loss, seconds) in enumerate(
            zip(report.train_losses, report.val_losses, report.seconds), start=1):
        lines.append(f"{i}\t{train_loss!r}\t{val_loss!r}\t{seconds:.3f}")
    best_epoch = UNDEFINED if report.best_epoch is None else report.best_epoch
    lines.append(
        f"# best_epoch={best_epoch} stopped_early={str(report.stopped_early).lower()} "
        f"trainable_fraction={report.trainable_fraction!r}"
    )
    return '\n'.join(lines) + '\n'


def write_run_log(report, path):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(format_run_log(report))
    logger.info("Wrote run log to %s", path)
