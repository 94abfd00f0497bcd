"""Granger-causal training objective.

The contribution of expert i to one decision is measured by how much the
auxiliary prediction error grows when that expert's information is
removed: delta_i = eps_without_i - eps_with_all. Clamped and normalized
per sample, the deltas form a target distribution over experts; the mean
KL divergence from that target to the attention distribution (the MGE)
is blended into the total loss and doubles as a held-out quality proxy
for the importance estimates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Optimizer,
    Tensor,
    clear_grads,
    concat,
    per_sample_cross_entropy,
    per_sample_mae,
)
from .model import AmeModel, AmeOutput, forward

OMEGA_FLOOR = 1e-12  # below this total clamped delta, fall back to uniform

TRAINING_LOG_COLUMNS = ("epoch", "split", "main_loss", "mge", "aux_loss_mean", "alpha")


@dataclass
class GrangerTargets:
    """Per-sample error decomposition; plain arrays, detached from the tape."""

    eps_excl: np.ndarray   # (n, p) error without expert i
    eps_all: np.ndarray    # (n,)   error with all experts
    delta_eps: np.ndarray  # (n, p) eps_excl - eps_all
    omega: np.ndarray      # (n, p) normalized target distribution


def _per_sample_error(y_hat: Tensor, y_true: Tensor, task: str) -> Tensor:
    if task == "classification":
        return per_sample_cross_entropy(y_hat, y_true)
    return per_sample_mae(y_hat, y_true)


def aux_errors(output: AmeOutput, y_true, task: str) -> tuple[list[Tensor], Tensor]:
    """Per-sample auxiliary errors (eps without expert i, eps with all).

    Uses the task's auxiliary loss: MAE for regression, categorical
    cross-entropy for classification. Entries stay on the tape so the
    auxiliary predictors can be trained from them.
    """
    if not isinstance(y_true, Tensor):
        y_true = Tensor(y_true)
    eps_excl = [_per_sample_error(y_aux, y_true, task) for y_aux in output.y_aux_excl]
    eps_all = _per_sample_error(output.y_aux_all, y_true, task)
    return eps_excl, eps_all


def delta_epsilon(eps_excl: np.ndarray, eps_all: np.ndarray) -> np.ndarray:
    """Error decrease attributable to each expert: eps_excl - eps_all."""
    eps_excl = np.asarray(eps_excl, dtype=np.float64)
    eps_all = np.asarray(eps_all, dtype=np.float64)
    if eps_excl.ndim == 1:
        return eps_excl - eps_all
    return eps_excl - eps_all[:, None]


def omega_targets(delta_eps: np.ndarray) -> np.ndarray:
    """Normalize clamped deltas into a per-sample distribution.

    Negative deltas (experts whose removal helps) are clamped to zero; if
    everything clamps away the row falls back to uniform, the
    attribution-neutral choice.
    """
    delta = np.asarray(delta_eps, dtype=np.float64)
    squeeze = delta.ndim == 1
    if squeeze:
        delta = delta[None, :]
    clamped = np.maximum(delta, 0.0)
    totals = clamped.sum(axis=1, keepdims=True)
    p = delta.shape[1]
    degenerate = totals <= OMEGA_FLOOR
    omega = np.where(degenerate, 1.0 / p, clamped / np.where(degenerate, 1.0, totals))
    return omega[0] if squeeze else omega


def granger_targets(output: AmeOutput, y_true, task: str) -> GrangerTargets:
    """Detached target computation for a batch (reporting and training)."""
    eps_excl_t, eps_all_t = aux_errors(output, y_true, task)
    eps_excl = np.stack([t.data for t in eps_excl_t], axis=1)
    eps_all = eps_all_t.data.copy()
    delta = delta_epsilon(eps_excl, eps_all)
    return GrangerTargets(eps_excl=eps_excl, eps_all=eps_all,
                          delta_eps=delta, omega=omega_targets(delta))


def kl_divergence(omega: np.ndarray, a: np.ndarray) -> np.ndarray | float:
    """KL(omega || a) per row, with 0*log(0/a) taken as 0.

    `a` must be strictly positive (softmax output always is).
    """
    omega = np.asarray(omega, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if omega.shape != a.shape:
        raise ValueError(f"kl_divergence: shapes {omega.shape} and {a.shape} differ")
    if np.any(a <= 0.0):
        raise ValueError("kl_divergence: second argument must be strictly positive")
    terms = np.where(omega > 0.0, omega * (np.log(np.where(omega > 0.0, omega, 1.0)) - np.log(a)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _entropy_rows(omega: np.ndarray) -> np.ndarray:
    terms = np.where(omega > 0.0, omega * np.log(np.where(omega > 0.0, omega, 1.0)), 0.0)
    return terms.sum(axis=1)


def mge_loss(omega: np.ndarray, a: Tensor) -> Tensor:
    """Batch-mean KL(omega || a) with omega held constant.

    Gradients flow only into the attention distribution. Row-wise the loss
    is sum(omega*log(omega)) - sum(omega*log(a)); the first term has no
    parameters and is added as a constant so the reported value is a true
    KL divergence.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 2 or omega.shape != a.shape:
        raise ValueError(f"mge_loss: omega shape {omega.shape} does not match attention {a.shape}")
    if omega.shape[0] == 0:
        raise ValueError("mge_loss: empty batch")
    entropy = Tensor(_entropy_rows(omega))
    cross = (Tensor(omega) * a.log()).sum(axis=1)
    return (entropy - cross).mean()


def mge_loss_differentiable(delta_rows: list[Tensor], a: Tensor) -> Tensor:
    """MGE with gradients also flowing into the targets (detach_targets=False).

    delta_rows are per-expert (n,) tensors still on the tape. Rows whose
    clamped deltas all vanish blend to the uniform target, mirroring
    :func:`omega_targets`.
    """
    n = delta_rows[0].shape[0]
    p = len(delta_rows)
    delta = concat([d.reshape(n, 1) for d in delta_rows], axis=1)
    clamped = delta.relu()
    totals = clamped.sum(axis=1, keepdims=True)
    live = (totals.data > OMEGA_FLOOR).astype(np.float64)
    safe = totals + Tensor(1.0 - live)  # dead rows divide by 1 instead of ~0
    omega = clamped / safe * Tensor(live) + Tensor((1.0 - live) * (1.0 / p))
    kl = (omega * ((omega + OMEGA_FLOOR).log() - a.log())).sum(axis=1)
    return kl.mean()


def total_loss(main: Tensor, mge: Tensor | None, aux_losses: list[Tensor],
               alpha: float, beta: float) -> Tensor:
    """Blend (1-alpha)*main + alpha*mge + beta*mean(aux_losses).

    The beta term gives the auxiliary predictors their training signal; it
    is reported separately in logs so the two-way blend stays visible.
    With alpha == 0 the MGE tensor may be omitted entirely.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    loss = main * (1.0 - alpha)
    if alpha > 0.0:
        if mge is None:
            raise ValueError("alpha > 0 requires an MGE term")
        loss = loss + mge * alpha
    if beta > 0.0 and aux_losses:
        aux_sum = aux_losses[0]
        for term in aux_losses[1:]:
            aux_sum = aux_sum + term
        loss = loss + aux_sum * (beta / len(aux_losses))
    return loss


@dataclass
class BatchLosses:
    """All tape-level loss terms of one batch, plus the detached targets."""

    total: Tensor
    main: Tensor
    mge_value: float
    aux_mean: float
    targets: GrangerTargets


def batch_losses(model: AmeModel, output: AmeOutput, y_true) -> BatchLosses:
    """Assemble the full objective for one forward pass."""
    cfg = model.config
    if not isinstance(y_true, Tensor):
        y_true = Tensor(y_true)
    if np.any(output.a.data <= 0.0):
        # softmax underflow: only reachable with wildly diverged parameters
        raise FloatingPointError("attention distribution underflowed to zero; "
                                 "training diverged")
    main = _per_sample_error(output.y, y_true, cfg.task).mean()

    eps_excl_t, eps_all_t = aux_errors(output, y_true, cfg.task)
    aux_losses = [t.mean() for t in eps_excl_t] + [eps_all_t.mean()]
    aux_mean = float(np.mean([t.item() for t in aux_losses]))

    eps_excl = np.stack([t.data for t in eps_excl_t], axis=1)
    delta = delta_epsilon(eps_excl, eps_all_t.data)
    omega = omega_targets(delta)
    targets = GrangerTargets(eps_excl=eps_excl, eps_all=eps_all_t.data.copy(),
                             delta_eps=delta, omega=omega)

    mge_value = float(np.mean(kl_divergence(omega, output.a.data)))
    mge_term: Tensor | None = None
    if cfg.alpha > 0.0:
        if cfg.detach_targets:
            mge_term = mge_loss(omega, output.a)
        else:
            delta_rows = [e - eps_all_t for e in eps_excl_t]
            mge_term = mge_loss_differentiable(delta_rows, output.a)
    total = total_loss(main, mge_term, aux_losses, cfg.alpha, cfg.aux_weight)
    return BatchLosses(total=total, main=main, mge_value=mge_value,
                       aux_mean=aux_mean, targets=targets)


def _batch_slices(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def trainable_parameters(model: AmeModel) -> list:
    """Everything when the auxiliary term is active; otherwise the
    auxiliary predictors receive no gradient and are left untouched."""
    if model.config.aux_weight > 0.0:
        return model.parameters()
    return model.main_parameters()


def train_epoch(model: AmeModel, opt: Optimizer, x: np.ndarray, y: np.ndarray,
                rng: np.random.Generator) -> dict:
    """One pass of minibatch updates; returns sample-weighted mean metrics."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    cfg = model.config
    params = trainable_parameters(model)
    order = rng.permutation(n)
    sums = np.zeros(3)
    for idx in _batch_slices(n, cfg.batch_size, order):
        losses = batch_losses(model, forward(model, x[idx]), y[idx])
        losses.total.backward()
        model.count_backward()
        opt.step(params)
        clear_grads(params)
        w = len(idx)
        sums += w * np.array([losses.main.item(), losses.mge_value, losses.aux_mean])
    return {"main_loss": sums[0] / n, "mge": sums[1] / n, "aux_loss_mean": sums[2] / n}


def evaluate(model: AmeModel, x: np.ndarray, y: np.ndarray,
             batch_size: int | None = None) -> dict:
    """Metrics without updates; deterministic batch order."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("evaluate: empty dataset")
    bs = batch_size or model.config.batch_size
    sums = np.zeros(3)
    for idx in _batch_slices(n, bs, np.arange(n)):
        losses = batch_losses(model, forward(model, x[idx]), y[idx])
        w = len(idx)
        sums += w * np.array([losses.main.item(), losses.mge_value, losses.aux_mean])
    return {"main_loss": sums[0] / n, "mge": sums[1] / n, "aux_loss_mean": sums[2] / n}


def _objective(metrics: dict, alpha: float, beta: float) -> float:
    return ((1.0 - alpha) * metrics["main_loss"] + alpha * metrics["mge"]
            + beta * metrics["aux_loss_mean"])


def fit(model: AmeModel, train_xy: tuple[np.ndarray, np.ndarray],
        val_xy: tuple[np.ndarray, np.ndarray] | None = None,
        epochs: int | None = None, patience: int | None = None) -> list[dict]:
    """Train with early stopping on the validation objective.

    Stops once the validation objective has not improved for `patience`
    consecutive epochs and restores the best parameters seen. Returns
    training-log rows (one train row and, when a validation split is
    given, one val row per epoch).
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    patience = cfg.patience if patience is None else patience
    opt = Optimizer(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)  # decoupled from init stream
    params = trainable_parameters(model)

    rows: list[dict] = []
    best_obj = np.inf
    best_state: list[np.ndarray] | None = None
    since_best = 0
    for epoch in range(1, epochs + 1):
        train_metrics = train_epoch(model, opt, train_xy[0], train_xy[1], rng)
        if not all(np.isfinite(v) for v in train_metrics.values()):
            raise FloatingPointError(f"training diverged at epoch {epoch}: {train_metrics}")
        rows.append({"epoch": epoch, "split": "train", **train_metrics, "alpha": cfg.alpha})
        if val_xy is None:
            continue
        val_metrics = evaluate(model, val_xy[0], val_xy[1])
        rows.append({"epoch": epoch, "split": "val", **val_metrics, "alpha": cfg.alpha})
        obj = _objective(val_metrics, cfg.alpha, cfg.aux_weight)
        if obj < best_obj:
            best_obj = obj
            best_state = [p.data.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data = saved
    return rows


def write_training_log(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in TRAINING_LOG_COLUMNS])
