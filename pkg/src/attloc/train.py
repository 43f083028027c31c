"""Binary cross-entropy training with exact gradients and Adam."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .model import Mode, _forward, init_params, param_shapes, vjp
from .numerics import NumericalError, derive_rng
from .secant import loss_differences

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.adam_eps <= 0:
            raise ValueError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")


def _clamp(o):
    return np.clip(o, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(o_chunk, label):
    """Binary cross-entropy summed over tags (and over chunks for 2-D input)."""
    c = _clamp(np.asarray(o_chunk, dtype=np.float64))
    p = np.asarray(label, dtype=np.float64)
    return float(-(p * np.log(c) + (1.0 - p) * np.log(1.0 - c)).sum())


def _bce_grad(o_chunk, label):
    c = _clamp(o_chunk)
    inside = (o_chunk > PROB_CLAMP) & (o_chunk < 1.0 - PROB_CLAMP)
    return np.where(inside, (c - label) / (c * (1.0 - c)), 0.0)


def loss_and_grads(X, P, params, mode):
    """Summed loss and summed gradients over a batch of equal-length chunks."""
    P = np.asarray(P, dtype=np.float64)
    trace, cache = _forward(X, params, mode)
    loss = bce_loss(trace.o_chunk, P)
    grads = vjp(trace, cache, _bce_grad(trace.o_chunk, P), params)
    return loss, grads, trace


def backward(chunk, label, params, mode=Mode.ATT_LOC):
    """Loss and exact parameter gradients for a single (T, 40) chunk."""
    chunk = np.asarray(chunk, dtype=np.float64)
    loss, grads, _ = loss_and_grads(chunk[None], np.asarray(label)[None], params, mode)
    return loss, grads


def chunk_loss(chunk, label, params, mode=Mode.ATT_LOC):
    trace, _ = _forward(np.asarray(chunk, dtype=np.float64)[None], params, mode)
    return bce_loss(trace.o_chunk[0], label)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    worst_index: tuple
    per_tensor: dict = field(default_factory=dict)
    n_checked: int = 0


def rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(params, chunk, label, mode=Mode.ATT_LOC, eps=1e-5, per_tensor=200,
               seed=0, grads=None):
    """Compare analytic gradients against central differences.

    The two perturbed losses are differenced exactly (see ``secant``) rather
    than by subtracting rounded totals.  Tensors with at most ``per_tensor`` entries are checked in full; larger
    ones on a fixed random subsample of that many coordinates.  ``grads`` lets
    a caller supply the analytic side (used for fault injection).
    """
    if grads is None:
        _, grads = backward(chunk, label, params, mode)
    rng = derive_rng(seed, "grad_check")
    report = GradCheckReport(0.0, "", ())
    for name, shape in param_shapes().items():
        size = int(np.prod(shape))
        flat_idx = np.arange(size) if size <= per_tensor else \
            np.sort(rng.choice(size, per_tensor, replace=False))
        fd = loss_differences(params, chunk, label, mode, name, flat_idx, eps) / (2 * eps)
        analytic = grads[name].reshape(-1)[flat_idx]
        errs = np.abs(analytic - fd) / np.maximum(1e-8, np.abs(analytic) + np.abs(fd))
        worst = int(np.argmax(errs))
        report.per_tensor[name] = float(errs[worst])
        if errs[worst] > report.max_rel_err or not report.worst_tensor:
            report.max_rel_err = float(errs[worst])
            report.worst_tensor = name
            report.worst_index = tuple(int(v) for v in np.unravel_index(flat_idx[worst], shape))
        report.n_checked += len(flat_idx)
    return report


# ---------------------------------------------------------------- Adam


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def adam_step(params, grads, state, config):
    """In-place Adam update of ``params`` with bias-corrected moments."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


def clip_by_norm(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------- loop


def _groups_by_length(items):
    groups = {}
    for i, (frames, _) in enumerate(items):
        groups.setdefault(frames.shape[0], []).append(i)
    return [groups[t] for t in sorted(groups)]


def predict(dataset, params, mode, batch_size=64):
    """Chunk-level posteriors (n, 7) and summed loss for a labelled dataset."""
    out = np.empty((len(dataset), len(dataset[0][1]) if dataset else 0))
    total = 0.0
    for idx in _groups_by_length(dataset):
        for k in range(0, len(idx), batch_size):
            sel = idx[k:k + batch_size]
            X = np.stack([dataset[i][0] for i in sel])
            P = np.stack([dataset[i][1] for i in sel]).astype(np.float64)
            trace, _ = _forward(X, params, mode)
            out[sel] = trace.o_chunk
            total += bce_loss(trace.o_chunk, P)
    return out, total


def evaluate(dataset, params, mode):
    """Mean loss, per-tag EERs and their average on a labelled dataset."""
    scores, total = predict(dataset, params, mode)
    truth = np.stack([lab for _, lab in dataset])
    eers = [metrics.eer(scores[:, e], truth[:, e]) for e in range(truth.shape[1])]
    avg = metrics.eer_average(eers) if any(e is not None for e in eers) else None
    return total / len(dataset), eers, avg


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_eer: list
    val_eer_avg: float | None


def train(train_set, val_set, config, mode=Mode.ATT_LOC, params=None, on_epoch=None):
    """Mini-batch Adam training; returns (best-validation-EER params, epoch logs).

    ``train_set``/``val_set`` are lists of (frames (T, 40), label (7,)) pairs.
    Row 0 of the log is the untrained model; its train loss is a full pass,
    later rows report the mean loss over that epoch's mini-batches.
    ``on_epoch(entry, params)`` is called after every epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    if params is None:
        params = init_params(derive_rng(config.seed, "init"))
    params = {k: v.copy() for k, v in params.items()}
    order_rng = derive_rng(config.seed, "shuffle")

    val_loss, val_eers, val_avg = evaluate(val_set, params, mode)
    _, train_total = predict(train_set, params, mode)
    history = [EpochLog(0, train_total / len(train_set), val_loss, val_eers, val_avg)]
    best = {k: v.copy() for k, v in params.items()}
    best_eer = val_avg if val_avg is not None else np.inf

    state = AdamState(params)
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            try:
                loss, grads = batch_loss_and_grads(batch, params, mode)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} batch {b}: {exc}") from None
            if not np.isfinite(loss):
                raise NumericalError(f"epoch {epoch} batch {b}: non-finite loss")
            epoch_loss += loss
            scale = 1.0 / len(batch)
            for g in grads.values():
                g *= scale
            if config.clip_norm is not None:
                clip_by_norm(grads, config.clip_norm)
            adam_step(params, grads, state, config)
        val_loss, val_eers, val_avg = evaluate(val_set, params, mode)
        history.append(EpochLog(epoch, epoch_loss / n, val_loss, val_eers, val_avg))
        log.info("epoch %d train_loss %.4f val_loss %.4f val_eer %s",
                 epoch, epoch_loss / n, val_loss, "nan" if val_avg is None else f"{val_avg:.4f}")
        if on_epoch is not None:
            on_epoch(history[-1], params)
        if val_avg is not None and val_avg < best_eer:
            best_eer = val_avg
            best = {k: v.copy() for k, v in params.items()}
    return best, history


def batch_loss_and_grads(batch, params, mode):
    """Summed loss and gradients over chunks of possibly different lengths.

    Equal-length chunks are stacked and run together; groups are visited in a
    fixed order so the result does not depend on anything but the batch.
    """
    total = 0.0
    acc = None
    for idx in _groups_by_length(batch):
        X = np.stack([batch[i][0] for i in idx])
        P = np.stack([batch[i][1] for i in idx])
        loss, grads, _ = loss_and_grads(X, P, params, mode)
        total += loss
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] += grads[k]
    return total, acc


def write_log_csv(history, path, tags):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss"] + [f"val_eer_{t}" for t in tags] + ["val_eer_avg"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss)]
                       + ["nan" if e is None else repr(e) for e in h.val_eer]
                       + ["nan" if h.val_eer_avg is None else repr(h.val_eer_avg)])
