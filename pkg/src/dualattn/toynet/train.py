"""Training loop, Adam, and attribution extraction."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..diffkit import Tensor, parameter
from ..errors import RejectedInput, TrainingDiverged
from .model import (
    COARSE_SIDE,
    FINE_SIDE,
    INPUT_SIDE,
    TrainConfig,
    forward,
    init_params,
    loss,
    marginal_residual_batch,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "ce", "penalty", "residual", "train_accuracy", "eval_accuracy", "eval_residual")


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    config: TrainConfig
    log: list[dict] = field(default_factory=list)


def _as_params(arrays: dict) -> dict[str, Tensor]:
    return {k: parameter(np.array(v, dtype=np.float64), k) for k, v in arrays.items()}


def predict(params, config: TrainConfig, images, batch_size: int = 64):
    """Logits and attention maps (numpy) for a stack of images, in batches."""
    params = params if all(isinstance(v, Tensor) for v in params.values()) else _as_params(params)
    logits, fine, coarse, lams = [], [], [], []
    for start in range(0, len(images), batch_size):
        out = forward(params, config, np.asarray(images[start:start + batch_size], dtype=np.float64))
        logits.append(out.logits.data)
        if out.tau_fine is not None:
            fine.append(out.tau_fine.data)
        if out.tau_coarse is not None:
            coarse.append(out.tau_coarse.data)
        if out.lam is not None:
            lams.append(out.lam.data)
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return cat(logits), cat(fine), cat(coarse), cat(lams)


def evaluate(params, config, images, labels) -> dict:
    logits, fine, coarse, _ = predict(params, config, images)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")
    res = float(marginal_residual_batch(fine, coarse).mean()) if fine is not None and coarse is not None else None
    return {"accuracy": acc, "residual": res}


def train(dataset, config: TrainConfig, eval_dataset=None, on_epoch=None, init=None) -> TrainResult:
    """Train on ``dataset`` (images, labels); masks are never read.

    ``init`` optionally maps parameter names to starting values (e.g. a trained
    baseline's backbone and head), overriding the seeded initialization for
    those names; gate and witness parameters absent from it keep their seeded
    values. Epoch 0 in the log is the starting model. Deterministic given
    ``config.seed`` and ``init``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise RejectedInput("empty training set")
    params = init_params(config)
    for name, value in (init or {}).items():
        if name not in params:
            raise RejectedInput(f"initial value for unknown parameter {name!r}")
        value = np.asarray(getattr(value, "data", value), dtype=np.float64)
        if value.shape != params[name].shape:
            raise RejectedInput(f"initial value for {name!r} has shape {value.shape}, expected {params[name].shape}")
        params[name].data = value.copy()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(params, config)

    def record(epoch, ce, pen, res, train_acc):
        row = {"epoch": epoch, "ce": ce, "penalty": pen, "residual": res, "train_accuracy": train_acc,
               "eval_accuracy": None, "eval_residual": None}
        if eval_dataset is not None and len(eval_dataset.labels):
            ev = evaluate(params, config, eval_dataset.images, np.asarray(eval_dataset.labels))
            row["eval_accuracy"], row["eval_residual"] = ev["accuracy"], ev["residual"]
        result.log.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d ce=%s penalty=%s residual=%s", epoch, ce, pen, res)

    init = evaluate(params, config, images, labels)
    record(0, None, None, init["residual"], init["accuracy"])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        ce_sum = pen_sum = res_sum = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            out = forward(params, config, images[idx])
            total, ce, pen = loss(out, labels[idx], config)
            if not np.isfinite(total.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                raise TrainingDiverged(f"non-finite parameters after the update at epoch {epoch}, batch starting {start}")
            ce_sum += ce.item() * len(idx)
            if pen is not None:
                pen_sum += pen.item() * len(idx)
            if out.tau_fine is not None and out.tau_coarse is not None:
                res_sum += marginal_residual_batch(out.tau_fine.data, out.tau_coarse.data).sum()
            correct += int(np.sum(np.argmax(out.logits.data, axis=1) == labels[idx]))
        n = len(order)
        has_both = "fine" in config.sites and "coarse" in config.sites
        record(epoch, ce_sum / n, pen_sum / n if config.penalized else None, res_sum / n if has_both else None, correct / n)
    return result


def write_metrics(rows, path) -> None:
    """CSV with one row per epoch; absent quantities are left empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else (f"{row[c]:.17g}" if isinstance(row[c], float) else row[c]) for c in METRIC_COLUMNS])


def upsample_attention(tau, side: int | None = None) -> np.ndarray:
    """Replicate each cell of a (P,) or (N, P) attention map over its input block, renormalized."""
    tau = np.asarray(tau, dtype=np.float64)
    batch = tau.ndim == 2
    t = tau if batch else tau[None]
    side = side or int(round(np.sqrt(t.shape[1])))
    if side * side != t.shape[1] or INPUT_SIDE % side:
        raise RejectedInput(f"attention with {t.shape[1]} cells cannot tile a {INPUT_SIDE}x{INPUT_SIDE} input")
    r = INPUT_SIDE // side
    up = np.repeat(np.repeat(t.reshape(-1, side, side), r, axis=1), r, axis=2)
    up /= up.sum(axis=(1, 2), keepdims=True)
    return up if batch else up[0]


SITE_SIDES = {"fine": FINE_SIDE, "coarse": COARSE_SIDE}


def attribution(params, config: TrainConfig, images, site: str) -> np.ndarray:
    """Input-resolution attribution maps (N, 64, 64) from the attention at ``site``."""
    if site not in SITE_SIDES:
        raise RejectedInput(f"unknown site {site!r}")
    if site not in config.sites:
        raise RejectedInput(f"variant {config.variant!r} has no {site} attention unit")
    _, fine, coarse, _ = predict(params, config, images)
    return upsample_attention(fine if site == "fine" else coarse, SITE_SIDES[site])
