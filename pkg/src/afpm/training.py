"""Loss, analytic gradients, AdamW, one-cycle schedule, balanced sampling, training loops.

The optimizer is decoupled-decay AdamW with the decay applied to weight
matrices only (biases, norm parameters, class token, and positional
embeddings are exempt). The learning-rate schedule ramps cosine from the
initial rate to the peak over the first 30% of steps, then decays cosine to
1/100 of the initial rate. Training is deterministic for a fixed seed when
run single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .model import (
    Model, backward_cached, decayed_param, forward_cached,
)

WARMUP_FRACTION = 0.3
FINAL_LR_DIVISOR = 100.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    lr_init: float = 2.5e-4
    lr_max: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    balanced_sampling: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.lr_init <= self.lr_max:
            raise ConfigError("need 0 < lr_init <= lr_max")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Stabilized softmax cross-entropy for one logit vector.

    Returns the loss and its gradient w.r.t. the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise DataError(f"label {label} out of range for {logits.shape[-1]} classes")
    z = logits - logits.max()
    lse = math.log(np.exp(z).sum())
    loss = lse - z[label]
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return float(loss), grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray
                        ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and d(mean loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    n = logits.shape[0]
    picked = z[np.arange(n), labels]
    loss = float(np.mean(np.log(denom[:, 0]) - picked))
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(x_batch: np.ndarray, labels: np.ndarray, model: Model
             ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and exact analytic gradients for every parameter tensor."""
    labels = np.asarray(labels)
    logits, cache = forward_cached(x_batch, model, want_cache=True)
    loss, dlogits = batch_cross_entropy(logits.astype(np.float64), labels)
    grads = backward_cached(dlogits.astype(model.dtype), model, cache)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name!r}")
    return loss, grads


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)

    def as_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(m=dict(d["m"]), v=dict(d["v"]), step=int(d["step"]))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update with bias correction and decoupled decay."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
        if cfg.weight_decay and decayed_param(name, p):
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine ramp lr_init -> lr_max over the first 30% of steps, then cosine
    decay to lr_init/100 at the final step."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} out of range for {total_steps} total steps")
    if total_steps == 1:
        return cfg.lr_init
    warm = int(round(WARMUP_FRACTION * total_steps))
    warm = min(max(warm, 1), total_steps - 1)
    if step <= warm:
        t = step / warm
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * 0.5 * (1 - math.cos(math.pi * t))
    lr_final = cfg.lr_init / FINAL_LR_DIVISOR
    t = (step - warm) / (total_steps - 1 - warm)
    return lr_final + (cfg.lr_max - lr_final) * 0.5 * (1 + math.cos(math.pi * t))


def balanced_batches(labels: np.ndarray, n_classes: int, batch_size: int,
                     seed: int, n_batches: int):
    """Yield index batches with equal per-class expected counts.

    Each slot draws its class uniformly, then an instance of that class
    uniformly with replacement, so minority classes are oversampled.
    Deterministic for a fixed seed.
    """
    labels = np.asarray(labels)
    by_class = [np.flatnonzero(labels == c) for c in range(n_classes)]
    for c, idx in enumerate(by_class):
        if idx.size == 0:
            raise DataError(f"class {c} has no trials; balanced sampling impossible")
    rng = np.random.default_rng(seed)
    for _ in range(n_batches):
        classes = rng.integers(0, n_classes, size=batch_size)
        picks = np.empty(batch_size, dtype=np.int64)
        for c in range(n_classes):
            slots = np.flatnonzero(classes == c)
            if slots.size:
                picks[slots] = by_class[c][rng.integers(0, by_class[c].size,
                                                        size=slots.size)]
        yield picks


def shuffled_batches(n: int, batch_size: int, seed: int, epochs: int):
    """Plain per-epoch shuffling into batches (final partial batch kept)."""
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


@dataclass
class TrainResult:
    model: Model
    opt_state: OptimizerState
    history: list[dict] = field(default_factory=list)
    diverged: bool = False

    def history_csv(self) -> str:
        lines = ["step,epoch,lr,loss"]
        for row in self.history:
            lines.append(f"{row['step']},{row['epoch']},{row['lr']:.10g},{row['loss']:.10g}")
        return "\n".join(lines) + "\n"


def train(x: np.ndarray, labels: np.ndarray, model: Model, cfg: TrainConfig,
          opt_state: OptimizerState | None = None,
          log=None) -> TrainResult:
    """Train on pooled template inputs [N x M x T'] with integer labels.

    One epoch is ceil(N / batch_size) steps. On a non-finite loss the loop
    aborts and returns the parameters from before the failing step, flagged
    as diverged.
    """
    x = np.asarray(x)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or x.shape[0] != labels.shape[0]:
        raise DataError(f"bad training arrays: x {x.shape}, labels {labels.shape}")
    n = x.shape[0]
    if n == 0:
        raise DataError("empty training set")
    n_classes = model.cfg.transformer.n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError("label out of range for model head")

    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = opt_state if opt_state is not None else OptimizerState.zeros_like(model.params)
    result = TrainResult(model=model, opt_state=state)
    if total_steps == 0:
        return result

    if cfg.balanced_sampling:
        batches = balanced_batches(labels, n_classes, cfg.batch_size,
                                   cfg.seed, total_steps)
    else:
        batches = shuffled_batches(n, cfg.batch_size, cfg.seed, cfg.epochs)

    prev_params = None
    for step, idx in enumerate(batches):
        lr = onecycle_lr(step, total_steps, cfg)
        prev_params = {k: v.copy() for k, v in model.params.items()}
        loss, grads = _loss_and_grads_guarded(x[idx], labels[idx], model)
        if loss is None:
            model.params.update(prev_params)
            result.diverged = True
            break
        adamw_step(model.params, grads, state, lr, cfg)
        epoch = step // steps_per_epoch
        result.history.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
        if log is not None and (step % steps_per_epoch == steps_per_epoch - 1):
            log(f"epoch {epoch + 1}/{cfg.epochs} step {step + 1}/{total_steps} "
                f"lr {lr:.3e} loss {loss:.4f}")
    return result


def _loss_and_grads_guarded(xb, yb, model):
    # overflow here is handled by the divergence guard, not surfaced as noise
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = backward(xb, yb, model)
    except NumericError:
        return None, None
    if not math.isfinite(loss):
        return None, None
    return loss, grads


def chronological_split(n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """First ``fraction`` of indices for tuning, the rest for evaluation."""
    if not 0 < fraction < 1:
        raise ConfigError("fraction must lie strictly between 0 and 1")
    n_tune = int(round(n * fraction))
    if n_tune < 1 or n - n_tune < 1:
        raise DataError(f"{n} trials cannot be split at fraction {fraction}")
    idx = np.arange(n)
    return idx[:n_tune], idx[n_tune:]


def finetune(model: Model, x: np.ndarray, labels: np.ndarray, fraction: float,
             cfg: TrainConfig, opt_state: OptimizerState | None = None
             ) -> tuple[TrainResult, np.ndarray, np.ndarray]:
    """Subject-specific fine-tuning: tune on the chronologically first
    ``fraction`` of trials, return the held-out evaluation indices.

    Continues AdamW from ``opt_state`` when provided (e.g. restored from a
    checkpoint); otherwise starts fresh moments on the pretrained weights.
    """
    tune_idx, eval_idx = chronological_split(x.shape[0], fraction)
    result = train(x[tune_idx], labels[tune_idx], model, cfg, opt_state=opt_state)
    return result, tune_idx, eval_idx
