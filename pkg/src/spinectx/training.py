"""Optimiser, plateau scheduler, patch sampling, training and evaluation."""
from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .losses import composite_loss, confusion, mean_row, metrics_row, pooled_row
from .network import ModelConfig, ParamStore, forward, init_params
from .phantom import PhantomSpec, generate_phantom
from .pipeline import (NetworkModel, binarize, plan_windows, preprocess,
                       resample_isotropic, sliding_infer)
from .tensor import Tape, Tensor5, sigmoid
from .volume import Volume

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    t: int = 0

    def to_dict(self) -> dict:
        return {"lr": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimState":
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], OrderedDict(d["m"]),
                   OrderedDict(d["v"]), d["t"])


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
              state: OptimState) -> OptimState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if not state.learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {state.learning_rate}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# plateau scheduler
# ---------------------------------------------------------------------------

@dataclass
class SchedulerState:
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0
    patience: int = 5
    factor: float = 0.1
    min_improvement: float = 1e-4


def scheduler_step(val_loss: float, sched: SchedulerState, optim: OptimState) -> float:
    """Reduce-on-plateau: multiply the rate by ``factor`` once the loss has
    failed to improve (relatively, by ``min_improvement``) for more than
    ``patience`` consecutive reports."""
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss is not finite ({val_loss}); halting")
    if val_loss < sched.best_val_loss * (1.0 - sched.min_improvement):
        sched.best_val_loss = val_loss
        sched.epochs_since_improve = 0
    else:
        sched.epochs_since_improve += 1
    if sched.epochs_since_improve > sched.patience:
        optim.learning_rate *= sched.factor
        sched.epochs_since_improve = 0
        log.info("plateau: learning rate reduced to %g", optim.learning_rate)
    return optim.learning_rate


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

class PatchSampler:
    """Random crops, a fraction of which are centred on a foreground voxel."""

    def __init__(self, cases: Sequence[Tuple[np.ndarray, np.ndarray]], patch_shape,
                 rng: np.random.Generator, foreground_fraction: float = 0.5):
        self.patch_shape = tuple(patch_shape)
        self.rng = rng
        self.foreground_fraction = foreground_fraction
        self.cases = []
        for image, mask in cases:
            image, mask = self._pad(image), self._pad(mask)
            self.cases.append((image, mask, np.argwhere(mask > 0)))

    def _pad(self, a):
        target = [max(s, p) for s, p in zip(a.shape, self.patch_shape)]
        if list(a.shape) == target:
            return a
        out = np.zeros(target, dtype=a.dtype)
        out[tuple(slice(0, s) for s in a.shape)] = a
        return out

    def draw(self) -> Tuple[np.ndarray, np.ndarray]:
        image, mask, fg = self.cases[self.rng.integers(len(self.cases))]
        limits = [s - p for s, p in zip(image.shape, self.patch_shape)]
        if len(fg) and self.rng.random() < self.foreground_fraction:
            voxel = fg[self.rng.integers(len(fg))]
            start = [int(np.clip(v - self.rng.integers(p), 0, lim))
                     for v, p, lim in zip(voxel, self.patch_shape, limits)]
        else:
            start = [int(self.rng.integers(lim + 1)) for lim in limits]
        sl = tuple(slice(s, s + p) for s, p in zip(start, self.patch_shape))
        return image[sl], mask[sl]

    def batch(self, size: int) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [self.draw() for _ in range(size)]
        x = np.stack([p[0] for p in pairs])[:, None].astype(np.float32)
        y = np.stack([p[1] for p in pairs])[:, None].astype(np.float32)
        return x, y


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: ModelConfig
    epochs: int = 10
    steps_per_epoch: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 42
    patience: int = 5
    factor: float = 0.1
    foreground_fraction: float = 0.5


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[dict]
    params: ParamStore
    optimizer: OptimState
    step_losses: List[float] = field(default_factory=list)


LOG_FIELDS = ["epoch", "train_loss", "val_loss", "lr", "seconds"]


def loss_and_grad(params: ParamStore, config: ModelConfig, x: np.ndarray, y: np.ndarray,
                  mode: str = "train") -> float:
    """Composite loss of one batch; parameter gradients are left in ``.grad``."""
    tape = Tape()
    logits, _ = forward(Tensor5(x), config, params, mode, tape)
    probs = sigmoid(logits, tape)
    loss, grad_p = composite_loss(probs.data, y)
    tape.backward(probs, grad_p.reshape(probs.shape).astype(probs.dtype))
    return loss


def batch_loss(params: ParamStore, config: ModelConfig, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(Tensor5(x), config, params, "infer")
    return composite_loss(sigmoid(logits).data, y)[0]


def _prepare_case(intensity: Volume, mask: Volume) -> Tuple[np.ndarray, np.ndarray]:
    image = preprocess(intensity).data
    truth = mask.data
    if truth.shape != image.shape:
        truth = resample_isotropic(mask).data
    return image, (truth > 0.5).astype(np.float32)


def _validation_patches(cases, patch_shape):
    xs, ys = [], []
    for image, mask in cases:
        plan = plan_windows(image.shape, patch_shape)
        padded = [np.zeros(plan.padded_dims, np.float32) for _ in range(2)]
        for dst, src in zip(padded, (image, mask)):
            dst[tuple(slice(0, s) for s in src.shape)] = src
        for start in plan.starts:
            sl = tuple(slice(s, s + p) for s, p in zip(start, patch_shape))
            xs.append(padded[0][sl])
            ys.append(padded[1][sl])
    return np.stack(xs)[:, None], np.stack(ys)[:, None]


def train(cfg: TrainConfig, train_cases: Sequence[Tuple[Volume, Volume]],
          val_cases: Sequence[Tuple[Volume, Volume]],
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Desk-scale training loop with plateau scheduling and best-epoch selection."""
    config = cfg.model
    if any(p % 8 for p in config.patch_shape):
        raise ValueError(f"patch dims must be divisible by 8, got {config.patch_shape}")
    params = init_params(config, cfg.seed)
    optim = OptimState(learning_rate=cfg.learning_rate)
    sched = SchedulerState(patience=cfg.patience, factor=cfg.factor)
    rng = np.random.default_rng(cfg.seed + 1)
    sampler = PatchSampler([_prepare_case(*c) for c in train_cases], config.patch_shape, rng,
                           cfg.foreground_fraction)
    val_x, val_y = _validation_patches([_prepare_case(*c) for c in val_cases],
                                       config.patch_shape)
    best = None
    rows = []
    step_losses = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            step += 1
            x, y = sampler.batch(cfg.batch_size)
            params.zero_grad()
            loss = loss_and_grad(params, config, x, y)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at step {step} (lr={optim.learning_rate:g})")
            losses.append(loss)
            step_losses.append(loss)
            adam_step({k: t.data for k, t in params.params.items()},
                      {k: t.grad for k, t in params.params.items()}, optim)
        val = float(np.mean([batch_loss(params, config, val_x[i:i + 1], val_y[i:i + 1])
                             for i in range(len(val_x))]))
        lr_used = optim.learning_rate
        if best is None or val < best[0]:
            best = (val, epoch, params.copy())
        scheduler_step(val, sched, optim)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
               "lr": lr_used, "seconds": time.perf_counter() - t0}
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f lr %g (%.1fs)", epoch, row["train_loss"], val,
                 lr_used, row["seconds"])
        if on_epoch is not None:
            on_epoch(row)
    best_val, best_epoch, best_params = best
    meta = {"epoch": best_epoch, "best_val_loss": best_val, "epochs": cfg.epochs,
            "steps_per_epoch": cfg.steps_per_epoch, "batch_size": cfg.batch_size,
            "seed": cfg.seed}
    ckpt = Checkpoint(config, best_params, meta)
    return TrainResult(ckpt, rows, params, optim, step_losses)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(checkpoint: Optional[Checkpoint], cases, threshold: float = 0.5,
             threads: int = 1, oracle: bool = False):
    """Per-case metrics plus mean and pooled rows.

    ``cases`` yields ``(case_id, intensity, truth)``. With ``oracle=True`` the
    truth mask stands in for the predicted probabilities, which checks the
    harness itself. Returns ``(rows, failures)``; a case that raises is
    reported in ``failures`` and skipped.
    """
    rows, failures = [], []
    model = None if oracle else NetworkModel(checkpoint.config, checkpoint.params)
    for case_id, intensity, truth in cases:
        try:
            if callable(intensity):
                intensity, truth = intensity(), truth()
            image = preprocess(intensity)
            target = truth.data if truth.data.shape == image.dims else resample_isotropic(truth).data
            target = target > 0.5
            if oracle:
                probs = Volume(target.astype(np.float32), image.spacing, kind="probability")
            else:
                probs = sliding_infer(image, model, threads=threads)
            pred = binarize(probs, threshold)
            rows.append(metrics_row(case_id, confusion(pred.data, target)))
        except Exception as exc:  # noqa: BLE001 - reported per case
            log.error("case %s failed: %s", case_id, exc)
            failures.append((case_id, str(exc)))
    summary = [mean_row(rows), pooled_row(rows)] if rows else []
    return rows + summary, failures


def phantom_cases(base: PhantomSpec, seeds: Sequence[int]):
    for s in seeds:
        vol, mask = generate_phantom(base.with_seed(int(s)))
        yield f"phantom-{s}", vol, mask
