"""Preprocessing and Gaussian-weighted sliding-window reconstruction."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .volume import Volume

log = logging.getLogger(__name__)

HU_MIN, HU_MAX = -1000.0, 2000.0
ACC_EPS = 1e-8
WEIGHT_FLOOR = 1e-2  # keeps eps / min weight below 1e-6


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _resample_axis(a: np.ndarray, axis: int, n_out: int, spacing: float) -> np.ndarray:
    # output voxel i is centred at (i + 0.5) mm; read input at that position
    n_in = a.shape[axis]
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / spacing - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = (src - i0).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - t) + np.take(a, i1, axis=axis) * t


def resample_isotropic(vol: Volume, target: float = 1.0) -> Volume:
    """Trilinear resampling to ``target`` mm voxels (edge-clamped)."""
    data = vol.data
    dims = []
    for axis, (n, s) in enumerate(zip(data.shape, vol.spacing)):
        if s <= 0:
            raise ValueError(f"spacing must be positive, got {vol.spacing}")
        n_out = max(1, int(round(n * s / target)))
        dims.append(n_out)
        if n_out != n or s != target:
            data = _resample_axis(data, axis, n_out, s / target)
    return Volume(data.astype(np.float32), (target,) * 3, vol.origin, vol.kind, vol.header)


def normalize_hu(data: np.ndarray) -> np.ndarray:
    return ((np.clip(data, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)).astype(np.float32)


def preprocess(vol: Volume) -> Volume:
    """Resample to 1 mm isotropic, clip to [-1000, 2000] HU, rescale to [0, 1]."""
    if any(not s > 0 for s in vol.spacing):
        raise ValueError(f"spacing must be positive, got {vol.spacing}")
    iso = resample_isotropic(vol, 1.0)
    return Volume(normalize_hu(iso.data), iso.spacing, iso.origin, "intensity", iso.header)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

def gaussian_window(patch_shape: Sequence[int], sigma_scale: float = 1.0 / 8,
                    floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Separable Gaussian importance map with peak 1 and a relative floor."""
    if any(p < 1 for p in patch_shape):
        raise ValueError(f"patch dims must be positive, got {tuple(patch_shape)}")
    axes = []
    for n in patch_shape:
        i = np.arange(n, dtype=np.float64)
        sigma = n * sigma_scale
        axes.append(np.exp(-0.5 * ((i - (n - 1) / 2.0) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    return np.maximum(w, floor)


def axis_starts(length: int, patch: int) -> List[int]:
    """Window start offsets along one axis with half-patch stride.

    Lengths shorter than the patch are padded up to it, giving one window.
    The last start is clamped so the window ends at the boundary.
    """
    stride = max(1, patch // 2)
    padded = max(length, patch)
    starts = list(range(0, padded - patch + 1, stride))
    if starts[-1] != padded - patch:
        starts.append(padded - patch)
    return starts


@dataclass
class WindowPlan:
    volume_dims: Tuple[int, int, int]
    patch_shape: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    starts: List[Tuple[int, int, int]]
    weights: np.ndarray = field(repr=False)

    @property
    def padded_dims(self) -> Tuple[int, int, int]:
        return tuple(max(v, p) for v, p in zip(self.volume_dims, self.patch_shape))

    def __len__(self):
        return len(self.starts)


def plan_windows(volume_dims: Sequence[int], patch_shape: Sequence[int]) -> WindowPlan:
    volume_dims = tuple(int(v) for v in volume_dims)
    patch_shape = tuple(int(p) for p in patch_shape)
    per_axis = [axis_starts(v, p) for v, p in zip(volume_dims, patch_shape)]
    starts = list(itertools.product(*per_axis))
    stride = tuple(max(1, p // 2) for p in patch_shape)
    return WindowPlan(volume_dims, patch_shape, stride, starts, gaussian_window(patch_shape))


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

@dataclass
class AccumulatorPair:
    weighted_sum: np.ndarray
    weight_sum: np.ndarray
    eps: float = ACC_EPS

    @classmethod
    def zeros(cls, dims, eps: float = ACC_EPS) -> "AccumulatorPair":
        return cls(np.zeros(dims, np.float64), np.zeros(dims, np.float64), eps)

    def fold(self, start, patch: np.ndarray, weights: np.ndarray) -> None:
        sl = tuple(slice(s, s + n) for s, n in zip(start, patch.shape))
        self.weighted_sum[sl] += patch * weights
        self.weight_sum[sl] += weights

    def result(self) -> np.ndarray:
        return self.weighted_sum / (self.weight_sum + self.eps)


PatchFn = Callable[[np.ndarray], np.ndarray]


def reconstruct(data: np.ndarray, plan: WindowPlan, patch_fn: PatchFn,
                threads: int = 1) -> np.ndarray:
    """Fold per-patch maps into a volume with Gaussian weighting.

    ``patch_fn`` maps a ``(d, h, w)`` patch to a same-shaped map. Patches may
    be evaluated concurrently; they are folded in plan order, so the result
    does not depend on ``threads``.
    """
    if tuple(data.shape) != plan.volume_dims:
        raise ValueError(f"plan built for {plan.volume_dims}, volume is {data.shape}")
    padded = np.zeros(plan.padded_dims, dtype=np.float32)
    padded[tuple(slice(0, n) for n in data.shape)] = data
    acc = AccumulatorPair.zeros(plan.padded_dims)

    def run(start):
        sl = tuple(slice(s, s + p) for s, p in zip(start, plan.patch_shape))
        out = np.asarray(patch_fn(padded[sl]), dtype=np.float64)
        if out.shape != plan.patch_shape:
            raise ValueError(f"patch function returned {out.shape}, expected {plan.patch_shape}")
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for start, out in zip(plan.starts, pool.map(run, plan.starts)):
                acc.fold(start, out, plan.weights)
    else:
        for start in plan.starts:
            acc.fold(start, run(start), plan.weights)
    full = acc.result()
    return full[tuple(slice(0, n) for n in data.shape)]


class NetworkModel:
    """Adapter exposing a parameter store as a patch predictor."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @property
    def patch_shape(self) -> Tuple[int, int, int]:
        return tuple(self.config.patch_shape)

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        from .network import predict_logits
        return predict_logits(x, self.config, self.params)


def sliding_infer(vol: Volume, model, plan: Optional[WindowPlan] = None,
                  threads: int = 1) -> Volume:
    """Probability volume from overlapping patch predictions.

    ``model`` needs a ``patch_shape`` and ``predict_logits(x)`` taking
    ``(n, 1, d, h, w)`` arrays.
    """
    patch = tuple(model.patch_shape)
    if plan is None:
        plan = plan_windows(vol.dims, patch)
    if tuple(plan.patch_shape) != patch:
        raise ValueError(f"model patch shape {patch} does not match plan {plan.patch_shape}")
    log.debug("sliding inference: %d windows of %s over %s", len(plan), patch, vol.dims)

    def probs(p):
        logits = model.predict_logits(p[None, None])
        return ops.sigmoid(np.asarray(logits, dtype=np.float64))[0, 0]

    out = reconstruct(vol.data, plan, probs, threads)
    return Volume(np.clip(out, 0, 1).astype(np.float32), vol.spacing, vol.origin,
                  "probability", vol.header)


def binarize(p, threshold: float = 0.5):
    """Strict threshold ``p > threshold``; accepts a Volume or an array."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if isinstance(p, Volume):
        mask = (p.data > threshold).astype(np.float32)
        return Volume(mask, p.spacing, p.origin, "binary-mask", p.header)
    return (np.asarray(p) > threshold).astype(np.uint8)
