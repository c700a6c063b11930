"""scikit-learn style wrapper around training and sliding-window inference."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .losses import confusion
from .network import ModelConfig, preset_rates
from .pipeline import NetworkModel, binarize, preprocess, sliding_infer
from .training import TrainConfig, train
from .volume import Volume


def _as_volume(x, kind: str = "intensity") -> Volume:
    if isinstance(x, Volume):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got an array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume contains NaN or infinite values")
    return Volume(arr.astype(np.float32), kind=kind)


def check_volumes(X, kind: str = "intensity") -> List[Volume]:
    """Coerce a volume, an array, or a sequence of either into a list of Volumes."""
    if isinstance(X, Volume) or (isinstance(X, np.ndarray) and X.ndim == 3):
        return [_as_volume(X, kind)]
    vols = [_as_volume(x, kind) for x in X]
    if not vols:
        raise ValueError("at least one volume is required")
    return vols


class SpineSegmenter(BaseEstimator):
    """Binary vertebral-body segmenter.

    ``X`` is a sequence of CT volumes in HU (``Volume`` objects or 3-D arrays
    at 1 mm spacing) and ``y`` the matching binary masks. ``predict`` returns
    one mask array per input on the preprocessed 1 mm grid.

    Parameters
    ----------
    preset : str
        Dilation preset name (``default``, ``abl-1``, ``abl-2``, ``abl-3``).
    encoder_widths, bottleneck_width, context_branch_width, patch_shape
        Architecture settings, see :class:`~spinectx.network.ModelConfig`.
    epochs, steps_per_epoch, batch_size, learning_rate, seed
        Training recipe.
    validation_fraction : float
        Share of the fitted cases held back for the plateau scheduler.
    threshold : float
        Probability cut used by ``predict``.
    threads : int
        Worker threads for sliding-window inference.
    """

    def __init__(self, preset: str = "default", encoder_widths=(4, 8, 16),
                 bottleneck_width: int = 32, context_branch_width: Optional[int] = 8,
                 patch_shape=(32, 64, 64), epochs: int = 10, steps_per_epoch: int = 20,
                 batch_size: int = 4, learning_rate: float = 1e-3, seed: int = 42,
                 validation_fraction: float = 0.2, threshold: float = 0.5, threads: int = 1):
        self.preset = preset
        self.encoder_widths = encoder_widths
        self.bottleneck_width = bottleneck_width
        self.context_branch_width = context_branch_width
        self.patch_shape = patch_shape
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.threads = threads

    def _model_config(self) -> ModelConfig:
        return ModelConfig(encoder_widths=tuple(self.encoder_widths),
                           bottleneck_width=self.bottleneck_width,
                           context_branch_width=self.context_branch_width,
                           dilation_rates=preset_rates(self.preset),
                           patch_shape=tuple(self.patch_shape))

    def fit(self, X, y):
        vols = check_volumes(X)
        masks = check_volumes(y, kind="binary-mask")
        if len(vols) != len(masks):
            raise ValueError(f"got {len(vols)} volumes but {len(masks)} masks")
        for i, (v, m) in enumerate(zip(vols, masks)):
            if v.dims != m.dims:
                raise ValueError(f"case {i}: volume {v.dims} and mask {m.dims} differ in shape")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        pairs = list(zip(vols, masks))
        n_val = int(round(len(pairs) * self.validation_fraction))
        if len(pairs) == 1 or n_val == 0:
            fit_pairs, val_pairs = pairs, pairs[-1:]
        else:
            n_val = min(n_val, len(pairs) - 1)
            fit_pairs, val_pairs = pairs[:-n_val], pairs[-n_val:]
        cfg = TrainConfig(self._model_config(), epochs=self.epochs,
                          steps_per_epoch=self.steps_per_epoch, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, seed=self.seed)
        result = train(cfg, fit_pairs, val_pairs)
        self.checkpoint_ = result.checkpoint
        self.history_ = result.log
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **kw) -> "SpineSegmenter":
        cfg = ckpt.config
        est = cls(encoder_widths=cfg.encoder_widths, bottleneck_width=cfg.bottleneck_width,
                  context_branch_width=cfg.context_branch_width,
                  patch_shape=cfg.patch_shape, **kw)
        est.checkpoint_ = ckpt
        est.history_ = []
        return est

    def predict_proba(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "checkpoint_")
        model = NetworkModel(self.checkpoint_.config, self.checkpoint_.params)
        return [sliding_infer(preprocess(v), model, threads=self.threads).data
                for v in check_volumes(X)]

    def predict(self, X) -> List[np.ndarray]:
        return [binarize(p, self.threshold) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Mean Dice over the given cases."""
        preds = self.predict(X)
        masks = check_volumes(y, kind="binary-mask")
        return float(np.mean([confusion(p, m.data > 0.5).dice for p, m in zip(preds, masks)]))
