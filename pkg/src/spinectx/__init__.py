"""Vertebral-body segmentation with a dilated-context 3-D U-Net, in numpy."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .estimator import SpineSegmenter
from .losses import bce_loss, composite_loss, confusion, dice_loss, metrics_from_counts
from .network import (DILATION_PRESETS, ModelConfig, ParamStore, forward, grad_cam,
                      init_params, param_count)
from .phantom import PhantomSpec, generate_phantom
from .pipeline import binarize, plan_windows, preprocess, sliding_infer
from .training import OptimState, SchedulerState, TrainConfig, adam_step, evaluate, scheduler_step, train
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"
