"""Patch-level face anti-spoofing toolkit on a small numpy autodiff core."""

from .destruction import GridSpec
from .model import DCN, ModelConfig
from .synth import DatasetManifest, SplitSpec, desk_manifest, generate_sample
from .train import TrainConfig, load_config, train

__version__ = "0.1.0"
