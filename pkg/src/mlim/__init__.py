"""Masked language + image pre-training on synthetic image-caption scenes.

A self-contained, numpy-only implementation: shallow strided-CNN image
embedder, transformer encoder, shared-[MASK] embedding substitution with
per-micro-batch masking modes, masked-word + full-image reconstruction
losses, modality dropout fine-tuning on a pairwise task, cross-modality
probes, and an ablation harness.
"""

__version__ = "0.1.0"

from .autodiff import NumericsError, Tensor, no_grad
from .config import ConfigError, FullConfig, load_config
from .data import DataError, SceneSpec, Vocab, VOCAB
from .masking import MAMConfig, MaskMode, MdoConfig, MdoMode
from .model import ModelConfig
from .training import AdamState, CheckpointError, TrainingAborted

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FullConfig",
    "MAMConfig",
    "MaskMode",
    "MdoConfig",
    "MdoMode",
    "ModelConfig",
    "NumericsError",
    "SceneSpec",
    "Tensor",
    "TrainingAborted",
    "VOCAB",
    "Vocab",
    "load_config",
    "no_grad",
    "__version__",
]
