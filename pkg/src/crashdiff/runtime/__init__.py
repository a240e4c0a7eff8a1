"""Configuration, checkpoints, command line and experiment studies."""

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, config_digest
from .pipeline import (
    derive_seed,
    evaluation_frames,
    generate_episodes,
    load_denoiser,
    load_extractor,
    save_denoiser,
    save_extractor,
)
