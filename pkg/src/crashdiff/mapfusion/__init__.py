"""Conditional diffusion model for next-frame segment maps."""

from .networks import (
    ConfigMismatch,
    ControlBranch,
    DenoiserConfig,
    DenoiserModel,
    EmbeddingDecoder,
    SequentialEmbedder,
)
from .sampling import SampleSet, SamplingError, predict_noise, sample, sample_chains, sample_windows
from .schedule import (
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    default_beta_range,
    forward_sample,
    forward_step,
    from_model_range,
    noise_from_velocity,
    reverse_step,
    schedule_from_betas,
    to_model_range,
)
from .training import (
    Batch,
    TrainConfig,
    TrainingError,
    TrainLog,
    decode_embedding,
    diffusion_loss,
    stack_windows,
    train_base,
    train_control,
    train_embedding_decoder,
)


def encode_sequence_embedding(model: DenoiserModel, context):
    """Sequence tokens (1 x N x token_dim) for one MapSequence or a B x f x C x H x W tensor."""
    import torch

    from ..rsm_codec import MapSequence

    if isinstance(context, MapSequence):
        context = torch.from_numpy(context.stack())[None]
    return model.embedder(context)
