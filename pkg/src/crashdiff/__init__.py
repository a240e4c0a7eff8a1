"""Trajectory-free crash detection with a sequence-conditioned diffusion model.

Submodules: ``rsm_codec`` (maps), ``scenario_gen`` (synthetic traffic),
``tensor_engine`` (kernels, Adam, gradient checks), ``mapfusion`` (the
diffusion model), ``crash_detector`` (Crash Index and detection) and
``runtime`` (config, checkpoints, CLI, studies).
"""

__version__ = "0.1.0"
