"""Action-driven stochastic motion prediction on a small numpy autodiff core.

A diffusion model synthesizes a target clip for a requested action, and an
in-betweening CVAE bridges the observed history to it.
"""
from .data import ACTIONS, ActionLabel, MotionSequence, Pose, synth_generate
from .diffusion import GeneratorNet, MDMConfig, make_schedule
from .pipeline import Models, PredictionRequest, long_term_rollout, predict_two_stage
from .vae import AinBVAE, VAEConfig

__all__ = ["ACTIONS", "ActionLabel", "MotionSequence", "Pose", "synth_generate", "GeneratorNet", "MDMConfig",
           "make_schedule", "Models", "PredictionRequest", "long_term_rollout", "predict_two_stage",
           "AinBVAE", "VAEConfig"]
