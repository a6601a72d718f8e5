"""Staged training, inference, configuration, checkpoints and the CLI."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, stage_path
from .config import ConfigError, ExperimentConfig, ResolutionProfile, TrainSchedule, load_config, PROFILES
from .inference import GeneratorBundle, UntrainedBundleError, build_bundle, load_bundle, multi_garment, tryon_once
from .train import (ABLATION_MODES, AblationResult, MissingPrerequisiteError, NumericalError, StageResult,
                    ablate, train_all, train_stage)
