"""EM training of score-based diffusion priors from corrupted observations."""

from ._kernels import BACKEND
from .em import EMConfig, EMProblem, EMState, gaussian_em, load_checkpoint, phase_transition_check, run_em, save_checkpoint
from .forward_ops import BlurOp, IdentityOp, MaskOp, corrupt, data_loss, make_blur_op, make_mask_op
from .sampler import SamplerConfig, sample_posterior, sample_unconditional, select_lambda, tweedie_x0
from .schedule import NoiseSchedule, linear_beta_schedule
from .score_models import GaussianPrior, GaussianScore, GmmPrior, GmmScore, GridScore, NeuralScore
from .trainer import TrainConfig, dsm_loss, init_train_on_clean, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BlurOp",
    "EMConfig",
    "EMProblem",
    "EMState",
    "GaussianPrior",
    "GaussianScore",
    "GmmPrior",
    "GmmScore",
    "GridScore",
    "IdentityOp",
    "MaskOp",
    "NeuralScore",
    "NoiseSchedule",
    "SamplerConfig",
    "TrainConfig",
    "corrupt",
    "data_loss",
    "dsm_loss",
    "gaussian_em",
    "init_train_on_clean",
    "linear_beta_schedule",
    "load_checkpoint",
    "make_blur_op",
    "make_mask_op",
    "phase_transition_check",
    "run_em",
    "sample_posterior",
    "sample_unconditional",
    "save_checkpoint",
    "select_lambda",
    "train",
    "tweedie_x0",
]
