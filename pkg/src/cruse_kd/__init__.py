"""CRUSE speech enhancement with fine-grained similarity-preserving distillation."""

from .analysis import CkaReport, cka_block_matrix, delta_sdr, evaluate, linear_cka, sdr, si_sdr
from .config import RunConfig, parse_config
from .data import build_manifest, integrated_lufs, mix_at_snr, next_batch, synth_corpus
from .dsp import istft, lms, stft
from .errors import (
    ConfigurationError,
    ContractError,
    CruseKDError,
    DataError,
    LengthError,
    ShapeError,
    UndefinedMetricError,
    UnmixableError,
)
from .losses import LossWeights, flow, flow_kd_loss, gram, kd_loss, local_kd_loss, psa_loss, response_kd_loss
from .model import (
    STUDENT,
    TEACHER,
    CruseModel,
    ModelConfig,
    build_model,
    count_mops_per_frame,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from .train import Phase, TrainingSchedule, distill_step, one_step, run_schedule, two_step

__version__ = "0.1.0"
