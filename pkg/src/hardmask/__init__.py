"""Self-distilled masked acoustic modeling with easy-to-hard adaptive masking.

A teacher network (EMA copy of the student) predicts per-frame reconstruction
difficulty; mask blocks are seeded from the hardest frames with a linearly
growing selective share over training; the student reconstructs the teacher's
instance-normalized layer-averaged representations at masked frames while a
lightweight predictor learns the loss ranking through a pairwise objective.
"""

from .config import (
    EmaSchedule,
    FrontendConfig,
    HarnessConfig,
    MaskConfig,
    ModelConfig,
    RunConfig,
    SynthConfig,
    TrainConfig,
    desk_profile,
    load_run_config,
    paper_profile,
)
from .corpus import FrameBatch, Utterance, generate_synthetic, load_wav, make_batch, write_wav
from .ema import decay_at, ema_update
from .losses import (
    LossVector,
    PairTargets,
    auxiliary_loss,
    build_indicator,
    joint_loss,
    pairwise_sigmoid,
    per_frame_reconstruction,
)
from .masking import (
    MaskSet,
    apply_mask,
    build_adaptive_mask,
    expand_blocks,
    num_mask_blocks,
    sample_random_starts,
    schedule_split,
    select_hard_starts,
)
from .network import (
    EncoderOutput,
    ModelState,
    build_targets,
    clone_as_teacher,
    decode_reconstruction,
    encode,
    extract_features,
    gradient_check,
    init_model,
    predict_frame_losses,
)
from .trainer import PretrainResult, TrainRecord, lr_at, pretrain, train_step

__version__ = "0.1.0"
