"""Multi-teacher, multi-level knowledge distillation for dialogue understanding.

Teachers are fine-tuned for intent detection (ID), slot filling (SF) and
domain classification (DC); a student is distilled from all of them with
logit, similarity, triplet-relation and probability losses.
"""
__version__ = "0.1.0"

from .corpus import (
    Corpus, Dialogue, GeneratorConfig, LabelCatalog, Turn, Vocabulary,
    build_vocabulary, encode_batch, generate_synthetic, load_corpus, merge_corpora, write_corpus,
)
from .distill import DistillHP, DistillResult, EarlyStopping, distill_student
from .encoder import Encoder, EncoderConfig, Task
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, MlkdError
from .losses import LossBreakdown, LossConfig, loss_kd, loss_rel, loss_sce, loss_sim, loss_tp, total_loss
from .metrics import MetricReport, accuracy, evaluate, token_micro_f1
from .teacher import TeacherEnsemble, TrainHP, finetune_teacher, train_probe_heads
from .triplets import generate_triplets

__all__ = [
    "Corpus", "Dialogue", "GeneratorConfig", "LabelCatalog", "Turn", "Vocabulary",
    "build_vocabulary", "encode_batch", "generate_synthetic", "load_corpus", "merge_corpora", "write_corpus",
    "DistillHP", "DistillResult", "EarlyStopping", "distill_student",
    "Encoder", "EncoderConfig", "Task",
    "CheckpointError", "ConfigError", "DataError", "DivergenceError", "MlkdError",
    "LossBreakdown", "LossConfig", "loss_kd", "loss_rel", "loss_sce", "loss_sim", "loss_tp", "total_loss",
    "MetricReport", "accuracy", "evaluate", "token_micro_f1",
    "TeacherEnsemble", "TrainHP", "finetune_teacher", "train_probe_heads",
    "generate_triplets",
]
