"""Desk-scale laboratory for anchored teacher-student distillation.

A compact student and a generous teacher learn together while both are
pulled toward a frozen anchor of the student's own size; chaining the
trained student in as the next anchor gives a curriculum of
generations.  Everything runs on a small float32 autodiff engine, fully
deterministic in its seeds.
"""

from .tensor import Tensor, Tape, ShapeError, TapeError, active_tape, backward, no_grad
from .nn import (ArchitectureSpec, Network, init, forward, tempered_softmax,
                 parameter_count, freeze, clone, params_digest)
from .distill import (DistillWeights, LossBreakdown, DEFAULT_SCHEDULE,
                      apply_schedule, cross_entropy, kl_tempered,
                      student_loss, teacher_loss)
from .trainer import (DistillConfig, MetricsRecord, TrainReport, TripletState,
                      SGD, Wiring, WiringPlan, PLANS, CSV_COLUMNS, derive_seed,
                      sgd_step, triplet_step, train_generation, run_wiring,
                      bootstrap_generation0, run_curriculum, lr_at)
from .metrics import (SimilarityReport, CalibrationReport, BinStat,
                      VarianceBiasReport, top1_accuracy, mean_kl,
                      behavior_similarity, expected_calibration_error,
                      loss_variance, bias_term, population_variance)
from .data import (Dataset, DatasetSplit, SyntheticSpec, generate_synthetic,
                   class_means, bayes_posterior, batches, batch_indices,
                   load_idx, load_idx_labels, load_idx_split, load_csv)
from .checkpoint import save_checkpoint, load_checkpoint, checkpoint_generation

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
