"""Single-shot channel pruning toolkit.

Train a small convolutional classifier with cardinality-constrained ADMM so
filter-level sparsity emerges during training, physically remove the weakest
filters in one shot, and fine-tune the surviving sub-network. Criterion
baselines (kernel-l1, mean activation, first-order saliency, random), an
iterative prune/fine-tune pipeline, structural surgery with its
zero-filter-equivalence oracle, and reproducible run records are included.

See the demos/ directory of the source tree for narrative walkthroughs and
``admmprune --help`` for the experiment CLI.
"""

from .adapter import (FilterTensor, LayerHandle, evaluate, get_weights,
                      list_conv_layers, load_checkpoint, save_checkpoint,
                      set_weights, train_step)
from .admm import (AdmmState, LayerSparsitySpec, admm_regularizer, converged,
                   filter_norms, init_state, make_layer_spec,
                   project_cardinality, round_half_up, step_u, step_z)
from .config import RunConfig, build_run_config, load_config
from .criteria import (PruneDecision, make_decision, score_filters,
                       score_mean_activation, score_min_weight, score_random,
                       score_taylor, select_prune_set)
from .data import DatasetHandle, load_dataset, synthetic_dataset
from .diagnostics import (MetricSeries, comparison_table, export_report,
                          l1_snapshot, wz_distance_snapshot)
from .errors import (AdmmPruneError, CheckpointError, ConfigError, DatasetError,
                     NumericError, PruneSpecError, ShapeError, StructureError,
                     UnknownLayerError)
from .models import (ArchitectureSpec, ConvBlock, alexnet_spec,
                     architecture_spec, build_model, lenet5_spec, toy_spec)
from .network import Network
from .pipeline import (RunRecord, finetune, iterative_taylor, load_run_record,
                       pretrain, run_pipeline, single_shot, train_admm,
                       write_run)
from .surgery import (SurgeryPlan, apply_surgery, prune_conv_layer,
                      validate_structure, zero_out_filters)

__version__ = "0.1.0"
