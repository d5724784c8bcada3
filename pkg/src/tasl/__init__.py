"""Importance-guided skill localization and consolidation for continual learning."""

from .autodiff import ArchDescriptor, Batch, Model, ParamTensor, backward, forward_loss, init_model, sgd_step
from .consolidation import (
    accumulate,
    ema_weights_update,
    merge_coarse,
    merge_fine,
    normalize,
    threshold,
)
from .errors import TaslError
from .localization import ImportanceState, UnitScoreMap, run_localization, sensitivity, unit_scores, update
from .partition import SkillPartition, build_partition, unit_slice
from .runner import CLReport, RunConfig, aggregate, cl_metrics, evaluate, run_baseline, run_grid, run_one, run_tasl
from .tasks import TaskStream, gen_stream, reorder

__version__ = "0.1.0"
