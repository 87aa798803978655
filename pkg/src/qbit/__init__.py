"""qbit: a desk-scale quantization-aware-training lab.

Library layout mirrors the moving parts: ``tensor`` (autodiff engine),
``quantizers`` (elastic and squashed-weight fake quantization),
``model`` (toy transformer with quantization injection points),
``distill`` (layerwise distillation losses), ``trainer`` (QAT loop and
precision schedules), ``profiler`` (Storage/FLOPs/QuantOPs/Runtime cost
model), ``checkpoint`` (binary container) and ``cli``.
"""

from .distill import DistillTargets, distill_loss
from .model import LayerTrace, ModelParams, TransformerConfig, forward, \
    init_params, masked_prediction_loss, parameter_count
from .profiler import Anchor, CostReport, calibrate_anchor, count_ops, \
    count_storage, estimate_runtime, profile_model, validate_table_fixture
from .quantizers import ElasticParams, QuantSpec, SquashedParams, \
    elastic_linear, elastic_quantize, level_set, squash_reg_loss, squashed_linear
from .tensor import NumericError, ShapeError, Tensor, custom_grad
from .trainer import Schedule, SyntheticDataset, TrainConfig, evaluate, \
    parse_schedule, run_qat, train_teacher

__version__ = "0.1.0"
