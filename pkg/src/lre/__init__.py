"""Long-range encoder with dual-mode attention and progressive token merging."""

from .attention import (AttentionInputs, AttentionKind, FeatureMap,
                        approx_attention, dot_attention, mhsa_forward,
                        naive_approx_oracle, select_attention)
from .cost import (CostReport, CountingConvention, attn_cost,
                   compare_schedules, emit_table, model_cost)
from .data import Dataset, SyntheticTaskSpec, generate
from .encoder import (BlockSpec, EncoderConfig, Model, StemSpec, build,
                      classify, encoder_forward, load_model, resolve_schedule,
                      save_model, stem_forward)
from .gradcheck import gradcheck
from .reduction import ReductionSpec, expand_dim, reduce_tokens
from .tensor import (AllocationTracker, ConfigError, NumericError, OracleError,
                     ShapeError, Tensor, backward, load_tensor, no_grad, param,
                     save_tensor)
from .train import (AdamW, Metrics, TrainConfig, cosine_warmup_lr,
                    cross_entropy_ls, evaluate, metrics_multilabel, train,
                    weighted_bce)

__version__ = "0.1.0"
