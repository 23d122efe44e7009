"""Desk-scale lab for ternary-quantized early-exit transformers."""

__version__ = "0.1.0"

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .evalbench import (ExitSweepReport, VarianceProfile, compare_variants,
                        exit_sweep, perplexity, quality_speed_ratio,
                        throughput, variance_profile)
from .hadamard import HadamardPlan, fht, fht_rows, hadamard_matrix
from .layers import (DropoutSchedule, LinearLayerSpec, bitlinear_forward,
                     layer_skip_apply, schedule_p)
from .model import (ModelConfig, VariantConfig, build_model, forward_exit_at,
                    forward_full, generate, variant_from_name)
from .quant import (QuantizedActivations, TernaryWeights, quantize_activations,
                    ste_gradient, ternary_quantize)
from .tensor import ComputeGraph, Tensor, backward
from .tokenizer import Corpus, batch_stream, detokenize, load_corpus, tokenize
from .training import (AdamW, LossBreakdown, TrainConfig, clip_gradients,
                       cross_entropy, early_exit_loss, lr_at, train)
