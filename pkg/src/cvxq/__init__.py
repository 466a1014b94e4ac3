"""cvxq: post-training weight quantization with budgeted bit allocation.

The pipeline assigns per-group bit depths by dual ascent on a separable
distortion model, quantizes each group with a Laplace-matched companded
quantizer, and corrects biases so mean layer outputs are preserved.
Round-to-nearest, Lloyd-Max, and prune-and-compensate baselines plus
bit-exact file formats make the whole thing auditable at desk scale.
"""

from .alloc import (Allocation, GroupStat, bit_update, dual_ascent,
                    group_distortion, integerize, overhead_bits,
                    partition_gain)
from .calib import (CvxqConfig, CvxqResult, DivergenceError, GradStats,
                    accumulate_stats, bias_correct, cvxq, finetune_scale_mean,
                    overhead_percent, zero_fraction)
from .netmodel import (LayerSpec, ModelBundle, backward, build_attention_model,
                       build_calibration, build_mlp, forward, substitute,
                       sum_squared_gradients)
from .numkit import (QUANT_COEFF, RandomSource, pca_basis, sub_sample,
                     variance_cluster)
from .obs import PruneResult, PruneStep, QuadraticModel, obs_prune, prune_step
from .quant import (QuantizedGroup, QuantSpec, compand_quantize,
                    compand_reconstruct, compander, compander_inverse,
                    error_variance, lloyd_max, rtn_quantize, uniform_quantize)

__version__ = "0.1.0"
