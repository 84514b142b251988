"""Strip-convolution segmentation toolkit.

Differentiable shape self-learning strip convolutions, hierarchical topology
losses (mask / centerline / 8-neighbor connectivity), a compact trainable
encoder-decoder, a synthetic vessel-tree corpus generator, and topology-aware
evaluation metrics, all on plain numpy NCHW arrays.
"""

from .errors import (CheckpointError, CheckpointMagicError,
                     CheckpointShapeError, CheckpointTruncatedError,
                     ConfigError, ContractViolation, NonFiniteLossError,
                     PgmError, PgmHeaderError, PgmMaxvalError,
                     PgmPayloadError)
from .grid import (PlainKernel, bilinear_sample, conv2d_standard, pool_down2,
                   pointwise, upsample2)
from .net import (NetConfig, NetParams, forward, init_params,
                  load_checkpoint, save_checkpoint, train_step)
from .precision import float64_mode, real_dtype, set_real_dtype
from .sslconv import (OffsetField, StripKernelSet, accumulate_offsets,
                      predict_raw_increments, ssl_backward, ssl_forward)
from .synthdata import Sample, SynthConfig, generate, read_pgm, write_pgm
from .topo import (LossBreakdown, connectivity_cube, hard_skeleton,
                   loss_centerline, loss_connectivity, loss_mask, loss_total,
                   soft_skeleton)
from .metrics import (MetricsReport, SampleMetrics, asd, cl_dice_metric,
                      evaluate_pair, overlap_metrics)

__version__ = "0.1.0"
