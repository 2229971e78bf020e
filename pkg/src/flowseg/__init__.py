"""Joint video segmentation / optical flow training on a small autodiff core."""

from .errors import (ConfigError, ContractError, DataError, DomainError,
                     FlowsegError, NumericError, ShapeError)
from .tensor import (Node, Parameter, backward, conv2d, elementwise,
                     pool_and_resize)
from .warp import FlowField, rescale_flow, warp_bilinear
from .occlusion import (OcclusionMask, error_mask, occlusion_loss,
                        occlusion_target, seg_inconsistency_mask)
from .losses import (LossBreakdown, LossWeights, joint_loss, photometric_loss,
                     segmentation_loss, smoothness_loss, ssim_map,
                     temporal_consistency_loss)
from .model import Model, ModelConfig, SegMap, correlate, init_parameters
from .synthdata import Metrics, SceneSample, epe, generate_scene, miou
from .harness import (TrainConfig, evaluate, gradcheck, poly_lr, sample_pairs,
                      sgd_step, train)

__version__ = "0.1.0"
