"""Token-merging segmentation transformer with boundary-supervised fusion."""

from .boundary import BoundaryMask, boundary_head, ffm, make_boundary_mask
from .cluster import (ClusterResult, assign, cluster_tokens, distance_indicator,
                      local_density, select_centers)
from .config import DataConfig, RunConfig, load_config, save_config
from .data import SegSample, gen_synthetic, load_dataset, save_dataset
from .losses import (LossConfig, LossParts, bce, cross_entropy, dice_loss,
                     focal_loss, relaxed_ce, total_loss)
from .merge import (MergeRecord, merge_features, pmb_stage, recover,
                    stage_token_counts, update_merged)
from .metrics import Metrics, evaluate, report_budget
from .model import Model, ModelConfig, strip_boundary_head
from .patches import TokenSet, embed, patchify, transformer_block, unpatchify
from .tensor import Tensor, grad_check
from .train import TrainConfig, train
from .viz import viz_tokens

__version__ = "0.1.0"
