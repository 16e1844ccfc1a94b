"""Attention-fusion backbone and source-free domain adaptation toolkit."""

__version__ = "0.1.0"

from .aem import AttentionModule, ChannelAttention, SpatialAttention
from .backbone import AttentionFusionBackbone, BlockSpec, ForwardTrace, fuse
from .centroids import (CentroidTable, PseudoLabels, assign_labels,
                        compute_centroids, ems_update, pseudo_label_epoch,
                        refine_labels)
from .checkpoint import load_checkpoint, save_checkpoint
from .contrast import GacConfig, MemoryBank, gac_loss, make_views
from .data import (Dataset, DomainSpec, ShiftRecipe, export_folder_dataset,
                   gen_domain_pair, load_folder_dataset, normalize)
from .errors import ConfigurationError, ContractViolationError, NumericError
from .losses import (LossReport, LossWeights, im_loss, source_ce, ssd_loss,
                     total_loss)
from .pipeline import (EvalMetrics, TrainConfig, TrainingState, adapt,
                       evaluate, load_state, pretrain_source, save_state)
