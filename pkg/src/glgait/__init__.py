"""Global-local temporal receptive field gait network building blocks.

The package pairs a small reverse-mode tensor engine with the network's
operators (pseudo-global temporal attention, the global-local temporal
module, the residual spatio-temporal blocks, the centre-augmented triplet
loss family), plus the analysis, synthetic-data and training machinery
used to verify their structural and complexity claims at desk scale.
"""

from .attention import (AttentionConfig, ProjectionWeights, MultiplyCounter,
                        pgta_forward, mhsa_spatiotemporal_forward,
                        factorised_temporal_forward, mobilevit_attention_forward)
from .blocks import (BackboneConfig, GaitModel, GLTM, GL3DBlock, P3DBlock,
                     build_backbone, capacity_config, count_params, param_count,
                     shape_trace, silhouette_scores, save_checkpoint,
                     load_checkpoint)
from .losses import (triplet_loss, ctl, center_loss, triplet_center_loss,
                     cross_entropy, combined)
from .analysis import (ComplexityReport, ArchDescriptor, TemporalLayer,
                       analytic_attention_cost, empirical_flop_count,
                       expected_mults, trf_analytic, trf_empirical)
from .synthdata import (IdentityParams, SilhouetteSequence, SyntheticDataset,
                        generate_sequence, sample_fixed_length, make_dataset,
                        save_dataset, load_dataset)
from .tensor import Tensor, ShapeError, grad_check, no_grad
from .train import TrainConfig, SGD, train_toy, evaluate

__version__ = "0.1.0"
