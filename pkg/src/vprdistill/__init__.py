"""Visual place recognition descriptors with cross-image teacher distillation.

Pipeline: a frozen ViT backbone yields multi-layer token maps; fusion
reduces and token-mixes them; multi-level GeM pools 14 regions; a regional
encoder (batch-correlating teacher or batch-invariant student) refines the
regional vectors into a unit-norm global descriptor. Training runs in two
phases (teacher, then distilled student); evaluation is PCA + exact kNN +
Recall@N.
"""

from .aggregation import (GeM, MultiLevelGeM, REGION_COUNT, assemble_descriptor,
                          gem_pool, partition_regions)
from .backbone import (BackboneConfig, SmallViT, TokenMap, load_precomputed,
                       tapped_layer_indices, write_feature_archive)
from .config import RunConfig, load_config_file, model_from_checkpoint, save_config_file
from .data import (PlaceBatch, PlaceDataset, PlaceRecord, generate_synthetic,
                   load_manifest, sample_batch, save_manifest)
from .encoders import EncoderConfig, RegionalEncoder, TransformerBlock
from .errors import FormatError, InputError, ShapeError, ValidationError
from .fusion import FusionConfig, MultiLayerFusion, stack_token_maps
from .losses import (LossWeights, MiningStats, MsLossConfig, distill_loss,
                     mine_pairs, ms_loss, total_loss)
from .model import DescriptorModel
from .retrieval import (DescriptorStore, GeoTruth, PairTruth, PcaModel,
                        RetrievalIndex, fit_pca, knn_search,
                        load_descriptor_store, project, recall_at_n,
                        save_descriptor_store)
from .training import (Checkpoint, TrainConfig, distill_student,
                       extract_descriptors, load_checkpoint, lr_schedule,
                       save_checkpoint, train_teacher)

__version__ = "0.1.0"
