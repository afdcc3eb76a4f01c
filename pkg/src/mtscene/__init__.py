"""Joint semantic segmentation and scene recognition with fast attention.

A two-path network over a shared residual encoder: a lightweight decoder with
attention-enhanced lateral connections produces per-pixel class scores, and a
recognition head turns the discretized semantic message plus the RGB features
into a scene posterior. Includes the training loop, metric suite, analytic
complexity profiler, synthetic dataset generator, and CLI.
"""

from .attention import fast_attention, fast_attention_oracle, l2_normalize_rows
from .backbone import BackboneConfig, StageFeatures, build_backbone, encode
from .datasets import (FolderDataset, Sample, SyntheticConfig, generate_synthetic,
                       load_folder_dataset)
from .metrics import MetricsReport, mca, miou, pixel_accuracy, topk_accuracy
from .model import (JointSceneModel, ModelConfig, canonical_config, load_checkpoint,
                    preset_config, save_checkpoint, toy_config)
from .profiler import ComplexityReport, complexity_report, count_flops, count_params, measure_fps
from .recog_path import RecogPathConfig, SceneLogits, cam, one_hot_encode
from .seg_path import SegPath, SegPathConfig, segment
from .training import (AugmentConfig, LossWeights, TrainConfig, TrainingLog, augment,
                       cosine_lr, evaluate, fit, joint_loss, scene_loss, seg_loss,
                       select_checkpoint)

__version__ = "0.1.0"
