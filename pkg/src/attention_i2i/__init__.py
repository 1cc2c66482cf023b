"""Attention-guided unpaired image-to-image translation.

A shared encoder feeds a content generator (``n`` RGB maps) and an attention
generator (``n + 1`` softmax masks); the output mixes the content maps and the
input under the masks. The attention generator is trained with a local-global
contrastive objective, with patchwise NCE and an adversarial loss on the output.
"""
from ._validation import (ConfigurationError, IntegrityError, InvariantViolation, ShapeError,
                          VersionError, WarmupSignal)
from .data import (AugmentationConfig, BoundingBox, DatasetSpec, augment_image, load_unpaired_dataset,
                   make_local_patches, rasterize_object_mask)
from .detection import DetectionResult, proxy_detect
from .estimators import AttentionTranslator, ProxyDetector
from .evaluation import evaluate_detection, evaluate_distribution
from .export import export_attention_masks, export_region_features
from .local_global import (BankSet, LocalGlobalConfig, MemoryBank, MomentumPair, bank_enqueue,
                           bank_negatives, ema_update, local_global_loss)
from .losses import (InfoNCEConfig, LossReport, adversarial_loss_d, adversarial_loss_g,
                     generator_objective, info_nce, patch_nce_loss, saliency_loss)
from .metrics import (FeatureExtractorSpec, average_precision, frechet_distance,
                      instance_region_metrics, kernel_distance)
from .networks import (GeneratorConfig, TranslationModel, compose, encode, generate_attention,
                       generate_content, predict_saliency, project_features, translate)
from .toy import synthesize_toy_dataset
from .trainer import TrainConfig, TrainingState, fit, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"
