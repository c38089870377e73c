"""Feature-space rebalancing for long-tail classification.

Estimate per-class Gaussian statistics over embeddings, sample calibrated
synthetic features until every class is balanced, and retrain a decoupled
(linear or cosine) classifier on the result.
"""

from .baselines import (BaselineSpec, feature_mixup_batch,
                        gaussian_noise_balance, oversample_balance)
from .calibrate import (CalibratedGaussian, GenerationConfig, QuotaPlan,
                        calibrated_distribution, generate_balanced,
                        generation_quotas, nearest_class_means, run_generation)
from .classifier import (Classifier, TrainConfig, epoch_provider,
                         init_classifier, load_checkpoint, logits,
                         save_checkpoint, softmax_ce_loss, train_classifier)
from .errors import (CorruptionError, DomainError, FormatError,
                     NumericalError, TailCalibError, ValidationError)
from .evaluate import Metrics, evaluate, nn_report, pca_project
from .sampler import CholeskyFactor, cholesky_psd, derive_seed, sample_gaussian
from .store import (ClassProfile, FeatureDataset, SyntheticWorldSpec,
                    class_profile, make_longtail_counts, read_feature_csv,
                    read_feature_file, subsample_longtail,
                    synth_gaussian_dataset, write_feature_file)
from .transform import (ClassStats, TukeyParam, class_statistics,
                        l2_normalize, tukey_transform)

__version__ = "0.1.0"
