"""Super-resolution recovery of poor-quality echocardiogram frames for downstream classification."""

__version__ = "0.1.0"

from ._validation import ValidationError  # noqa: E402
from .classifier import ClassifierConfig, EchoClassifier, build_classifier, evaluate_classifier, train_classifier  # noqa: E402
from .dataset import (  # noqa: E402
    EchoDataset, EchoFrame, Phase, Provenance, Quality, Task, TrainTestSplit, View,
    build_classification_split, load_camus, load_manifest, stratify_by_quality, synthesize_dataset,
)
from .degradation import (  # noqa: E402
    BicubicDownsampler, BicubicUpsampler, SRPair, bicubic_downsample, bicubic_upsample, make_sr_pairs,
)
from .experiments import (  # noqa: E402
    EvalMatrix, SRImprovementRecord, compare_sr_models, generate_report, run_cross_quality,
    run_sr_test_experiment, run_sr_train_experiment,
)
from .metrics import accuracy, psnr, relative_improvement, ssim  # noqa: E402
from .params import ModelParams, TrainHistory  # noqa: E402
from .sr_models import (  # noqa: E402
    SRConfig, SRGANUpscaler, SRResNetUpscaler, enhance_subset, perceptual_distance,
    srresnet_forward, train_srgan, train_srresnet,
)
