"""Task-success classifiers for robot manipulation from few demonstrations.

A library plus CLI harness covering eight neural architectures (NASNET-style
head, FCN, T-FCN, attention encoder-decoder, transformer, DANN, ADDA, and
T-FCN-ADDA), a synthetic demonstration generator with controllable domain
shift, and a full metric/ablation/reporting pipeline.
"""

from .backbones import BackboneConfig, FcnBackbone, PretrainedExtractor
from .data import (
    Demonstration,
    Frame,
    FrameBatch,
    TaskDataset,
    label_frames,
    load_manifest,
    make_windows,
    preprocess_frame,
    preprocess_image,
    split_train_val,
    timing_targets,
)
from .evaluation import (
    ConfusionCounts,
    MetricsReport,
    ProbabilityTrace,
    ablate_demo_count,
    auc,
    basic_metrics,
    confusion,
    evaluate_tasks,
    pearson,
    probability_trace,
    time_per_image,
)
from .models import (
    ARCH_HEADS,
    ARCH_IDS,
    GradientReversal,
    HeadConfig,
    ModelHandle,
    build_model,
    grl_apply,
    load_checkpoint,
    save_checkpoint,
)
from .synth import ShiftSpec, SynthConfig, generate, oracle_predict
from .training import (
    LossWeights,
    RunRecord,
    TrainConfig,
    classification_loss,
    timing_loss,
    train_adda,
    train_architecture,
    train_dann,
    train_multitask,
    train_supervised,
    unlabeled_images,
)

__version__ = "0.1.0"
