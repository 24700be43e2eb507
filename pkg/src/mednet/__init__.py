"""MedNet: a 44-convolution image classifier with a pretrain/fine-tune
transfer workflow, built on numpy from first principles.

The pieces compose bottom-up: :mod:`mednet.tensor` (seeded RNG streams and
numeric guards), :mod:`mednet.layers` (forward/backward primitives),
:mod:`mednet.graph` (configuration and the executable DAG),
:mod:`mednet.training` (SGD loop and metrics), :mod:`mednet.data` (PNM IO,
synthetic corpora, augmentation, splits), :mod:`mednet.transfer`
(checkpoints, head surgery, freezing, scratch-vs-finetune comparison),
:mod:`mednet.gradcheck` (finite-difference verification), and
:mod:`mednet.estimator` (a scikit-learn facade).  ``mednet.cli`` wires them
into the ``mednet`` command.
"""

from .data import (
    Dataset,
    Sample,
    augment,
    load_image_dir,
    oversample_balance,
    read_pnm,
    save_dataset_dir,
    split,
    synth_dataset,
    target_task,
    write_pnm,
)
from .estimator import MedNetClassifier
from .gradcheck import run_all as run_gradient_checks
from .graph import (
    MedNetConfig,
    ModelGraph,
    build_mednet,
    canonical_config,
    canonical_small_config,
    count_conv_layers,
    format_summary,
    slim_config,
    summary,
    tiny_config,
    with_classes,
)
from .tensor import Rng
from .training import (
    MetricsRecord,
    SgdOptimizer,
    StepDecay,
    TrainConfig,
    evaluate,
    sgd_step,
    train,
)
from .transfer import (
    FreezePlan,
    apply_freeze,
    compare_transfer,
    finetune,
    load_checkpoint,
    read_checkpoint_header,
    replace_head,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FreezePlan",
    "MedNetClassifier",
    "MedNetConfig",
    "MetricsRecord",
    "ModelGraph",
    "Rng",
    "Sample",
    "SgdOptimizer",
    "StepDecay",
    "TrainConfig",
    "apply_freeze",
    "augment",
    "build_mednet",
    "canonical_config",
    "canonical_small_config",
    "compare_transfer",
    "count_conv_layers",
    "evaluate",
    "finetune",
    "format_summary",
    "load_checkpoint",
    "load_image_dir",
    "oversample_balance",
    "read_checkpoint_header",
    "read_pnm",
    "replace_head",
    "run_gradient_checks",
    "save_checkpoint",
    "save_dataset_dir",
    "sgd_step",
    "slim_config",
    "split",
    "summary",
    "synth_dataset",
    "target_task",
    "tiny_config",
    "train",
    "with_classes",
    "write_pnm",
    "__version__",
]
