"""Semi-supervised multi-task chest X-ray segmentation and classification."""

__version__ = "0.1.0"

from .losses import LossConfig, get_loss  # noqa: E402
from .segmentor import Segmentor, SegmentorConfig, make_variant  # noqa: E402
from .discriminator import Discriminator, DiscriminatorConfig  # noqa: E402
from .trainer import TrainConfig, evaluate, train_semisupervised, train_supervised  # noqa: E402

__all__ = [
    "__version__",
    "Discriminator",
    "DiscriminatorConfig",
    "LossConfig",
    "Segmentor",
    "SegmentorConfig",
    "TrainConfig",
    "evaluate",
    "get_loss",
    "make_variant",
    "train_semisupervised",
    "train_supervised",
]
