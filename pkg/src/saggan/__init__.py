"""Semi-supervised attention-guided cycle GAN for lesion-image augmentation."""

__version__ = "0.1.0"
