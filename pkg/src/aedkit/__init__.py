"""Audio event detection toolkit: log-mel features, augmentation, a numpy
Xception, weight surgery, and a fold-rotated ablation harness."""

__version__ = "0.1.0"
