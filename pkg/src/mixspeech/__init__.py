"""Cross-modal self-learning for visual speech translation with audio-visual stream mixup."""

__version__ = "0.1.0"
