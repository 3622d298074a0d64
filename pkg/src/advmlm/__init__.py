"""Adversarial masked-language-model pre-training on a numpy autodiff core."""

__version__ = "0.1.0"
