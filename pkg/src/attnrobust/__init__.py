"""Attention-based text classifiers trained with adversarial perturbations
on the attention scores, plus gradient/attention agreement analysis."""

__version__ = "0.1.0"
