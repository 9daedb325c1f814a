"""Diffusion-based any-to-any voice conversion with one-step adversarial distillation.

Desk-scale library: a multi-step denoising-diffusion teacher over log-mel
spectrograms is distilled into a one-step student with adversarial, feature
matching, and score-distillation losses, evaluated against a synthetic
source-filter corpus whose ground-truth conversion targets are known.
"""

__version__ = "0.1.0"
