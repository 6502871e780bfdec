"""Adversarial transformation network lab: generator attacks, gradient
baselines, and a fooling-rate evaluation harness on a numpy autodiff core."""

__version__ = "0.1.0"
