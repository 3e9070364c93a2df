"""Hyperplane-reflection finetuning (ETHER, ETHER+) and baselines on a small autodiff core."""

__version__ = "0.1.0"
