"""Desk-scale adversarial-training lab.

Small float64 models, white-box attacks, and a family of outer optimizers
built around per-example gradient geometry. Everything is numpy; runs are
deterministic given a seed.
"""

__version__ = "0.1.0"
