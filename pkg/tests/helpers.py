"""Shared test utilities."""

import numpy as np


def randomize_params(model, seed=0, scale=0.05):
    """Add noise to every parameter so zero-initialized paths carry signal."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return model
