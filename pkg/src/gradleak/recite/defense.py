"""Gaussian gradient noise as a differential-privacy style defense."""

from __future__ import annotations

import numpy as np

from gradleak.tinylm.model import GradientCapture


def apply_dp_noise(capture: GradientCapture, sigma: float,
                   rng: np.random.Generator) -> GradientCapture:
    """Add i.i.d. N(0, sigma^2) noise to every gradient entry; sigma = 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return capture
    noisy = {name: g + rng.normal(0.0, sigma, g.shape) for name, g in sorted(capture.grads.items())}
    return GradientCapture(capture.peft_mode, noisy, capture.b, capture.b_n)
