"""driftfilter: end-to-end trainable particle filtering on 2-D grid worlds.

The package bundles a tape-based reverse-mode autodiff substrate, a
synthetic floor-plan world with a simulated range scanner, a particle
filter whose transition and observation models are trainable networks,
classical baselines (analytic beam model, dead reckoning) and an exact
discrete Bayes filter used as a correctness oracle.
"""

from driftfilter import autodiff

__version__ = "0.1.0"

__all__ = ["autodiff", "__version__"]
