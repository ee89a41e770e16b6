"""Surrogate modeling toolkit for fiber-composite deformation and failure.

Synthetic microstructures go through a per-pixel constitutive driver to
produce stress/damage sequences; four shared-architecture networks learn the
peak stress field, the final damage pattern, and the two branches of the
macro stress-strain curve; a switched rollout stitches them into full
curve + crack predictions.
"""

__version__ = "0.1.0"
