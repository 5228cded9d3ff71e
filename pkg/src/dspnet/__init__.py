"""Slimmable self-supervised pretraining at desk scale.

One full-size encoder is trained with a BYOL-style objective while being
sampled as predefined sub-networks; after training each sub-network can be
sliced out with a usable representation.
"""

__version__ = "0.1.0"
