"""Desk-scale two-stage whole-slide-image classification.

Stage one turns a slide into a mosaic of representative patches and encodes
it as a bag of feature vectors; stage two classifies the bag with a
permutation-invariant focal-attention model trained from scratch.
"""

__version__ = "0.1.0"
