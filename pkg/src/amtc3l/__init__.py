"""Adaptive-margin triplet loss-less center loss with negative-sample selection.

A numpy implementation of a classifier trained with cross-entropy plus a
sigmoid-squashed triplet center loss, three strategies for choosing the
negative prototype, and a small experiment harness around it.
"""

__version__ = "0.1.0"
