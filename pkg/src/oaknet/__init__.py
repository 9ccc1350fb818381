"""Knee osteoarthritis severity toolkit.

Two-stage radiographic pipeline: a fully convolutional network localises the
knee joints, a CNN grades each extracted joint on the 0-4 severity scale
with classification, regression, joint and ordinal-regression objectives.
Built on a from-scratch differentiable engine (``oaknet.tensor``) verified by
finite-difference gradient checks.
"""

__version__ = "0.1.0"
