"""Desk-scale end-to-end scene-text spotter.

Instance-segmentation detection (RPN + RoI heads + mask head), attention
decoding over unrectified masked RoI features, and a completeness-gated
multitask objective that learns from partially labeled data.
"""

__version__ = "0.1.0"
