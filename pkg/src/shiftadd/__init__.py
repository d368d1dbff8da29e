"""Multiplication-reduced transformer toolkit: shift/add kernels, binarized
Q(KV) linear attention, a latency-aware mixture-of-experts layer, a toy
training and reparameterization pipeline, and an analytical energy model."""

__version__ = "0.1.0"
