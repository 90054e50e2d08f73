"""Staged chain-of-thought recognition of occluded hand-held objects.

Loss kernels, a gated description/reflection/decision pipeline, corpus
generation and a three-score evaluation harness.
"""

__version__ = "0.1.0"
