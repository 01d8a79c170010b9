"""Desk-scale glioma treatment world model.

Synthetic longitudinal cohort generation, a Y-shaped mixture-of-transformers
backbone for joint treatment planning and flow-based future MRI generation,
mask-alignment auxiliary supervision, training/inference/evaluation, and an
HTTP what-if sandbox.
"""

__version__ = "0.1.0"
