"""Gaze-regularized attention on synthetic egocentric clips.

The pipeline turns eye-tracking traces into per-frame patch distributions
(optionally aggregated over a short window with flow-based occlusion
gating), trains a small attention model whose attention maps are pulled
toward those distributions, and measures how well attention and gaze agree.
"""

__version__ = "0.1.0"
