"""Temporal action detection with binned boundary decoding.

Snippet features are run through a shared multi-resolution temporal pyramid;
per-snippet heads classify each boundary offset into coarse distance bins,
regress a residual inside the chosen bin, and score action categories.  A
video-level head gates which categories are allowed to produce detections.
Everything runs on a small numpy reverse-mode autodiff kernel; no deep
learning framework is required.
"""

__version__ = "0.1.0"
