"""Gait-based video person re-identification with partial silhouettes.

The library turns body-part label maps into aligned binary gait
silhouettes (full-body or with the torso removed), trains a set-pooled
convolutional embedder with Batch-All triplet loss, and evaluates
cross-camera and cross-view retrieval.  A deterministic synthetic runner
generator provides desk-scale datasets that exhibit the torso-occluded
arm swing the partial silhouettes are designed to recover.
"""

from . import dataio, embedder, errors, retrieval, silhouette, synth, trainer

__version__ = "0.1.0"

__all__ = [
    "dataio",
    "embedder",
    "errors",
    "retrieval",
    "silhouette",
    "synth",
    "trainer",
    "__version__",
]
