"""Artifact-indicator continual face-forgery detection at desk scale.

Modules:
    imgstat: image conversion, filtering and masked statistics.
    indicators: the 18 per-region artifact indicators and their normalizer.
    anchors: text-anchor library selection, matching and storage.
    encoder: a small numpy vision transformer with gated anchor cross-attention.
    trainer: losses, anchor scheduling and the per-task training loop.
    harmonizer: post-task classifier-head alignment on the hypersphere.
    harness: synthetic tasks, AUC and the incremental protocol.
"""
from .errors import ArtifactError

__version__ = "0.1.0"
__all__ = ["ArtifactError", "__version__"]
