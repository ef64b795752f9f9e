"""Feed-forward multi-view 3D Gaussian reconstruction at desk scale.

Pipeline: camera rays -> viewpoint/image tokens -> iterative cross/self
attention refinement -> per-pixel Gaussian decoding -> differentiable splat
rendering, plus an analytical cost model and a reproducible trainer.
"""

__version__ = "0.1.0"
