"""Coarse-to-fine triangle-mesh deformation driven by differentiable rendering.

The package deforms a source mesh by optimizing per-face linear maps
(recovered into vertex positions through a weighted Poisson solve) and, at a
coarser level, per-part similarity transforms of oriented bounding-box cages.
Guidance comes from pluggable providers: analytic silhouette / latent targets
for offline use, or a remote score-distillation service over HTTP.
"""

__version__ = "0.1.0"
