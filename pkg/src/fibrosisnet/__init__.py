"""CT-based prediction of forced vital capacity decline.

Stages: DICOM ingest, CT preprocessing, a numpy autodiff engine, a compact
depthwise-separable backbone, per-slice slope prediction blended with
metadata regressors, the Laplace log-likelihood metric, occlusion
attribution, and synthetic cohorts for testing without clinical data.
"""

__version__ = "0.1.0"
