"""Per-sample error distributions from training trajectories, transferred to new
points through nearest neighbors in a model's latent space."""
from ltau.trajlog import (
    BinGrid,
    DescriptorSet,
    ErrorTrajectoryLog,
    PdfBank,
    build_pdf_bank,
    make_bin_grid,
)
from ltau.uqcore import OodThreshold, UqEstimate, estimate, estimate_batch, fit_ood_threshold

__version__ = "0.1.0"

__all__ = [
    "BinGrid",
    "DescriptorSet",
    "ErrorTrajectoryLog",
    "OodThreshold",
    "PdfBank",
    "UqEstimate",
    "build_pdf_bank",
    "estimate",
    "estimate_batch",
    "fit_ood_threshold",
    "make_bin_grid",
]
