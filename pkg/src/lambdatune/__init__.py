"""Per-clip HEVC lambda-scale tuning toolkit.

Finds, for each clip, the scale k on the encoder's rate-distortion lambda
that minimizes BD-rate against the unscaled encode, and trains a network to
predict that scale from encoder statistics so deployment costs one probe
encode instead of a search.
"""

__version__ = "0.1.0"

from .bd_metrics import BDResult, RDCurve, RDPoint, bd_psnr, bd_rate
from .lambda_model import default_lambda, legacy_lambda, scaled_lambda

__all__ = [
    "__version__",
    "BDResult",
    "RDCurve",
    "RDPoint",
    "bd_psnr",
    "bd_rate",
    "default_lambda",
    "legacy_lambda",
    "scaled_lambda",
]
