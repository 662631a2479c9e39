"""Python face of the gconv-lab native core.

Everything heavy lives in the compiled extension; this package just re-exports
it under a stable name.
"""

from gconv_lab._core import (
    __version__,
    conv2d,
    conv_weight_count,
    frechet_distance,
    gconv2d,
    gconv_scaling,
    inception_score,
    mode_coverage,
)

__all__ = [
    "__version__",
    "conv2d",
    "conv_weight_count",
    "frechet_distance",
    "gconv2d",
    "gconv_scaling",
    "inception_score",
    "mode_coverage",
]
