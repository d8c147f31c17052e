"""Weight Standardization, Batch-Channel Normalization and the diagnostics
that go with them, on a small numpy autodiff core."""

from .tensor import Tensor, finite_diff_grad, no_grad, set_default_dtype, verification_mode

__version__ = "0.1.0"

__all__ = ["Tensor", "finite_diff_grad", "no_grad", "set_default_dtype", "verification_mode", "__version__"]
