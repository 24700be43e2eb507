"""Input validation for array-facing entry points.

The estimator and CLI accept user-supplied arrays; these helpers normalize
them to the framework's N x H x W x C float32 convention and fail with
actionable messages instead of shape errors deep inside a forward pass.
"""

import numpy as np


def check_image_batch(x, name="X"):
    """Coerce to a float32 N x H x W x C batch.

    A 3-d array is treated as single-channel N x H x W.  Rejects empty
    batches, channel counts other than 1 or 3, and non-finite values.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise ValueError(
            f"{name} must be an (N, H, W, C) image batch; got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if x.shape[3] not in (1, 3):
        raise ValueError(
            f"{name} must have 1 (gray) or 3 (color) channels, got {x.shape[3]}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    elif x.dtype != np.float32:
        x = x.astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_labels(y, n_samples, name="y"):
    """Require a 1-d label vector aligned with the image batch."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {y.shape}")
    if y.shape[0] != n_samples:
        raise ValueError(
            f"{name} has {y.shape[0]} labels for {n_samples} images")
    return y
