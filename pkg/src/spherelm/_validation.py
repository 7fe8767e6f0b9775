"""Input checks shared by the estimator and the command line."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import EmptyInput, IndexOutOfRange, ShapeMismatch


def check_tokens(X, vocab_size=None):
    """Return ``X`` as a 2-D int64 array of token ids."""
    if np.asarray(X).size == 0:
        raise EmptyInput("no sequences given")
    arr = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise IndexOutOfRange("token ids must be integers")
    arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise IndexOutOfRange("token ids must be >= 0")
    if vocab_size is not None and np.any(arr >= vocab_size):
        raise IndexOutOfRange(f"token id >= vocabulary size {vocab_size}")
    return arr


def check_clean_mask(mask, shape):
    """Broadcast a per-position or per-sequence boolean mask to ``shape``."""
    if mask is None:
        return np.zeros(shape, dtype=bool)
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.all(np.isin(m, (0, 1))):
            raise ShapeMismatch("clean mask must be boolean")
        m = m.astype(bool)
    try:
        return np.broadcast_to(m, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"clean mask of shape {m.shape} does not fit tokens {shape}") from exc
