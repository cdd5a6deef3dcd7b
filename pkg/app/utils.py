import hashlib
from typing import Optional, Union

import numpy as np


def make_rng(seed: Optional[Union[int, np.random.Generator]] = None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def hann_window(m: int, n: int, dtype=np.float64) -> np.ndarray:
    """Separable 2-D Hann taper, zero at the borders."""
    return np.outer(np.hanning(m), np.hanning(n)).astype(dtype)


def array_digest(*arrays: np.ndarray) -> str:
    """Short content hash over raw array bytes, shape included."""
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]

