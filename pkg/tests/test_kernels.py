import numpy as np
import pytest

from chunksim import _pykernels, kernels
from chunksim.ctc import extend_labels

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


@compiled
def test_ctc_backends_agree(rng):
    for _ in range(30):
        T, C = int(rng.integers(1, 30)), int(rng.integers(2, 7))
        x = rng.normal(size=(T, C))
        logp = x - np.logaddexp.reduce(x, axis=1, keepdims=True)
        ext = extend_labels(rng.integers(1, C, size=int(rng.integers(1, 6))))
        a1, b1 = kernels.ctc_forward_backward(logp, ext, backend="cython")
        a2, b2 = kernels.ctc_forward_backward(logp, ext, backend="python")
        fin = np.isfinite(a1)
        assert np.array_equal(fin, np.isfinite(a2))
        assert np.allclose(a1[fin], a2[fin], atol=1e-12)
        fin = np.isfinite(b1)
        assert np.array_equal(fin, np.isfinite(b2))
        assert np.allclose(b1[fin], b2[fin], atol=1e-12)


@compiled
def test_edit_distance_backends_agree(rng):
    for _ in range(50):
        a = list(rng.integers(0, 4, size=int(rng.integers(0, 15))))
        b = list(rng.integers(0, 4, size=int(rng.integers(0, 15))))
        assert kernels.edit_distance(a, b, backend="cython") == _pykernels.edit_distance(a, b)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.edit_distance([1], [1], backend="fortran")
