import numpy as np
import pytest

from metamtl.data import LabeledDataset
from metamtl.tensor import backward


def fd_gradients(loss_fn, params, eps=1e-5):
    """Central-difference gradients of a scalar loss, independent of backward()."""
    grads = []
    for p in params:
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + eps
            hi = float(loss_fn(params).data)
            p.data[idx] = orig - eps
            lo = float(loss_fn(params).data)
            p.data[idx] = orig
            num[idx] = (hi - lo) / (2.0 * eps)
            it.iternext()
        grads.append(num)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / scale).max()))
    return worst


def backward_gradients(loss_fn, params):
    gm = backward(loss_fn(params))
    return [gm.data(p) for p in params]


@pytest.fixture(scope="session")
def digits():
    """Real handwritten digits (8x8, bundled with scikit-learn), as a dataset."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images.reshape(-1, 1, 8, 8) / 16.0
    return LabeledDataset(images, raw.target.astype(np.int64), class_count=10,
                          name="digits8x8")


@pytest.fixture()
def toy_blobs_images():
    """A small separable 2-class image-shaped dataset for trainer tests."""
    rng = np.random.default_rng(42)
    n = 40
    x = rng.random((n, 1, 1, 8)) * 0.2
    y = np.arange(n) % 2
    x[y == 1, 0, 0, :4] += 0.7
    x[y == 0, 0, 0, 4:] += 0.7
    return LabeledDataset(np.clip(x, 0, 1), y.astype(np.int64), 2, "toy2")
