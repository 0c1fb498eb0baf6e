import numpy as np
import pytest

from afnet_m.config import ModelConfig
from afnet_m.data import FaceSample
from afnet_m.tensor import Tape, Tensor, backward


@pytest.fixture
def setup(tmp_path):
    from ml_logger import logger

    logger.configure(root=str(tmp_path), prefix="tests")
    return logger


def tiny_config(**kwargs):
    """S=32 with the narrowest widths that keep the doubling pattern."""
    return ModelConfig.toy(**{**dict(widths=(4, 8, 16, 32)), **kwargs})


def fd_check(loss_fn, tensors, eps=1e-5, entries=None, seed=0):
    """Compare tape gradients of `loss_fn()` against central differences.

    :param loss_fn: builds a scalar Tensor from `tensors`
    :param tensors: name -> Tensor with requires_grad=True
    :param entries: check at most this many entries per tensor (all when None)
    :return: name -> relative error ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-8)
    """
    for t in tensors.values():
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}

    picker = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = picker.choice(flat.size, entries, replace=False)
        a = analytic[name].reshape(-1)[idx]
        n = np.empty(len(idx))
        for j, i in enumerate(idx):
            original = flat[i]
            flat[i] = original + eps
            up = loss_fn().item()
            flat[i] = original - eps
            down = loss_fn().item()
            flat[i] = original
            n[j] = (up - down) / (2 * eps)
        errors[name] = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
    return errors


def random_tensor(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def naive_conv2d(x, w, b, stride, pad):
    N, C, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, Cout, Ho, Wo))
    for n in range(N):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def naive_pool2d(x, mode, k, stride, pad):
    N, C, H, W = x.shape
    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N, C, Ho, Wo))
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, c, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, c, i, j] = patch.max() if mode == "max" else patch.mean()
    return out


def naive_linear(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for n in range(x.shape[0]):
        for o in range(w.shape[1]):
            out[n, o] = sum(x[n, i] * w[i, o] for i in range(x.shape[1])) + b[o]
    return out


def pattern_samples(subjects, size=32, noise=0.02, seed=0):
    """Directly built FaceSamples whose class is written into the images as a fixed pattern."""
    rng = np.random.default_rng(seed)
    templates = np.random.default_rng(1234).uniform(0, 1, size=(6, 3, size, size))
    samples = []
    for subject in subjects:
        for label in range(6):
            jitter = noise * rng.standard_normal((3, size, size))
            texture = np.clip(templates[label] + jitter, 0, 1)
            depth = np.clip(templates[(label + 3) % 6] + jitter, 0, 1)
            samples.append(FaceSample(label=label, subject_id=subject, intensity=4, texture=texture, depth=depth,
                                      mask1=np.ones((1, size // 4, size // 4)),
                                      mask2=np.ones((1, size // 8, size // 8)),
                                      key=f"s{subject}_{label}"))
    return samples


def oracle_region_mask(points, size, radius):
    """Loop rasterizer: pixel-center inside the convex polygon or within `radius` of its boundary."""
    from scipy.spatial import ConvexHull

    hull = ConvexHull(points)
    ring = list(points[hull.vertices]) + [points[hull.vertices[0]]]
    mask = np.zeros((size, size))
    for r in range(size):
        for c in range(size):
            p = np.array([c + 0.5, r + 0.5])
            inside = all(np.dot(eq[:-1], p) + eq[-1] <= 1e-12 for eq in hull.equations)
            near = False
            for a, b in zip(ring[:-1], ring[1:]):
                d = b - a
                t = min(max(np.dot(p - a, d) / np.dot(d, d), 0.0), 1.0)
                near = near or np.hypot(*(p - (a + t * d))) <= radius
            mask[r, c] = 1.0 if inside or near else 0.0
    return mask
