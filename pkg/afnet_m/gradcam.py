"""
Grad-CAM heat maps over any cached activation of AFNetM.

    heat = gradcam(model, sample, target_class=3, layer="depth.layer2")

Channel weights are the spatial mean of d(score)/d(activation); the map is relu of the weighted
channel sum, bilinearly upsampled to the input size and min-max normalized to [0, 1].
"""
import numpy as np

from . import functional as F
from .data import make_batch
from .model import ActivationCache
from .tensor import Tape, backward


def _resize_axis(x, size, axis):
    n = x.shape[axis]
    # half-pixel centers (align_corners=False), clamped at the border
    src = (np.arange(size) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * x.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def upsample_bilinear(image, size):
    """Resize the last two axes of `image` to size x size."""
    image = np.asarray(image, dtype=np.float64)
    return _resize_axis(_resize_axis(image, size, -2), size, -1)


def normalize_minmax(cam):
    lo, hi = cam.min(), cam.max()
    if hi <= lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam_map(activation, gradient, size):
    """
    :param activation: C x h x w (or 1 x C x h x w) activation at the chosen layer
    :param gradient: gradient of the class score with respect to `activation`, same shape
    :param size: output side length S
    :return: S x S map in [0, 1]
    """
    a = np.asarray(activation, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if a.ndim == 4:
        a, g = a[0], g[0]
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=(0, 0)), 0)
    return normalize_minmax(upsample_bilinear(cam, size))


def class_score(model, sample, target_class, cache):
    """Forward one sample in eval mode under a tape and backpropagate its target logit."""
    batch = make_batch([sample], model.config)
    onehot = np.zeros((1, model.config.num_classes))
    onehot[0, target_class] = 1.0
    with Tape() as tape:
        logits = model(batch.texture, batch.depth, batch.masks, cache=cache)
        score = F.reduce_sum(F.mul(logits, F.constant(onehot)))
    backward(tape, score)
    return logits


def gradcam(model, sample, target_class=None, layer="texture.layer4"):
    """Heat map of `target_class` evidence at `layer` for one FaceSample.

    :param target_class: class index; the predicted class when None
    :param layer: a cached activation name, e.g. "texture.stem", "depth.layer2", "fusion3"
    :return: S x S heat map
    """
    was_training = model.training
    model.eval()
    try:
        if target_class is None:
            batch = make_batch([sample], model.config)
            target_class = int(np.argmax(model(batch.texture, batch.depth, batch.masks).data[0]))
        cache = ActivationCache()
        class_score(model, sample, target_class, cache)
        activation = cache[layer]
        heat = gradcam_map(activation.data, cache.gradient(layer), model.config.input_size)
    finally:
        model.zero_grad()
        model.train(was_training)
    return heat


def heatmap_rgb(heat, image=None, alpha=0.5):
    """Blend a [0, 1] heat map (jet colormap) over an optional 3 x S x S image; returns S x S x 3 uint8."""
    import matplotlib

    colored = matplotlib.colormaps["jet"](heat)[..., :3]
    if image is not None:
        colored = alpha * colored + (1 - alpha) * np.transpose(np.asarray(image), (1, 2, 0))
    return (np.clip(colored, 0, 1) * 255).astype(np.uint8)
