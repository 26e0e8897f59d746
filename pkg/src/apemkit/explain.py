"""Explanation methods and the map simplification pipeline.

Six methods produce raw attributions with the input image's shape:
plain gradient, SmoothGrad, LRP (epsilon rule), Guided Backpropagation,
Grad-CAM and Guided Grad-CAM. The simplification pipeline turns a raw
attribution into a single-channel map in [0, 1] through up to three
stages: channel sum, 99th-percentile clamp, grayscale-image multiply.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InputShapeError,
    MethodInapplicableError,
    UnsupportedArchitectureError,
)
from .netcore import (
    Network,
    _check_input,
    _forward_trace,
    feature_map_gradient,
    forward,
    guided_input_gradient,
    input_gradient,
)

METHOD_NAMES = (
    "gradient",
    "smoothgrad",
    "lrp",
    "guided_backprop",
    "gradcam",
    "guided_gradcam",
)

STAGE_NAMES = {1: "channel-summed", 2: "clamped", 3: "image-multiplied"}


@dataclass(frozen=True)
class RawAttribution:
    values: np.ndarray  # same shape as the input image
    method: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RelevanceMap:
    """Single-channel map; after simplification all values lie in [0, 1]."""

    values: np.ndarray  # (h, w)
    stage: int  # number of simplification stages applied (1..3)


def _resolve_target(net, image, target):
    if target is None:
        return forward(net, image).predicted_class
    return int(target)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------


def gradient_map(net: Network, image: np.ndarray, target: int | None = None) -> RawAttribution:
    """|dJ/dx| interpreted as pixel relevance."""
    image = _check_input(net, image)
    target = _resolve_target(net, image, target)
    return RawAttribution(np.abs(input_gradient(net, image, target)), "gradient")


def smoothgrad_map(
    net: Network,
    image: np.ndarray,
    target: int | None = None,
    n: int = 100,
    sigma: float = 0.2,
    seed: int = 0,
) -> RawAttribution:
    """Mean gradient magnitude over n Gaussian-perturbed copies of the image."""
    if n < 1:
        raise InputShapeError("smoothgrad needs n >= 1")
    if sigma < 0:
        raise InputShapeError("smoothgrad needs sigma >= 0")
    image = _check_input(net, image)
    target = _resolve_target(net, image, target)
    if sigma == 0:
        # the average of n identical gradients is the gradient itself;
        # computing it directly keeps the map bit-equal to gradient_map's
        values = np.abs(input_gradient(net, image, target))
        return RawAttribution(values, "smoothgrad", {"n": n, "sigma": sigma, "seed": seed})
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(image)
    for _ in range(n):
        noisy = image + rng.normal(0.0, sigma, size=image.shape)
        acc += np.abs(input_gradient(net, noisy, target))
    return RawAttribution(acc / n, "smoothgrad", {"n": n, "sigma": sigma, "seed": seed})


def guided_backprop_map(
    net: Network, image: np.ndarray, target: int | None = None
) -> RawAttribution:
    """|guided gradient|: relu layers drop negative backward signals."""
    image = _check_input(net, image)
    target = _resolve_target(net, image, target)
    return RawAttribution(np.abs(guided_input_gradient(net, image, target)), "guided_backprop")


def _stable_sign(z):
    return np.where(z >= 0, 1.0, -1.0)


def lrp_epsilon_map(
    net: Network,
    image: np.ndarray,
    target: int | None = None,
    epsilon: float = 1.0,
    return_layer_sums: bool = False,
):
    """Epsilon-rule relevance propagation from the target logit to the pixels.

    Dense/conv layers redistribute by contribution share with an epsilon
    stabilizer in the denominator; relu passes relevance through, maxpool
    routes winner-take-all, flatten reshapes.
    """
    if epsilon < 0:
        raise InputShapeError("lrp stabilizer epsilon must be >= 0")
    image = _check_input(net, image)
    for layer in net.layers:
        if layer.kind not in ("dense", "conv2d", "relu", "maxpool2d", "flatten"):
            raise UnsupportedArchitectureError(f"LRP does not support layer kind {layer.kind!r}")
    logits, outputs, caches = _forward_trace(net, image)
    target = int(np.argmax(logits)) if target is None else int(target)

    rel = np.zeros_like(logits)
    rel[target] = logits[target]
    layer_sums = [float(rel.sum())]

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        a = image if i == 0 else outputs[i - 1]
        if layer.kind == "dense":
            a_flat = a.reshape(-1)
            z = layer.weight * a_flat[None, :]  # (out, in)
            z_sum = z.sum(axis=1) + layer.bias
            denom = z_sum + epsilon * _stable_sign(z_sum)
            factor = np.where(denom == 0, 0.0, rel / np.where(denom == 0, 1.0, denom))
            rel = (z * factor[:, None]).sum(axis=0).reshape(a.shape)
        elif layer.kind == "conv2d":
            cols, out_hw = layer._im2col(a)
            wmat = layer.weight.reshape(layer.weight.shape[0], -1)
            z_sum = wmat @ cols + layer.bias[:, None]  # (oc, L)
            denom = z_sum + epsilon * _stable_sign(z_sum)
            rel_mat = rel.reshape(z_sum.shape)
            factor = np.where(denom == 0, 0.0, rel_mat / np.where(denom == 0, 1.0, denom))
            rcols = cols * (wmat.T @ factor)
            rel = layer._col2im(rcols, a.shape, out_hw)
        elif layer.kind == "maxpool2d":
            rel, _ = layer.backward(rel, caches[i])
        elif layer.kind == "flatten":
            rel = rel.reshape(a.shape)
        else:  # relu: identity on active units (inactive ones hold zero already)
            pass
        layer_sums.append(float(rel.sum()))

    attribution = RawAttribution(rel, "lrp", {"epsilon": epsilon})
    if return_layer_sums:
        return attribution, layer_sums
    return attribution


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation (align corners); constant grids stay constant."""
    gh, gw = grid.shape
    if gh == 1 and gw == 1:
        return np.full((out_h, out_w), grid[0, 0])
    yi = np.linspace(0.0, gh - 1, out_h) if gh > 1 else np.zeros(out_h)
    xi = np.linspace(0.0, gw - 1, out_w) if gw > 1 else np.zeros(out_w)
    y0 = np.clip(np.floor(yi).astype(int), 0, max(gh - 2, 0))
    x0 = np.clip(np.floor(xi).astype(int), 0, max(gw - 2, 0))
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x1)]
    c = grid[np.ix_(y1, x0)]
    d = grid[np.ix_(y1, x1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def gradcam_map(net: Network, image: np.ndarray, target: int | None = None) -> RawAttribution:
    """Class-score gradient at the last conv feature map, channel-weighted."""
    image = _check_input(net, image)
    conv_indices = net.conv_layer_indices()
    if not conv_indices:
        raise MethodInapplicableError("gradcam needs at least one conv2d layer")
    target = _resolve_target(net, image, target)
    acts, grads = feature_map_gradient(net, image, target, conv_indices[-1])
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    upsampled = bilinear_resize(cam, image.shape[1], image.shape[2])
    return RawAttribution(np.broadcast_to(upsampled, image.shape).copy(), "gradcam")


def guided_gradcam_map(
    net: Network, image: np.ndarray, target: int | None = None
) -> RawAttribution:
    """Elementwise product of guided backprop magnitude and the Grad-CAM map."""
    image = _check_input(net, image)
    target = _resolve_target(net, image, target)
    guided = guided_backprop_map(net, image, target).values
    cam = gradcam_map(net, image, target).values
    return RawAttribution(guided * cam, "guided_gradcam")


def compute_map(
    net: Network,
    image: np.ndarray,
    method: str,
    target: int | None = None,
    smooth_n: int = 100,
    sigma: float = 0.2,
    lrp_epsilon: float = 1.0,
    seed: int = 0,
) -> RawAttribution:
    """Dispatch by method name."""
    if method == "gradient":
        return gradient_map(net, image, target)
    if method == "smoothgrad":
        return smoothgrad_map(net, image, target, n=smooth_n, sigma=sigma, seed=seed)
    if method == "lrp":
        return lrp_epsilon_map(net, image, target, epsilon=lrp_epsilon)
    if method == "guided_backprop":
        return guided_backprop_map(net, image, target)
    if method == "gradcam":
        return gradcam_map(net, image, target)
    if method == "guided_gradcam":
        return guided_gradcam_map(net, image, target)
    raise MethodInapplicableError(f"unknown explanation method {method!r}")


# ---------------------------------------------------------------------------
# Simplification pipeline
# ---------------------------------------------------------------------------


def channel_sum(values: np.ndarray) -> np.ndarray:
    if values.ndim == 2:
        return values.copy()
    return values.sum(axis=0)


def nearest_rank_percentile(values: np.ndarray, q: float = 99.0) -> float:
    flat = np.sort(values.ravel())
    rank = int(np.ceil(q / 100.0 * flat.size))
    return float(flat[max(rank, 1) - 1])


def clamp_percentile(map2d: np.ndarray, q: float = 99.0) -> np.ndarray:
    return np.minimum(map2d, nearest_rank_percentile(map2d, q))


def multiply_grayscale(map2d: np.ndarray, image: np.ndarray) -> np.ndarray:
    gray = image.mean(axis=0) if image.ndim == 3 else image
    if gray.shape != map2d.shape:
        raise InputShapeError(f"image spatial shape {gray.shape} != map shape {map2d.shape}")
    return map2d * gray


def rescale_unit(map2d: np.ndarray) -> np.ndarray:
    lo, hi = map2d.min(), map2d.max()
    if hi == lo:
        return np.zeros_like(map2d)  # constant maps carry no ranking information
    return (map2d - lo) / (hi - lo)


def simplify(raw: RawAttribution, image: np.ndarray, stage: int = 3) -> RelevanceMap:
    """Apply stages 1..stage, then rescale affinely to [0, 1]."""
    if stage not in (1, 2, 3):
        raise InputShapeError(f"stage must be 1, 2 or 3, got {stage}")
    if not np.all(np.isfinite(raw.values)):
        raise InputShapeError("raw attribution contains non-finite values")
    m = channel_sum(raw.values)
    if stage >= 2:
        m = clamp_percentile(m)
    if stage >= 3:
        m = multiply_grayscale(m, image)
    return RelevanceMap(values=rescale_unit(m), stage=stage)
