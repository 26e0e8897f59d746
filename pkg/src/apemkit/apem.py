"""Adversarial-perturbation scoring of relevance maps.

A map's score for one image is the gap between the number of perturbation
steps needed to flip the prediction along the directed irrelevance ray and
along the directed relevance ray. The dataset-level measure is the mean of
those gaps. The perturbation direction is the per-pixel sign of the loss
gradient at the original image, computed once and never refreshed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputShapeError, ZeroMapError
from .explain import RelevanceMap
from .netcore import Network, _check_input, forward, forward_logits_batch, input_gradient


@dataclass(frozen=True)
class GapResult:
    eps_minus: int
    eps_plus: int
    gap: int
    step_size: float
    capped_minus: bool
    capped_plus: bool


def normalize_l1(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise InputShapeError("relevance map must be non-negative before l1 normalization")
    total = np.abs(values).sum()
    if total == 0:
        raise ZeroMapError("all-zero relevance map cannot be l1-normalized")
    return values / total


def irrelevance(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.min() < 0 or values.max() > 1:
        raise InputShapeError("irrelevance needs map values in [0, 1]")
    return 1.0 - values


def direct(r_norm: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Directed relevance: broadcast the single-channel map over the
    gradient's channels and multiply by sign(grad); sign(0) = 0."""
    if grad.shape[-2:] != r_norm.shape:
        raise InputShapeError(f"map shape {r_norm.shape} != gradient spatial {grad.shape[-2:]}")
    return r_norm * np.sign(grad)


def find_epsilon(
    net: Network,
    image: np.ndarray,
    reference_class: int,
    r_dir: np.ndarray,
    step: float = 1.0,
    cap: int = 10_000,
    clip: bool = False,
) -> tuple[int, bool]:
    """Smallest k in [1, cap] whose perturbation flips the prediction.

    Perturbed image is image + r_dir * (k * step). Scans k upward in
    exponentially growing, batch-evaluated blocks and returns the first
    flipping k, so the result equals an exhaustive linear scan even when
    the flip predicate is non-monotone along the ray (transient flip
    pockets do occur). Returns (cap, True) if no k in [1, cap] flips.
    """
    if step <= 0:
        raise InputShapeError("step must be > 0")
    if cap < 1:
        raise InputShapeError("cap must be >= 1")
    image = _check_input(net, image)
    if forward(net, image).predicted_class != reference_class:
        raise InputShapeError(
            f"reference class {reference_class} is not the prediction at the original image"
        )
    if r_dir.shape != image.shape:
        raise InputShapeError(f"directed map shape {r_dir.shape} != image shape {image.shape}")

    # The first affine layer commutes with the ray: L(x + c*r) = L(x) + c*(L(r) - bias),
    # so its output along the ray is a precomputable affine function of c.
    # Clipping acts on the raw input, so the shortcut only applies unclipped.
    pre = None
    first = net.layers[0]
    if not clip and first.kind in ("conv2d", "dense"):
        a0 = first.forward(image)[0]
        bias = first.bias if first.kind == "dense" else first.bias[:, None, None]
        b0 = first.forward(r_dir)[0] - bias
        pre = (a0, b0)

    start = 1
    block = 8
    while start <= cap:
        end = min(start + block - 1, cap)
        ks = np.arange(start, end + 1)
        if pre is not None:
            a0, b0 = pre
            scale = (ks * step).reshape((-1,) + (1,) * a0.ndim)
            xs = a0[None] + b0[None] * scale
            logits = forward_logits_batch(net, xs, start=1)
        else:
            scale = (ks * step).reshape((-1,) + (1,) * image.ndim)
            xs = image[None] + r_dir[None] * scale
            if clip:
                xs = np.clip(xs, 0.0, 1.0)
            logits = forward_logits_batch(net, xs)
        flips = np.argmax(logits, axis=1) != reference_class
        if flips.any():
            return int(ks[int(np.argmax(flips))]), False
        start = end + 1
        block = min(block * 2, 256)  # bounded blocks keep memory flat
    return cap, True


def find_epsilon_scan(
    net: Network,
    image: np.ndarray,
    reference_class: int,
    r_dir: np.ndarray,
    step: float = 1.0,
    cap: int = 10_000,
    clip: bool = False,
) -> tuple[int, bool]:
    """Exhaustive linear scan over k = 1..cap; the independent reference for
    find_epsilon. O(cap) forward passes, use only at small caps."""
    if step <= 0 or cap < 1:
        raise InputShapeError("step must be > 0 and cap >= 1")
    image = _check_input(net, image)
    if forward(net, image).predicted_class != reference_class:
        raise InputShapeError("reference class mismatch at the original image")
    for k in range(1, cap + 1):
        x = image + r_dir * (k * step)
        if clip:
            x = np.clip(x, 0.0, 1.0)
        if forward(net, x).predicted_class != reference_class:
            return k, False
    return cap, True


def gap(
    net: Network,
    image: np.ndarray,
    reference_class: int,
    rmap: RelevanceMap | np.ndarray,
    step: float = 1.0,
    cap: int = 10_000,
    clip: bool = False,
) -> GapResult:
    """eps_plus - eps_minus for one image and one simplified map.

    The gradient sign is taken once at the original image with respect to
    the reference class (for misclassified samples callers pass the model's
    prediction). Relevance and irrelevance searches share that sign.
    """
    values = rmap.values if isinstance(rmap, RelevanceMap) else np.asarray(rmap)
    if values.min() < 0 or values.max() > 1:
        raise InputShapeError("gap needs a final-stage map with values in [0, 1]")
    grad = input_gradient(net, image, reference_class)
    r_dir = direct(normalize_l1(values), grad)
    ri_dir = direct(normalize_l1(irrelevance(values)), grad)
    eps_minus, capped_minus = find_epsilon(net, image, reference_class, r_dir, step, cap, clip)
    eps_plus, capped_plus = find_epsilon(net, image, reference_class, ri_dir, step, cap, clip)
    return GapResult(
        eps_minus=eps_minus,
        eps_plus=eps_plus,
        gap=eps_plus - eps_minus,
        step_size=step,
        capped_minus=capped_minus,
        capped_plus=capped_plus,
    )


def apem(gaps) -> float:
    """Arithmetic mean of the per-image gaps."""
    gaps = list(gaps)
    if not gaps:
        raise InputShapeError("apem needs at least one gap")
    values = [g.gap if isinstance(g, GapResult) else float(g) for g in gaps]
    return float(np.mean(values))


def gap_quartiles(gaps) -> tuple[float, float, float]:
    """(q1, median, q3) of the per-image gaps."""
    values = [g.gap if isinstance(g, GapResult) else float(g) for g in gaps]
    if not values:
        raise InputShapeError("no gaps")
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(q1), float(med), float(q3)


def shuffle_map(rmap: RelevanceMap | np.ndarray, seed: int) -> RelevanceMap:
    """Uniform random permutation of the pixel values (value multiset kept)."""
    values = rmap.values if isinstance(rmap, RelevanceMap) else np.asarray(rmap)
    stage = rmap.stage if isinstance(rmap, RelevanceMap) else 3
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(values.ravel()).reshape(values.shape)
    return RelevanceMap(values=shuffled, stage=stage)
