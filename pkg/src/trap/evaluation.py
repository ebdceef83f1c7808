"""Transferability and robustness metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from trap import zoo

NOISE_LEVELS = (0.02, 0.05, 0.1, 0.15, 0.2)
BLUR_LEVELS = (0.5, 1.0, 2.0, 3.0)


def success_rate(pred_adv, pred_benign, y_true, subtract_benign=False) -> float:
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ValueError("attack success rate of an empty batch is undefined")
    wrong = int(np.sum(np.asarray(pred_adv) != y_true))
    if subtract_benign:
        # counts first, so the difference is exact before the one division
        wrong = max(0, wrong - int(np.sum(np.asarray(pred_benign) != y_true)))
    return wrong / len(y_true)


def attack_success_rate(target_graph, x, x_adv, y_true, subtract_benign=False) -> float:
    """Fraction of adversarial items the target misclassifies.

    With ``subtract_benign`` the benign error rate is subtracted and the
    result floored at zero.
    """
    if len(y_true) == 0:
        raise ValueError("attack success rate of an empty batch is undefined")
    pred_benign = zoo.predict(target_graph, x) if subtract_benign else None
    return success_rate(zoo.predict(target_graph, x_adv), pred_benign, y_true, subtract_benign)


class Destruction(NamedTuple):
    rate: float | None  # None when no item qualifies
    destroyed: int
    count: int


def destruction_rate(graph, x, x_adv, y_true, corruption) -> Destruction:
    """Share of successful adversarial items that a corruption turns back to correct.

    Only items classified correctly when benign and wrongly when adversarial
    are counted.
    """
    y_true = np.asarray(y_true)
    pred_benign = zoo.predict(graph, x)
    pred_adv = zoo.predict(graph, x_adv)
    counted = (pred_benign == y_true) & (pred_adv != y_true)
    count = int(counted.sum())
    if count == 0:
        return Destruction(None, 0, 0)
    corrupted = corruption(np.asarray(x_adv)[counted])
    recovered = int((zoo.predict(graph, corrupted) == y_true[counted]).sum())
    return Destruction(recovered / count, recovered, count)


def corrupt_gaussian_noise(image, sigma, rng: np.random.Generator):
    image = np.asarray(image)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return image.copy()
    noisy = image + rng.normal(0.0, sigma, size=image.shape).astype(image.dtype)
    return np.clip(noisy, 0, 1)


def gaussian_kernel(sigma) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def corrupt_gaussian_blur(image, sigma):
    """Separable Gaussian blur over the last two axes, radius ceil(3 sigma), reflected borders."""
    image = np.asarray(image)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    out = image.astype(np.float64)
    out = ndimage.correlate1d(out, k, axis=-1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=-2, mode="reflect")
    return out.astype(image.dtype)


def _ratio(graph, layer_id, x, x_adv):
    if layer_id == "input":
        f, f_adv = np.asarray(x).reshape(len(x), -1), np.asarray(x_adv).reshape(len(x), -1)
    else:
        f, f_adv = zoo.hidden_output(graph, layer_id, x), zoo.hidden_output(graph, layer_id, x_adv)
    f, f_adv = f.astype(np.float64), f_adv.astype(np.float64)
    base = np.linalg.norm(f, axis=1)
    diff = np.linalg.norm(f_adv - f, axis=1)
    return diff, base


def relative_feature_difference(graph, layer_id, x, x_adv, return_excluded=False):
    """Batch mean of |F(x_adv) - F(x)| / |F(x)| at ``layer_id``.

    ``layer_id="input"`` measures the perturbation itself. Items with a
    zero benign feature are left out of the mean.
    """
    diff, base = _ratio(graph, layer_id, x, x_adv)
    keep = base > 0
    value = float(np.mean(diff[keep] / base[keep])) if keep.any() else float("nan")
    if return_excluded:
        return value, np.nonzero(~keep)[0].tolist()
    return value


def rfd_profile(graph, x, x_adv, layers=None) -> dict:
    layers = ["input"] + graph.layer_ids if layers is None else layers
    return {lid: relative_feature_difference(graph, lid, x, x_adv) for lid in layers}


@dataclass
class EvalReport:
    asr_rows: list = field(default_factory=list)
    destruction_rows: list = field(default_factory=list)
    rfd_rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
