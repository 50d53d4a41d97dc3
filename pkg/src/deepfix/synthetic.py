"""Synthetic images with centre-biased fixations, for desk-scale experiments."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .metrics import FixationSet, fixations_to_map
from .train import Dataset


def _render(rng, h, w, n_objects):
    yy, xx = np.mgrid[0:h, 0:w]
    # low-contrast grey texture background
    tex = gaussian_filter(rng.standard_normal((h, w)), 1.5)
    img = np.clip(0.45 + 0.08 * tex / (tex.std() + 1e-12), 0, 1)
    img = np.repeat(img[None], 3, axis=0)
    centres = []
    margin_y, margin_x = h // 8, w // 8
    for _ in range(n_objects):
        cy = rng.uniform(margin_y, h - 1 - margin_y)
        cx = rng.uniform(margin_x, w - 1 - margin_x)
        r = rng.uniform(0.05, 0.1) * min(h, w) + 1.5
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        colour = np.zeros(3)
        colour[rng.integers(3)] = 1.0
        colour[rng.integers(3)] += rng.uniform(0.0, 0.8)
        colour = np.clip(colour, 0, 1)
        img[:, mask] = colour[:, None]
        centres.append((cx, cy, r))
    return img, centres


def synthetic_sample(rng, h=48, w=64, center_bias_strength=0.7, n_fixations=60, blur_sigma=2.0,
                     max_objects=3, center_sigma=0.12):
    """One image, its fixations and blurred ground-truth map.

    Each fixation comes from a centred Gaussian (std ``center_sigma`` of the
    image extent) with probability ``center_bias_strength``, otherwise from a
    small Gaussian around a randomly chosen object.
    """
    n_objects = int(rng.integers(1, max_objects + 1))
    img, objects = _render(rng, h, w, n_objects)
    pts = []
    for _ in range(n_fixations):
        if rng.random() < center_bias_strength:
            x = rng.normal((w - 1) / 2, center_sigma * w)
            y = rng.normal((h - 1) / 2, center_sigma * h)
        else:
            cx, cy, r = objects[rng.integers(len(objects))]
            x, y = rng.normal(cx, r / 3), rng.normal(cy, r / 3)
        pts.append((int(np.clip(round(x), 0, w - 1)), int(np.clip(round(y), 0, h - 1))))
    fix = FixationSet(np.array(pts), w, h)
    return img, fixations_to_map(fix, blur_sigma), fix, objects


def synthetic_dataset(count, resolution=(48, 64), center_bias_strength=0.7, seed=0, **kw) -> Dataset:
    """``count`` samples at ``resolution = (height, width)``, reproducible from ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = resolution
    rng = np.random.default_rng(seed)
    images, maps, fixes = [], [], []
    for _ in range(count):
        img, gt, fix, _ = synthetic_sample(rng, h, w, center_bias_strength, **kw)
        # quantise to the 8-bit image / 16-bit map file depths
        images.append(np.round(img * 255) / 255)
        maps.append(np.round(gt * 65535) / 65535)
        fixes.append(fix)
    return Dataset(np.stack(images), np.stack(maps), fixes, [f"{k:05d}" for k in range(count)])
