"""Saliency metrics on a toy scene, including the sharp-versus-blurred effect.

A sharp map and a heavily blurred copy rank the fixated pixels almost the
same way, so AUC barely moves, while EMD and NSS punish the spread-out mass.
"""
import numpy as np
from scipy.ndimage import gaussian_filter

from deepfix.metrics import (FixationSet, auc_borji, auc_judd, auc_shuffled, cc, emd,
                             fixations_to_map, nss, sim)

rng = np.random.default_rng(0)
h, w = 48, 64
clusters = [(15, 12), (45, 30)]
pts = np.concatenate([np.column_stack([rng.normal(cx, 2, 30), rng.normal(cy, 2, 30)])
                      for cx, cy in clusters])
pts = np.clip(np.round(pts), [0, 0], [w - 1, h - 1]).astype(int)
fix = FixationSet(pts, w, h)
truth = fixations_to_map(fix, 2.0)

sharp = fixations_to_map(fix, 3.0)
blurred = gaussian_filter(sharp, 10.0, mode="constant")
blurred = (blurred - blurred.min()) / (blurred.max() - blurred.min())

# other images' fixations for shuffled AUC: a centre-heavy pool
pool = np.clip(np.round(rng.normal([31.5, 23.5], [8, 6], (300, 2))), 0, [63, 47]).astype(int)

print(f"{'':8s}{'AUC-J':>8s}{'AUC-B':>8s}{'sAUC':>8s}{'NSS':>8s}{'CC':>8s}{'SIM':>8s}{'EMD':>8s}")
for name, m in (("sharp", sharp), ("blurred", blurred)):
    row = (auc_judd(m, fix), auc_borji(m, fix, 100, 0), auc_shuffled(m, fix, pool, 100, 0),
           nss(m, fix), cc(m, truth), sim(m, truth), emd(m, truth))
    print(f"{name:8s}" + "".join(f"{v:8.3f}" for v in row))
