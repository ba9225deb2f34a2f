"""Repairing a corrupted label map with the scribble/partition post-processor.

    python3 demos/postprocess_repair.py [corruption_fraction]
"""

import sys

import numpy as np

from tumorseg.harness import make_cases
from tumorseg.postprocess import densify, postprocess
from tumorseg.volume import all_region_dice

frac = float(sys.argv[1]) if len(sys.argv) > 1 else 0.3
case = make_cases(1, (32, 32, 32), seed0=5)[0]
rng = np.random.default_rng(0)

noisy = case.labels.copy()
flip = case.mask & (rng.random(noisy.shape) < frac)
noisy[flip] = rng.choice([0, 1, 2, 4], flip.sum())
print(f"relabelled {flip.sum()} brain voxels ({100 * frac:.0f}%) at random\n")

fmt = lambda d: "  ".join(f"{k} {v:.3f}" for k, v in d.items())
print("corrupted      ", fmt(all_region_dice(noisy, case.labels)))
dense = densify(noisy, case.volume, mask=case.mask)
print("densified      ", fmt(all_region_dice(dense, case.labels)))
full = postprocess(noisy, case.volume, mask=case.mask)
print("+ enhancing fix", fmt(all_region_dice(full, case.labels)))
