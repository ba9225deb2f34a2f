"""Cascadic Mumford-Shah segmentation of synthetic phantoms, clean and noisy.

    python3 demos/cms_on_phantoms.py [n_phantoms] [size]
"""

import sys
import time

from tumorseg.harness import CmsMethod, make_cases, robustness_sweep

n = int(sys.argv[1]) if len(sys.argv) > 1 else 4
size = int(sys.argv[2]) if len(sys.argv) > 2 else 48

print(f"{n} phantoms at {size}^3: brain ellipsoid, tumor of necrosis/core, enhancing rim, edema")
cases = make_cases(n, (size,) * 3)
t = time.perf_counter()
rep = robustness_sweep({"cms": CmsMethod()}, cases, [0.0, 0.02, 0.04])
print(f"segmented {3 * n} volumes in {time.perf_counter() - t:.1f} s\n")
print(rep.table())
print("\nThe cartoon model averages over regions, so added noise mostly washes out:")
for s in (0.02, 0.04):
    print(f"  Complete Dice drop at sigma={s}: {rep.mean('cms', 0.0) - rep.mean('cms', s):+.4f}")
