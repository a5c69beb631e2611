"""
Exact against normal Wilcoxon p-values
======================================

Up to 25 non-zero differences the test uses the exact null distribution;
above that, the normal approximation with continuity correction.  This
script shows how far apart the two are just below the switch-over.
"""
import numpy as np

from medrecon_bench.analyse import wilcoxon_signed_rank

rng = np.random.default_rng(1)
for n in (8, 12, 16, 20, 25, 40):
    gaps = []
    for _ in range(200):
        pairs = [(0.0, float(x)) for x in rng.normal(0.3, 1.0, size=n)]
        exact = wilcoxon_signed_rank(pairs, method="exact").p_raw
        approx = wilcoxon_signed_rank(pairs, method="normal_approx").p_raw
        gaps.append(abs(exact - approx))
    print(f"n={n:3d}  median gap {np.median(gaps):.4f}  max gap {max(gaps):.4f}")

# ties: F1 differences are often coarse fractions, which widens the gap
pairs = [(0.0, d) for d in [0.25, 0.25, 0.5, -0.25, 0.5, 0.25, 0.75, -0.5, 0.25, 0.5, 0.25, 0.0, 0.25]]
for method in ("exact", "normal_approx"):
    o = wilcoxon_signed_rank(pairs, method=method)
    print(f"{method:14s} W={o.W:g} z={o.z_score:.3f} p={o.p_raw:.4f} r={o.r_effect:.3f}")
