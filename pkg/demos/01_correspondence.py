"""Sample a reference/query view pair and print the exact patch mapping.

Shows how h(i) and the valid set Omega react to crops, rescaling and flips.
Run: python3 demos/01_correspondence.py
"""
import numpy as np

from patchpos.views import (RasterImage, compute_correspondence, overlap_matrix,
                            sample_query_views, sample_reference_view)

rng = np.random.default_rng(42)
image = RasterImage(rng.standard_normal((3, 128, 128)).astype(np.float32),
                    ["B2", "B3", "B4"])

ref = sample_reference_view(image, rng, out_size=64, patch=8)
print(f"reference: crop {ref.height}x{ref.width} at ({ref.top},{ref.left}), "
      f"flip={ref.hflip}, grid {ref.grid_h}x{ref.grid_w} -> {ref.n_patches} patches")

for qi, q in enumerate(sample_query_views(image, ref, 3, rng, out_size=32, patch=8)):
    corr = compute_correspondence(q, ref)
    counts = overlap_matrix(q, ref)
    print(f"\nquery {qi}: crop {q.height}x{q.width} at ({q.top},{q.left}), flip={q.hflip}")
    print(f"  |Omega| = {corr.omega.size} of {q.n_patches}")
    print("  h on the query grid (-1 = no overlap):")
    for r in range(q.grid_h):
        row = corr.h[r * q.grid_w:(r + 1) * q.grid_w]
        print("   ", " ".join(f"{v:4d}" for v in row))
    i = int(corr.omega[0]) if corr.omega.size else None
    if i is not None:
        print(f"  patch {i}: {counts[i, corr.h[i]]} shared source pixel centers "
              f"with reference patch {corr.h[i]}")
