"""
Correlation volumes and feature fusion
======================================

A local correlation volume holds one channel per displacement d inside a
(2r+1) x (2r+1) window: channel d at pixel x is <m0(x), m1(x + d)> / C.
If the t1 map is the t0 map moved one pixel right, the peak sits at d = (0, +1).
"""

import numpy as np

from terdnet.correlation import FeatureFusion, displacements, global_correlation, local_correlation
from terdnet.encoder import FeaturePyramid
from terdnet.tensor import Tensor

rng = np.random.default_rng(1)
m0 = rng.standard_normal((1, 8, 6, 6))
m1 = np.roll(m0, 1, axis=3)  # m1(y, x) = m0(y, x - 1)

vol = local_correlation(Tensor(m0), Tensor(m1), radius=1).data
disp = displacements(1)
best = [disp[k] for k in vol[0, :, 2:4, 2:4].reshape(len(disp), -1).argmax(axis=0)]
print("displacements:", disp)
print("best displacement at interior pixels:", best)

# the global volume compares every pixel with every other one
g = global_correlation(Tensor(m0), Tensor(m0)).data
print("global volume shape:", g.shape, "diagonal is mean square:",
      np.allclose(g[0].reshape(36, 36).diagonal(), (m0[0] ** 2).mean(axis=0).reshape(-1)))

# fusion stacks the reduced maps and the volume per pyramid level; the
# provenance list says which channel came from where
levels = lambda a: FeaturePyramid([Tensor(a) for _ in range(4)])
fusion = FeatureFusion(8, reduced_channels=4, radius=1, rng=np.random.default_rng(0), dtype=np.float64)
fused = fusion(levels(m0), levels(m1))
print("fused channels:", fused.channels)
print("first level provenance:", sorted(set(fused.provenance[:4 + 4 + 9])))
