"""
The three-gate recurrent decoder
================================

Besides the reset gate r and the update gate z, the cell has a pyramid
gate p. It scales the layer-importance map f (from the Ratios-for-Reflection
block) before f joins the candidate state:

    h_new = (1 - z) * h + z * tanh(W x + U (r * h) + F (p * f))

We look at the closed forms first and then roll a random cell forward.
"""

import numpy as np

from terdnet.decoder import GruState, GruWeights, gru_cell, run_decoder
from terdnet.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 3, 4, 4)))
h = Tensor(np.tanh(rng.standard_normal((1, 6, 4, 4))))
f = Tensor(1 / (1 + np.exp(-rng.standard_normal((1, 2, 4, 4)))))

# all-zero weights: every gate is 0.5 and the candidate is 0, so h halves
w = GruWeights(3, 6, 2, "three-gate", rng=rng, dtype=np.float64)
for p in w.parameters():
    p.data[...] = 0.0
out = gru_cell(x, GruState(h, 0, f), w)
print("zero weights halve the state:", np.array_equal(out.h.data, 0.5 * h.data))

# a very negative update bias closes z and freezes the state
w = GruWeights(3, 6, 2, "three-gate", rng=rng, dtype=np.float64)
w.b_z.data[...] = -60.0
out = gru_cell(x, GruState(h, 0, f), w)
print("closed update gate, max change:", np.abs(out.h.data - h.data).max())

# with random weights the state stays inside [-1, 1] however large x gets
w = GruWeights(3, 6, 2, "three-gate", rng=rng, dtype=np.float64)
states = run_decoder(Tensor(x.data * 50), GruState(h, 0, f), w, 10)
for s in states:
    print(f"step {s.step:2d}  max |h| = {np.abs(s.h.data).max():.4f}")
