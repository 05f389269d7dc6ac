"""
Parameter and FLOP accounting, and a small ablation
===================================================

The cost report counts parameters per stage and FLOPs (two per
multiply-accumulate) for one forward pass. Decoder FLOPs grow linearly
with the number of iterations M, since each iteration repeats the same
three-gate step. The ablation part trains one tiny model per decoder
variant on a shared budget and held-out set.
"""

import dataclasses

from terdnet.accounting import cost_report
from terdnet.config import RunConfig
from terdnet.experiments import run_ablation
from terdnet.model import TERDNet

print(cost_report(TERDNet(RunConfig()), 64, 64).table())
print()

for m in (3, 5, 10):
    rep = cost_report(TERDNet(dataclasses.replace(RunConfig(), iters=m)), 64, 64)
    print(f"M = {m:2d}: decoder {rep.row('decoder').flops / 1e9:.4f} GFLOPs, total {rep.total_flops / 1e9:.4f}")
print()

tiny = RunConfig(hidden=16, gate_channels=16, steps=60, eval_pairs=16)
table = run_ablation(tiny, "gru-variant", seeds=(0,),
                     on_cell=lambda c: print(f"  {c.value:<12s} F1 {c.f1:.3f} ({c.seconds:.1f}s)"))
print(table.text())
