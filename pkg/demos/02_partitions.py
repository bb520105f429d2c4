"""
Splitting data across devices and edges
=======================================

iid, pathological (xi shards per device) and Dirichlet(alpha) splits,
then a balanced device-to-edge map and its weight concentration.
"""

import numpy as np

from fedsr.data import (generate_synthetic, partition_dirichlet, partition_iid,
                        partition_pathological)
from fedsr.metrics import audit_convergence_condition
from fedsr.topology import assign_edges

rng = np.random.default_rng(1)
ds = generate_synthetic(2000, 8, 10, 3.0, rng)

for name, part in [("iid", partition_iid(ds, 10, rng)),
                   ("pathological xi=2", partition_pathological(ds, 10, 2, rng)),
                   ("dirichlet alpha=0.1", partition_dirichlet(ds, 10, 0.1, rng))]:
    print(f"{name:20s} classes/device {part.classes_per_device().tolist()}")

# %%
# Fewer, larger edges concentrate the weight; one edge is the flat case.
part = partition_iid(ds, 20, rng)
for M in (1, 2, 5, 10):
    res = audit_convergence_condition(assign_edges(20, M, rng), part)
    print(f"M={M:2d}  sum_m p_m^2 = {res['value']:.3f}  <= 1/2: {res['passes']}")
