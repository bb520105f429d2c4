"""
Counting model transfers
========================

One round with 20 devices: flat FedAvg, FedSR with five rings of four
devices and five ring passes, HierFAVG with five edge periods.
"""

from fedsr.metrics import CommLedger, charge_round
from fedsr.topology import RoundPlan

everyone = tuple(range(20))
rings = tuple(tuple(range(4 * m, 4 * m + 4)) for m in range(5))

for name, plan, kw in [("fedavg", RoundPlan(0, everyone, (everyone,), (20,)), {}),
                       ("fedsr", RoundPlan(0, everyone, rings, (4,) * 5), {"ring_rounds": 5}),
                       ("hierfavg", RoundPlan(0, everyone, rings, (4,) * 5), {"edge_period": 5})]:
    ledger = charge_round(CommLedger(), name, plan, **kw)
    used = {k: v for k, v in ledger.counters().items() if v}
    print(f"{name:9s} total {ledger.total:4d}  {used}")
