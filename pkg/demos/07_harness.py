"""
Config files, output directories and the CLI
============================================

The harness reads a JSON config, writes metrics.csv, a summary, the
partition, every round plan and a manifest. The same is available as
``fedsr run --config exp.json``.
"""

import json
import tempfile
from pathlib import Path

from fedsr.harness import compare_runs, format_table, parse_config, run_experiment

tmp = Path(tempfile.mkdtemp())
for algo in ("fedsr", "fedavg"):
    (tmp / f"{algo}.json").write_text(json.dumps({
        "name": algo, "algorithm": algo, "seed": 3,
        "dataset": {"kind": "synthetic", "n_train": 1000, "n_test": 300, "d": 16, "n_classes": 5},
        "K": 10, "M": 2, "rounds": 20, "model": {"kind": "mlp", "hidden": [32]},
        "partition": {"scheme": "dirichlet", "alpha": 0.3}, "targets": [0.6, 0.8],
        "lr_schedule": {"kind": "cosine", "lr0": 0.05, "lr_final": 1e-4},
    }, indent=2))
    run_experiment(parse_config(tmp / f"{algo}.json"), tmp / algo)

print(sorted(p.name for p in (tmp / "fedsr").iterdir()))
print(format_table(compare_runs([tmp / a / "metrics.csv" for a in ("fedsr", "fedavg")],
                                targets=[0.6, 0.8])))

# %%
# A typo is reported with its line and a suggestion.
(tmp / "typo.json").write_text('{\n  "dataset": {"kind": "synthetic"},\n  "K": 4,\n'
                               '  "rounds": 1,\n  "learningrate": 0.1\n}')
try:
    parse_config(tmp / "typo.json")
except Exception as exc:
    print(type(exc).__name__, exc)
