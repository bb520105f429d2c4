"""Config-driven experiment runner.

Seeding
-------
Every random stream is ``numpy.random.default_rng(SeedSequence(master_seed,
spawn_key=(crc32(name), *index)))``. Streams used by a run:

``data``            synthetic generation and train/test split
``partition``       device partition
``edges``           static device-to-edge assignment
``init``            initial model
``device/k``        local mini-batch shuffling of device ``k``
``topology/t``      device sampling and ring order of round ``t``
"""

import copy
import csv
import difflib
import json
import os
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms import AlgoConfig, Federation, LrSchedule, estimate_gradient_bound, lr_at, run_round
from .data import (EdgeGrouping, generate_synthetic, load_idx, partition_dirichlet,
                   partition_iid, partition_pathological, train_test_split)
from .errors import ConfigError, FedSRError, RunError
from .metrics import (NOT_REACHED, LemmaAuditor, RoundRecord, audit_convergence_condition,
                      audit_step_sizes, cost_to_target, emit_metrics, read_metrics_csv,
                      round_charge)
from .model import evaluate, linear_softmax, mlp
from .topology import assign_edges, plan_round, sample_devices, single_ring_plan

SCHEMA_VERSION = 1
OUTPUT_ENV = "FEDSR_OUTPUT_DIR"


class SeedStreams:
    """Named, independent RNG streams derived from one master seed."""

    def __init__(self, master_seed):
        self.master_seed = int(master_seed) % 2 ** 64

    def get(self, name, *index):
        key = (zlib.crc32(name.encode()), *(int(i) for i in index))
        return np.random.default_rng(np.random.SeedSequence(self.master_seed, spawn_key=key))

    def devices(self, K):
        return [self.get("device", k) for k in range(K)]


def seed_streams(master_seed):
    return SeedStreams(master_seed)


# ---------------------------------------------------------------- config

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "model": {"kind": "mlp", "hidden": [200, 200]},
    "partition": {"scheme": "iid"},
    "algorithm": "fedsr",
    "local_epochs": 1,
    "ring_rounds": 1,
    "mu": 0.01,
    "edge_period": 1,
    "batch_size": 32,
    "momentum": 0.5,
    "lr_schedule": {"kind": "cosine", "lr0": 0.01, "lr_final": 1e-5},
    "sample_fraction": 1.0,
    "seed": 0,
    "output_dir": None,
    "targets": [],
    "workers": 1,
    "audit": None,
}
REQUIRED = ("dataset", "K", "rounds")
TOP_KEYS = set(DEFAULTS) | set(REQUIRED) | {"M", "name"}

# misspellings a plain similarity match does not catch
ALIASES = {"learningrate": "lr_schedule", "learning_rate": "lr_schedule", "lr": "lr_schedule",
           "epochs": "local_epochs", "E": "local_epochs", "R": "ring_rounds",
           "T": "rounds", "fraction": "sample_fraction", "num_devices": "K",
           "num_edges": "M", "batchsize": "batch_size"}

DATASET_KEYS = {
    "synthetic": {"kind", "n_train", "n_test", "d", "n_classes", "class_separation", "noise"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels",
            "n_classes", "train_subset", "test_subset"},
}
PARTITION_KEYS = {"iid": {"scheme"}, "pathological": {"scheme", "xi"},
                  "dirichlet": {"scheme", "alpha"}}
SCHEDULE_KEYS = {"cosine": {"kind", "lr0", "lr_final"}, "harmonic": {"kind", "lr0"},
                 "constant": {"kind", "lr0"}}
MODEL_KEYS = {"mlp": {"kind", "hidden"}, "linear": {"kind"}}


@dataclass
class ExperimentConfig:
    dataset: dict
    K: int
    M: int
    rounds: int
    model: dict
    partition: dict
    algo: AlgoConfig
    lr_schedule: dict
    sample_fraction: float
    seed: int
    output_dir: str = None
    targets: list = field(default_factory=list)
    workers: int = 1
    audit: bool = None
    name: str = None
    raw: dict = field(default_factory=dict, repr=False)

    def schedule(self):
        s = self.lr_schedule
        return LrSchedule(s["kind"], s["lr0"], s.get("lr_final", 0.0),
                          max(self.rounds, 1) if s["kind"] == "cosine" else None)

    def resolved(self):
        """Fully resolved config as a JSON-compatible dict."""
        out = copy.deepcopy(self.raw)
        out["seed"] = self.seed
        out["output_dir"] = self.output_dir
        return out


class _Locator:
    """Finds the line of a key in the raw JSON text for error messages."""

    def __init__(self, text, source):
        self.lines = text.splitlines()
        self.source = source

    def line_of(self, key):
        pat = re.compile(r'"%s"\s*:' % re.escape(str(key)))
        for i, line in enumerate(self.lines, start=1):
            if pat.search(line):
                return i
        return None

    def error(self, key, msg):
        line = self.line_of(key) if key is not None else None
        where = f"{self.source}:{line}" if line else str(self.source)
        return ConfigError(f"{where}: {msg}")


def _suggest(key, choices):
    if key in ALIASES and ALIASES[key] in choices:
        return ALIASES[key]
    lowered = {c.lower().replace("_", ""): c for c in choices}
    k = key.lower().replace("_", "")
    if k in lowered:
        return lowered[k]
    close = difflib.get_close_matches(key, sorted(choices), n=1, cutoff=0.6)
    return close[0] if close else None


def _check_keys(obj, allowed, loc, context):
    for key in obj:
        if key not in allowed:
            hint = _suggest(key, allowed)
            msg = f"unknown key {key!r} in {context}"
            if hint:
                msg += f"; did you mean {hint!r}?"
            raise loc.error(key, msg)


def _int(obj, key, loc, minimum=None):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise loc.error(key, f"{key} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise loc.error(key, f"{key} must be >= {minimum}, got {v}")
    return v


def _num(obj, key, loc, positive=False, nonneg=False):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise loc.error(key, f"{key} must be a number, got {v!r}")
    if positive and not v > 0:
        raise loc.error(key, f"{key} must be > 0, got {v}")
    if nonneg and not v >= 0:
        raise loc.error(key, f"{key} must be >= 0, got {v}")
    return float(v)


def _kinded(obj, key, kind_key, table, loc):
    if not isinstance(obj, dict):
        raise loc.error(key, f"{key} must be a JSON object")
    kind = obj.get(kind_key)
    if kind not in table:
        raise loc.error(key, f"{key}.{kind_key} must be one of {sorted(table)}, got {kind!r}")
    _check_keys(obj, table[kind], loc, key)
    return kind


def config_from_dict(raw, source="<config>", text=None):
    """Validate a config mapping, apply defaults and build an ``ExperimentConfig``."""
    loc = _Locator(text if text is not None else json.dumps(raw, indent=1), source)
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    _check_keys(raw, TOP_KEYS, loc, "config")
    for key in REQUIRED:
        if key not in raw:
            raise loc.error(None, f"missing required key {key!r}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(raw))
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise loc.error("schema_version",
                        f"schema_version must be {SCHEMA_VERSION}, got {cfg['schema_version']!r}")

    ds = cfg["dataset"]
    kind = _kinded(ds, "dataset", "kind", DATASET_KEYS, loc)
    if kind == "synthetic":
        ds = {"n_train": 2000, "n_test": 500, "d": 20, "n_classes": 10,
              "class_separation": 3.0, "noise": 1.0, **ds}
        for k in ("n_train", "n_test", "d", "n_classes"):
            _int(ds, k, loc, minimum=1 if k != "d" else 2)
        _num(ds, "class_separation", loc, nonneg=True)
        _num(ds, "noise", loc, positive=True)
    else:
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not isinstance(ds.get(k), str):
                raise loc.error("dataset", f"dataset.{k} must be a file path")
        ds.setdefault("n_classes", 10)
    cfg["dataset"] = ds

    K = _int(cfg, "K", loc, minimum=1)
    cfg.setdefault("M", 1)
    M = _int(cfg, "M", loc, minimum=1)
    if M > K:
        raise loc.error("M", f"M={M} edges exceed K={K} devices")
    rounds = _int(cfg, "rounds", loc, minimum=0)

    mdl = cfg["model"]
    mkind = _kinded(mdl, "model", "kind", MODEL_KEYS, loc)
    if mkind == "mlp":
        hidden = mdl.get("hidden", [200, 200])
        if not isinstance(hidden, list) or not all(
                isinstance(h, int) and not isinstance(h, bool) and h > 0 for h in hidden):
            raise loc.error("hidden", "model.hidden must be a list of positive integers")
        mdl["hidden"] = hidden

    part = cfg["partition"]
    scheme = _kinded(part, "partition", "scheme", PARTITION_KEYS, loc)
    if scheme == "pathological":
        if "xi" not in part:
            raise loc.error("partition", "pathological partition needs 'xi'")
        _int(part, "xi", loc, minimum=1)
    elif scheme == "dirichlet":
        if "alpha" not in part:
            raise loc.error("partition", "dirichlet partition needs 'alpha'")
        _num(part, "alpha", loc, positive=True)

    sched = cfg["lr_schedule"]
    skind = _kinded(sched, "lr_schedule", "kind", SCHEDULE_KEYS, loc)
    if "lr0" not in sched:
        raise loc.error("lr_schedule", "lr_schedule needs 'lr0'")
    _num(sched, "lr0", loc, nonneg=True)
    if skind == "cosine":
        sched.setdefault("lr_final", 1e-5)
        _num(sched, "lr_final", loc, nonneg=True)

    if cfg["algorithm"] not in ("fedsr", "fedavg", "fedprox", "hierfavg", "ring"):
        raise loc.error("algorithm", f"algorithm must be one of fedsr, fedavg, fedprox, "
                                     f"hierfavg, ring; got {cfg['algorithm']!r}")
    _int(cfg, "local_epochs", loc, minimum=0)
    _int(cfg, "ring_rounds", loc, minimum=1)
    _int(cfg, "edge_period", loc, minimum=1)
    _int(cfg, "batch_size", loc, minimum=1)
    _int(cfg, "workers", loc, minimum=1)
    _num(cfg, "mu", loc, nonneg=True)
    _num(cfg, "momentum", loc, nonneg=True)
    frac = _num(cfg, "sample_fraction", loc, positive=True)
    if frac > 1:
        raise loc.error("sample_fraction", f"sample_fraction must be <= 1, got {frac}")
    if cfg["algorithm"] in ("fedsr", "hierfavg") and -(-frac * K // 1) < M:
        raise loc.error("sample_fraction",
                        f"sample_fraction={frac} of K={K} cannot keep all M={M} edges busy")
    _int(cfg, "seed", loc)
    if not isinstance(cfg["targets"], list):
        raise loc.error("targets", "targets must be a list of accuracies")
    if cfg["audit"] is not None and not isinstance(cfg["audit"], bool):
        raise loc.error("audit", "audit must be true, false or null")

    algo = AlgoConfig(cfg["algorithm"], cfg["local_epochs"], cfg["ring_rounds"],
                      float(cfg["mu"]) if cfg["algorithm"] == "fedprox" else 0.0,
                      cfg["edge_period"], cfg["batch_size"], float(cfg["momentum"]))
    return ExperimentConfig(
        dataset=ds, K=K, M=M, rounds=rounds, model=mdl, partition=part, algo=algo,
        lr_schedule=sched, sample_fraction=frac, seed=cfg["seed"],
        output_dir=cfg["output_dir"], targets=[float(t) for t in cfg["targets"]],
        workers=cfg["workers"], audit=cfg["audit"], name=cfg.get("name"), raw=cfg)


def parse_config(path):
    """Read a strict-JSON experiment config from ``path``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return config_from_dict(raw, str(path), text)


# ---------------------------------------------------------------- running

def load_data(config, streams):
    ds = config.dataset
    if ds["kind"] == "synthetic":
        full = generate_synthetic(ds["n_train"] + ds["n_test"], ds["d"], ds["n_classes"],
                                  ds["class_separation"], streams.get("data"), ds["noise"])
        return train_test_split(full, ds["n_test"], streams.get("data", 1))
    train = load_idx(ds["train_images"], ds["train_labels"], ds["n_classes"])
    test = load_idx(ds["test_images"], ds["test_labels"], ds["n_classes"])
    rng = streams.get("data")
    if ds.get("train_subset"):
        train = train.subset(np.sort(rng.permutation(len(train))[:ds["train_subset"]]))
    if ds.get("test_subset"):
        test = test.subset(np.sort(rng.permutation(len(test))[:ds["test_subset"]]))
    return train, test


def make_partition(config, train, rng):
    p = config.partition
    if p["scheme"] == "iid":
        return partition_iid(train, config.K, rng)
    if p["scheme"] == "pathological":
        return partition_pathological(train, config.K, p["xi"], rng)
    return partition_dirichlet(train, config.K, p["alpha"], rng)


def make_model(config, d_in, n_classes):
    if config.model["kind"] == "linear":
        return linear_softmax(d_in, n_classes)
    return mlp(d_in, config.model["hidden"], n_classes)


@dataclass
class RunManifest:
    config: dict
    partition: dict
    edge_audit: dict
    step_size_audit: dict
    transfer_counting: dict
    files: dict
    version: str = __version__
    lemma_hold_rate: float = None

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class RunResult:
    manifest: RunManifest
    records: list
    audit_log: list
    plans: list
    final_params: np.ndarray = None
    federation: Federation = None


def setup(config):
    """Build data, partition, grouping, model and federation for a config."""
    streams = seed_streams(config.seed)
    train, test = load_data(config, streams)
    partition = make_partition(config, train, streams.get("partition"))
    grouping = assign_edges(config.K, config.M, streams.get("edges"))
    model = make_model(config, train.dim, train.n_classes)
    fed = Federation(model, train, partition, config.algo, streams.devices(config.K),
                     workers=config.workers)
    return streams, train, test, partition, grouping, model, fed


def _train_loss(model, w, train, partition):
    ix = np.concatenate(partition.device_indices)
    return evaluate(model, w, train.inputs[ix], train.labels[ix])[1]


def run_experiment(config, out_dir=None, write=True):
    """Run ``config.rounds`` rounds and (optionally) write all outputs.

    Outputs in ``out_dir``: ``metrics.csv``, ``metrics_summary.json``,
    ``manifest.json``, ``partition.json``, ``plans.jsonl`` and, when
    auditing, ``audit.jsonl``.
    """
    algo = config.algo.algorithm
    audit = config.audit if config.audit is not None else algo == "fedsr"
    try:
        streams, train, test, partition, grouping, model, fed = setup(config)
    except FedSRError as exc:
        raise RunError(-1, "setup", exc) from exc
    schedule = config.schedule()
    device_sizes = partition.device_sizes

    w = model.init_params(streams.get("init"))
    acc, loss = evaluate(model, w, test.inputs, test.labels)
    records = [RoundRecord(-1, acc, loss, 0.0, 0)]
    plans = []
    auditor = LemmaAuditor() if audit else None
    if auditor is not None:
        best_w, best_loss = w, _train_loss(model, w, train, partition)

    for t in range(config.rounds):
        phase = "plan"
        try:
            lr = lr_at(schedule, t)
            rng = streams.get("topology", t)
            if algo == "ring":
                sampled = sample_devices(config.K, config.sample_fraction, rng)
                plan = single_ring_plan(sampled, rng, device_sizes, t)
            else:
                g = grouping if algo in ("fedsr", "hierfavg") else _flat_grouping(config.K)
                plan = plan_round(g, device_sizes, config.sample_fraction, rng, t)
            plans.append(plan)
            if auditor is not None:
                phase = "audit-bound"
                auditor.observe_gradient_bound(
                    estimate_gradient_bound(model, train, partition, [w], plan.sampled))
                loss_t = _train_loss(model, w, train, partition)
            phase = "train"
            w_next = run_round(fed, w, plan, lr)
            if auditor is not None:
                phase = "audit"
                total = sum(plan.edge_weights)
                auditor.record(t, w, w_next, best_w, [e / total for e in plan.edge_weights],
                               [len(r) for r in plan.rings], lr, loss_t, best_loss)
                loss_next = _train_loss(model, w_next, train, partition)
                if loss_next < best_loss:
                    best_w, best_loss = w_next, loss_next
            w = w_next
            phase = "evaluate"
            acc, loss = evaluate(model, w, test.inputs, test.labels)
        except FedSRError as exc:
            raise RunError(t, phase, exc) from exc
        records.append(RoundRecord(t, acc, loss, lr, fed.ledger.total))

    audit_log = auditor.finalize() if auditor is not None else []
    counting = {algo: _CHARGE_DOCS[algo]}
    manifest = RunManifest(
        config=config.resolved(),
        partition=partition.to_json(config.seed),
        edge_audit=audit_convergence_condition(grouping, partition),
        step_size_audit=audit_step_sizes(schedule),
        transfer_counting=counting,
        files={},
        lemma_hold_rate=LemmaAuditor.hold_rate(audit_log) if audit else None,
    )
    result = RunResult(manifest, records, audit_log, plans, w, fed)
    if write:
        _write_outputs(result, config, out_dir)
    return result


def _flat_grouping(K):
    return EdgeGrouping(np.zeros(K, dtype=np.int64), 1)


_CHARGE_DOCS = {
    "fedavg": "2*|sampled| per round (cloud->device, device->cloud)",
    "fedprox": "2*|sampled| per round (cloud->device, device->cloud)",
    "fedsr": "2*M cloud<->edge + sum|ring| edge->device + sum|ring|*R device->device",
    "hierfavg": "2*M cloud<->edge + edge_period*2*|sampled| edge<->device",
    "ring": "|ring|*R device->device + 1 device->cloud",
}



def resolve_out_dir(config, out_dir=None):
    return Path(out_dir or config.output_dir or os.environ.get(OUTPUT_ENV) or "runs")


def _write_outputs(result, config, out_dir):
    out = resolve_out_dir(config, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"metrics": "metrics.csv", "summary": "metrics_summary.json",
             "partition": "partition.json", "plans": "plans.jsonl",
             "manifest": "manifest.json"}
    if result.audit_log:
        files["audit"] = "audit.jsonl"
    result.manifest.files = files
    emit_metrics(result.records, out / files["metrics"], out / files["summary"],
                 config.targets, result.manifest.transfer_counting)
    with open(out / files["partition"], "w") as f:
        json.dump(result.manifest.partition, f)
    with open(out / files["plans"], "w") as f:
        for p in result.plans:
            f.write(json.dumps(p.to_json()) + "\n")
    if result.audit_log:
        with open(out / files["audit"], "w") as f:
            for r in result.audit_log:
                f.write(json.dumps(r) + "\n")
    with open(out / files["manifest"], "w") as f:
        json.dump(result.manifest.to_json(), f, indent=2, sort_keys=True)


def replay_ledger(plans, algorithm, ring_rounds=1, edge_period=1):
    """Total transfers implied by a plan log; must equal the run's ledger."""
    return sum(sum(round_charge(algorithm, p, ring_rounds, edge_period).values())
               for p in plans)


def audit_config(config):
    """Partition and edge-weight audit without training."""
    streams = seed_streams(config.seed)
    train, _ = load_data(config, streams)
    partition = make_partition(config, train, streams.get("partition"))
    grouping = assign_edges(config.K, config.M, streams.get("edges"))
    return {"partition": partition.to_json(config.seed),
            "edge_sizes": grouping.edge_sizes(partition).tolist(),
            "edge_statistic": audit_convergence_condition(grouping, partition),
            "step_sizes": audit_step_sizes(config.schedule())}


# ---------------------------------------------------------------- comparison

def compare_runs(paths, targets=()):
    """One row per metrics CSV: final/best accuracy and cost to each target."""
    if not paths:
        raise ValueError("compare_runs needs at least one metrics file")
    rows = []
    for path in paths:
        try:
            records = read_metrics_csv(path)
        except (OSError, ValueError) as exc:
            raise ValueError(f"{path}: cannot read metrics: {exc}") from None
        if not records:
            raise ValueError(f"{path}: metrics file has no rows")
        row = {"run": str(path),
               "final_accuracy": records[-1].accuracy,
               "best_accuracy": max(r.accuracy for r in records)}
        for t in targets:
            c = cost_to_target(records, t)
            row[f"cost@{t}"] = NOT_REACHED if c is None else c
        rows.append(row)
    return rows


def format_table(rows):
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_table_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _cell(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)
