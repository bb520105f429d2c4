"""Communication ledger, per-round records, cost-to-target and auditors.

Transfers are counted in whole models. Per-round charges:

=============  ==========================================================
fedavg/fedprox 2 * |sampled|   (cloud -> device, device -> cloud)
fedsr          2 * M (cloud <-> edge) + sum_m |ring_m| edge -> device
               + sum_m |ring_m| * R device -> device
hierfavg       2 * M (cloud <-> edge)
               + edge_period * 2 * |sampled| (edge <-> device)
ring           |ring| * R device -> device + 1 device -> cloud
=============  ==========================================================
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import edge_statistic
from .errors import ContractViolation

LINKS = ("cloud_to_edge", "edge_to_cloud", "cloud_to_device", "device_to_cloud",
         "edge_to_device", "device_to_edge", "device_to_device")

METRICS_HEADER = ("round", "accuracy", "loss", "lr", "cum_transfers")

NOT_REACHED = "not reached"


@dataclass
class CommLedger:
    cloud_to_edge: int = 0
    edge_to_cloud: int = 0
    cloud_to_device: int = 0
    device_to_cloud: int = 0
    edge_to_device: int = 0
    device_to_edge: int = 0
    device_to_device: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def total(self):
        return sum(getattr(self, k) for k in LINKS)

    def add(self, **counts):
        for k, v in counts.items():
            if k not in LINKS:
                raise ContractViolation(f"unknown link type {k!r}")
            if v < 0:
                raise ContractViolation(f"negative transfer count for {k}: {v}")
            setattr(self, k, getattr(self, k) + int(v))
        self.history.append({k: int(v) for k, v in counts.items()})

    def counters(self):
        return {k: getattr(self, k) for k in LINKS}


def round_charge(algorithm, plan, ring_rounds=1, edge_period=1):
    """Transfers for one round of ``algorithm``, by link type."""
    n_sampled = len(plan.sampled)
    if n_sampled == 0:
        raise ContractViolation("round with no sampled devices")
    M = len(plan.rings)
    if algorithm in ("fedavg", "fedprox"):
        return {"cloud_to_device": n_sampled, "device_to_cloud": n_sampled}
    if algorithm == "fedsr":
        ring_total = sum(len(r) for r in plan.rings)
        return {"cloud_to_edge": M, "edge_to_cloud": M,
                "edge_to_device": ring_total,
                "device_to_device": ring_total * ring_rounds}
    if algorithm == "hierfavg":
        return {"cloud_to_edge": M, "edge_to_cloud": M,
                "edge_to_device": edge_period * n_sampled,
                "device_to_edge": edge_period * n_sampled}
    if algorithm == "ring":
        return {"device_to_device": sum(len(r) for r in plan.rings) * ring_rounds,
                "device_to_cloud": 1}
    raise ContractViolation(f"unknown algorithm {algorithm!r}")


def charge_round(ledger, algorithm, plan, ring_rounds=1, edge_period=1):
    ledger.add(**round_charge(algorithm, plan, ring_rounds, edge_period))
    return ledger


@dataclass(frozen=True)
class RoundRecord:
    round: int
    accuracy: float
    loss: float
    lr: float
    cum_transfers: int
    edge_distances: tuple = ()


def cost_to_target(records, target_accuracy):
    """Cumulative transfers at the first round reaching the target, else ``None``."""
    for r in records:
        if r.accuracy >= target_accuracy:
            return r.cum_transfers
    return None


def audit_convergence_condition(grouping, partition):
    """``|E| = sum_m (|D_m|/|D|)**2`` and whether it meets ``|E| <= 1/2``."""
    value = edge_statistic(grouping, partition)
    return {"value": value, "passes": value <= 0.5}


def audit_step_sizes(schedule):
    """Check the vanishing / non-summable / square-summable step conditions.

    Decided analytically from the schedule kind, not by partial sums.
    """
    kind = schedule.kind
    if kind == "harmonic":
        checks = {"vanishing": True, "sum_diverges": True, "square_summable": True}
    elif kind == "constant":
        checks = {"vanishing": False, "sum_diverges": True, "square_summable": False}
    elif kind == "cosine":
        # finite horizon: the schedule stops at T, so the sum is finite
        checks = {"vanishing": schedule.lr_final == 0, "sum_diverges": False,
                  "square_summable": True}
    else:
        raise ContractViolation(f"unknown schedule kind {kind!r}")
    failing = [k for k, ok in checks.items() if not ok]
    return {**checks, "passes": not failing, "failing": failing}


def audit_lemma(w_glob_t, w_glob_next, y_ref, edge_fractions, ring_sizes, lr, c_est,
                loss_t, loss_y, a=None):
    """Evaluate both sides of the one-round distance bound for FedSR.

    lhs = ||w_{t+1} - y||^2
    rhs = 2 * sum_m p_m^2 * (||w_t - y||^2 + lr^2 |I_m|^2 c^2)
          - 4 a lr (L(w_t) - L(y))

    with ``p_m = |D_m| / |D|`` and ``a = min_m p_m`` unless given.
    """
    p = np.asarray(edge_fractions, dtype=np.float64)
    q = np.asarray(ring_sizes, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractViolation("edge_fractions and ring_sizes differ in length")
    if a is None:
        a = float(p.min())
    lr, c_est = np.float64(lr), np.float64(c_est)
    # a diverging run overflows to inf here; the model layer reports it
    with np.errstate(over="ignore", invalid="ignore"):
        dist_t = np.sum((np.asarray(w_glob_t) - y_ref) ** 2)
        lhs = float(np.sum((np.asarray(w_glob_next) - y_ref) ** 2))
        rhs = float(2.0 * np.sum(p ** 2 * (dist_t + lr ** 2 * q ** 2 * c_est ** 2))
                    - 4.0 * a * lr * (loss_t - loss_y))
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs}


class LemmaAuditor:
    """Collects per-round audit inputs; re-audits once ``c`` is final.

    ``c_est`` only ever grows: it is the largest gradient norm observed so
    far. Each round is first audited with the running value; ``finalize``
    repeats every audit with the run's final estimate.
    """

    def __init__(self):
        self.c_est = 0.0
        self.rounds = []

    def observe_gradient_bound(self, c):
        self.c_est = max(self.c_est, float(c))

    def record(self, round_index, w_t, w_next, y_ref, edge_fractions, ring_sizes, lr,
               loss_t, loss_y):
        entry = dict(round=round_index, w_t=np.array(w_t), w_next=np.array(w_next),
                     y_ref=np.array(y_ref), edge_fractions=list(edge_fractions),
                     ring_sizes=list(ring_sizes), lr=lr, loss_t=loss_t, loss_y=loss_y)
        res = audit_lemma(w_t, w_next, y_ref, edge_fractions, ring_sizes, lr, self.c_est,
                          loss_t, loss_y)
        entry["online"] = {**res, "c_est": self.c_est}
        self.rounds.append(entry)
        return entry["online"]

    def finalize(self):
        log = []
        for e in self.rounds:
            res = audit_lemma(e["w_t"], e["w_next"], e["y_ref"], e["edge_fractions"],
                              e["ring_sizes"], e["lr"], self.c_est, e["loss_t"], e["loss_y"])
            log.append({"round": e["round"], **res, "c_est": self.c_est,
                        "holds_online": e["online"]["holds"],
                        "c_est_online": e["online"]["c_est"]})
        return log

    @staticmethod
    def hold_rate(log):
        return sum(r["holds"] for r in log) / len(log) if log else 1.0


def _fmt(x):
    return repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([str(int(r.round)), _fmt(r.accuracy), _fmt(r.loss), _fmt(r.lr),
                        str(int(r.cum_transfers))])


def read_metrics_csv(path):
    """Parse a metrics CSV back into ``RoundRecord`` objects."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty metrics file") from None
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rnd, acc, loss, lr, cum = row
                records.append(RoundRecord(int(rnd), float(acc), float(loss), float(lr),
                                           int(cum)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row}: {exc}") from None
    return records


def summarize(records, targets=(), charges=None):
    accs = [r.accuracy for r in records]
    summary = {
        "final_accuracy": accs[-1] if accs else None,
        "best_accuracy": max(accs) if accs else None,
        "cost_to_targets": {
            str(t): (c if (c := cost_to_target(records, t)) is not None else NOT_REACHED)
            for t in targets
        },
    }
    if charges is not None:
        summary["transfer_counting"] = charges
    return summary


def emit_metrics(records, path, summary_path=None, targets=(), charges=None):
    """Write the metrics CSV and a JSON summary next to it."""
    write_metrics_csv(records, path)
    if summary_path is None:
        summary_path = str(path).rsplit(".", 1)[0] + "_summary.json"
    summary = summarize(records, targets, charges)
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary
