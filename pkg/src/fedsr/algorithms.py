"""Ring-optimization, FedSR and the FedAvg / FedProx / HierFAVG baselines."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .metrics import CommLedger, charge_round
from .model import TrainStats, local_train, loss_and_gradient, weighted_average

ALGORITHMS = ("fedsr", "fedavg", "fedprox", "hierfavg", "ring")


@dataclass(frozen=True)
class LrSchedule:
    """Per-round learning rate.

    ``cosine`` anneals from ``lr0`` at round 0 to ``lr_final`` at round
    ``T - 1``; ``harmonic`` is ``lr0 / (1 + t)``; ``constant`` is ``lr0``.
    """

    kind: str
    lr0: float
    lr_final: float = 0.0
    T: int = None

    def __post_init__(self):
        if self.kind not in ("cosine", "harmonic", "constant"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if not self.lr0 >= 0:
            raise ContractViolation(f"lr0 must be >= 0, got {self.lr0}")
        if self.kind == "cosine" and (self.T is None or self.T < 1):
            raise ContractViolation("cosine schedule needs a horizon T >= 1")

    def __call__(self, t):
        return lr_at(self, t)


def cosine(lr0, lr_final, T):
    return LrSchedule("cosine", lr0, lr_final, T)


def harmonic(lr0):
    return LrSchedule("harmonic", lr0)


def constant(lr0):
    return LrSchedule("constant", lr0)


def lr_at(schedule, t):
    if t < 0:
        raise ContractViolation(f"round index must be >= 0, got {t}")
    if schedule.kind == "constant":
        return float(schedule.lr0)
    if schedule.kind == "harmonic":
        return schedule.lr0 / (1.0 + t)
    T = schedule.T
    if t >= T:
        raise ContractViolation(f"round {t} beyond cosine horizon T={T}")
    if T == 1:
        return float(schedule.lr0)
    return schedule.lr_final + 0.5 * (schedule.lr0 - schedule.lr_final) * (
        1.0 + math.cos(math.pi * t / (T - 1)))


@dataclass(frozen=True)
class AlgoConfig:
    algorithm: str = "fedsr"
    local_epochs: int = 1
    ring_rounds: int = 1
    mu: float = 0.0
    edge_period: int = 1
    batch_size: int = 32
    momentum: float = 0.5

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(f"unknown algorithm {self.algorithm!r}")
        if self.local_epochs < 0 or self.ring_rounds < 1 or self.mu < 0 \
                or self.edge_period < 1 or self.batch_size < 1:
            raise ContractViolation(f"invalid algorithm settings: {self}")


@dataclass
class Federation:
    """Everything a round needs: model, device data, per-device RNGs, ledger.

    Device ``k`` owns ``rngs[k]``; since no device appears in two rings of
    the same round, rings can run on worker threads without changing the
    result.
    """

    model: object
    dataset: object
    partition: object
    config: AlgoConfig
    rngs: list
    ledger: CommLedger = field(default_factory=CommLedger)
    workers: int = 1
    stats: list = None

    def __post_init__(self):
        if len(self.rngs) != self.partition.n_devices:
            raise ContractViolation(
                f"{len(self.rngs)} RNG streams for {self.partition.n_devices} devices")
        self._device_data = [(self.dataset.inputs[ix], self.dataset.labels[ix])
                             for ix in self.partition.device_indices]
        if self.stats is None:
            self.stats = [TrainStats() for _ in self._device_data]

    @property
    def device_sizes(self):
        return self.partition.device_sizes

    def device_data(self, k):
        return self._device_data[k]

    def train_device(self, k, params, lr, epochs=None, prox_center=None):
        """E epochs of local SGD on device ``k`` (FedProx term if configured)."""
        cfg = self.config
        x, y = self._device_data[k]
        mu = cfg.mu if prox_center is not None else 0.0
        return local_train(self.model, params, x, y,
                           cfg.local_epochs if epochs is None else epochs,
                           lr, cfg.batch_size, self.rngs[k], momentum=cfg.momentum,
                           prox_mu=mu, prox_center=prox_center, stats=self.stats[k])

    def map_edges(self, fn, items):
        """Apply ``fn`` to each item; results come back in input order."""
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]


def ring_pass(ring, w_init, passes, update, on_step=None):
    """Incremental pass(es) around a ring.

    Each device applies ``update(device, w)`` to its predecessor's output.
    The first device starts from ``w_init``; on later passes it continues
    from the last device's output. ``on_step(device, w_in, w_out)`` is
    called after every device update.
    """
    if len(ring) == 0:
        raise ContractViolation("empty ring")
    if passes < 1:
        raise ContractViolation(f"ring passes must be >= 1, got {passes}")
    w = w_init
    for _ in range(passes):
        for k in ring:
            w_next = update(k, w)
            if on_step is not None:
                on_step(k, w, w_next)
            w = w_next
    return w


def ring_optimization(fed, ring, w_init, lr, on_step=None):
    """R passes of local training around ``ring``, E epochs per device visit."""
    return ring_pass(ring, w_init, fed.config.ring_rounds,
                     lambda k, w: fed.train_device(k, w, lr), on_step)


def incremental_gradient(grads, x0, step, passes):
    """Cyclic incremental gradient method ``x <- x - a_t * grad_i(x)``.

    ``grads`` is a sequence of gradient callables, ``step(t)`` gives the
    step size used throughout pass ``t``.
    """
    x = np.array(x0, dtype=np.float64)
    for t in range(passes):
        a = step(t)
        for g in grads:
            x = x - a * g(x)
    return x


def fedsr_round(fed, w_glob, plan, lr, on_step=None):
    """One FedSR round: per-edge ring optimization, then data-weighted averaging."""
    def run_edge(ring):
        return ring_optimization(fed, ring, w_glob, lr, on_step)

    edge_models = fed.map_edges(run_edge, list(plan.rings))
    charge_round(fed.ledger, "fedsr", plan, ring_rounds=fed.config.ring_rounds)
    return weighted_average(zip(edge_models, plan.edge_weights))


def ring_round(fed, w_glob, plan, lr):
    """Flat ring-optimization: every sampled device in a single ring."""
    (ring,) = plan.rings
    w = ring_optimization(fed, ring, w_glob, lr)
    charge_round(fed.ledger, "ring", plan, ring_rounds=fed.config.ring_rounds)
    return w


def fedprox_local_update(fed, k, w_glob, lr):
    """Local update with proximal pull ``mu * (w - w_glob)`` toward the global model."""
    return fed.train_device(k, w_glob, lr, prox_center=w_glob)


def _average_devices(fed, w_start, devices, lr, proximal):
    devices = sorted(int(k) for k in devices)
    sizes = fed.device_sizes
    if proximal:
        trained = [fedprox_local_update(fed, k, w_start, lr) for k in devices]
    else:
        trained = [fed.train_device(k, w_start, lr) for k in devices]
    return weighted_average([(w, sizes[k]) for w, k in zip(trained, devices)])


def fedavg_round(fed, w_glob, plan, lr):
    """Every sampled device trains from ``w_glob``; the cloud averages by data size.

    With ``fed.config.algorithm == "fedprox"`` the proximal local update is used.
    """
    proximal = fed.config.algorithm == "fedprox"
    w = _average_devices(fed, w_glob, plan.sampled, lr, proximal)
    charge_round(fed.ledger, "fedprox" if proximal else "fedavg", plan)
    return w


def hierfavg_round(fed, w_glob, plan, lr, edge_period=None):
    """HierFAVG: ``edge_period`` edge-level FedAvg iterations, then cloud averaging."""
    period = fed.config.edge_period if edge_period is None else edge_period
    if period < 1:
        raise ContractViolation(f"edge_period must be >= 1, got {period}")

    def run_edge(ring):
        w_edge = w_glob
        for _ in range(period):
            w_edge = _average_devices(fed, w_edge, ring, lr, proximal=False)
        return w_edge

    edge_models = fed.map_edges(run_edge, list(plan.rings))
    charge_round(fed.ledger, "hierfavg", plan, edge_period=period)
    return weighted_average(zip(edge_models, plan.edge_weights))


ROUND_FUNCTIONS = {
    "fedsr": fedsr_round,
    "fedavg": fedavg_round,
    "fedprox": fedavg_round,
    "hierfavg": hierfavg_round,
    "ring": ring_round,
}


def run_round(fed, w_glob, plan, lr):
    return ROUND_FUNCTIONS[fed.config.algorithm](fed, w_glob, plan, lr)


def estimate_gradient_bound(model, dataset, partition, param_points, devices=None):
    """Largest full-device gradient norm over the given parameter points.

    An empirical lower bound on the constant bounding all device gradients.
    """
    points = list(param_points)
    if not points:
        raise ContractViolation("need at least one parameter point")
    devices = range(partition.n_devices) if devices is None else devices
    best = 0.0
    for k in devices:
        ix = partition.device_indices[k]
        x, y = dataset.inputs[ix], dataset.labels[ix]
        for w in points:
            _, g = loss_and_gradient(model, w, x, y)
            best = max(best, float(np.linalg.norm(g)))
    return best
