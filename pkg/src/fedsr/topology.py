"""Edge assignment, per-round device sampling and ring formation."""

import math
from dataclasses import dataclass

import numpy as np

from .data import EdgeGrouping
from .errors import ContractViolation, FedSRError


class EmptyEdgeError(FedSRError):
    """A sampled device set leaves some edge without devices."""


@dataclass(frozen=True)
class RoundPlan:
    """Who trains in round ``round`` and in which ring order.

    ``rings[m]`` is the ring of edge ``m``; ``edge_weights[m]`` is the data
    size of the devices in that ring.
    """

    round: int
    sampled: tuple
    rings: tuple
    edge_weights: tuple

    def to_json(self):
        return {
            "round": self.round,
            "sampled": list(self.sampled),
            "rings": [list(r) for r in self.rings],
            "edge_weights": list(self.edge_weights),
        }


def assign_edges(K, M, rng):
    """Random balanced device-to-edge map (edge sizes differ by at most one)."""
    if not K >= M >= 1:
        raise ContractViolation(f"need K >= M >= 1, got K={K}, M={M}")
    edges = np.arange(K) % M
    return EdgeGrouping(rng.permutation(edges), M)


def sample_size(K, fraction):
    if not 0 < fraction <= 1:
        raise ContractViolation(f"sample fraction must be in (0, 1], got {fraction}")
    return max(1, min(K, int(math.floor(fraction * K + 0.5))))


def sample_devices(K, fraction, rng, n_edges=1):
    """Uniform sample without replacement of ``round(fraction*K)`` devices."""
    size = sample_size(K, fraction)
    if math.ceil(fraction * K) < n_edges or size < n_edges:
        raise ContractViolation(
            f"fraction={fraction} of K={K} devices cannot cover {n_edges} edges")
    if size == K:
        return np.arange(K)
    return np.sort(rng.choice(K, size=size, replace=False))


def form_rings(grouping, sampled, rng, device_sizes=None, round_index=0):
    """Arrange each edge's sampled devices into one freshly shuffled ring."""
    sampled = np.sort(np.asarray(sampled, dtype=np.int64))
    if len(np.unique(sampled)) != len(sampled):
        raise ContractViolation("duplicate devices in sample")
    rings = []
    for m in range(grouping.n_edges):
        members = sampled[grouping.device_edge[sampled] == m]
        if len(members) == 0:
            raise EmptyEdgeError(
                f"edge {m} has no sampled devices in round {round_index}; resample the round")
        rings.append(tuple(int(k) for k in rng.permutation(members)))
    if device_sizes is None:
        weights = tuple(len(r) for r in rings)
    else:
        weights = tuple(int(np.sum(np.asarray(device_sizes)[list(r)])) for r in rings)
    return RoundPlan(int(round_index), tuple(int(k) for k in sampled), tuple(rings), weights)


def plan_round(grouping, device_sizes, fraction, rng, round_index, max_attempts=100):
    """Sample devices and form rings, redrawing while any edge is left empty."""
    K = grouping.n_devices
    for _ in range(max_attempts):
        sampled = sample_devices(K, fraction, rng, grouping.n_edges)
        if len(np.unique(grouping.device_edge[sampled])) == grouping.n_edges:
            return form_rings(grouping, sampled, rng, device_sizes, round_index)
    raise EmptyEdgeError(
        f"round {round_index}: could not sample a device set covering all "
        f"{grouping.n_edges} edges in {max_attempts} attempts")


def single_ring_plan(sampled, rng, device_sizes, round_index):
    """One ring through every sampled device (flat ring-optimization)."""
    sampled = np.sort(np.asarray(sampled, dtype=np.int64))
    ring = tuple(int(k) for k in rng.permutation(sampled))
    weight = int(np.sum(np.asarray(device_sizes)[sampled]))
    return RoundPlan(int(round_index), tuple(int(k) for k in sampled), (ring,), (weight,))
