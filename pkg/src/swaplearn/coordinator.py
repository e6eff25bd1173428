"""Central-server coordination: parameter swaps, contact schedules, and
exact one-shot least-squares aggregation.

The server holds one live parameter vector and a complete push log. A
*contact* is one node talking to the server. Two execution modes share the
engine:

- ``serialized``: each contact pulls the live vector, computes its local
  update, and pushes it back before the next contact starts, so push t
  satisfies theta_t = F_k(theta_{t-1}) exactly.
- ``overlapped``: a node's first contact is a bare pull; every later contact
  pushes the update it computed from the vector received at its *previous*
  contact and takes the swap's return as its next base. Pushes therefore
  apply stale bases, with staleness equal to the number of pushes since that
  node's previous contact.

Contact order always comes from the schedule; the delay model only stamps
simulated time.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import transport
from .data import Partition
from .errors import RankDeficiencyError
from .learners import Learner, Objective, Theta, UpdatePolicy, design_matrix

SCHEDULE_KINDS = ("round-robin", "async-random")
MODE_KINDS = ("serialized", "overlapped")
DELAY_KINDS = ("constant", "uniform")


class ParameterServer:
    """Thread-safe swap server: push t stores theta_t and returns theta_{t-1}."""

    def __init__(self, theta_init: Theta):
        self._log = [theta_init]
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self._log[0].dim

    @property
    def t(self) -> int:
        return len(self._log) - 1

    @property
    def theta_log(self) -> tuple[Theta, ...]:
        with self._lock:
            return tuple(self._log)

    def pull(self, node_id: int) -> tuple[Theta, int]:
        """Current vector and its index; does not advance the counter."""
        with self._lock:
            return self._log[-1], len(self._log) - 1

    def push_swap(self, node_id: int, theta: Theta) -> tuple[Theta, int]:
        """Atomically store ``theta`` and hand back the vector it replaced.

        Returns ``(theta_{t-1}, t)`` where t is the index just assigned.
        Validation failures leave the server untouched.
        """
        if not isinstance(theta, Theta):
            raise ValueError("push_swap expects a Theta")
        if theta.dim != self.dim:
            raise ValueError(
                f"dimension mismatch: server holds dim {self.dim}, got {theta.dim}"
            )
        with self._lock:
            prev = self._log[-1]
            self._log.append(theta)
            return prev, len(self._log) - 1


@dataclass(frozen=True)
class Schedule:
    """Which node contacts the server at each step.

    ``round-robin`` cycles 0..k-1; ``async-random`` draws i.i.d. from
    ``probs`` (all strictly positive, summing to one) with its own seed.
    """

    kind: str
    k: int
    probs: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.kind == "async-random":
            if self.probs is None:
                raise ValueError("async-random requires probs")
            p = np.asarray(self.probs, dtype=np.float64)
            if p.shape != (self.k,):
                raise ValueError(f"probs must have shape ({self.k},)")
            if not np.all(p > 0):
                raise ValueError("every contact probability must be > 0")
            if abs(float(p.sum()) - 1.0) > 1e-9:
                raise ValueError("probs must sum to 1")
            p = p.copy()
            p.flags.writeable = False
            object.__setattr__(self, "probs", p)
        elif self.probs is not None:
            raise ValueError("probs only apply to async-random")

    def contacts(self, total: int) -> np.ndarray:
        if total < 1:
            raise ValueError("total contacts must be >= 1")
        if self.kind == "round-robin":
            return np.arange(total, dtype=np.int64) % self.k
        rng = np.random.default_rng(self.seed)
        return rng.choice(self.k, size=total, p=self.probs).astype(np.int64)


@dataclass(frozen=True)
class DelayModel:
    """Per-node compute durations: a constant, or seeded uniform draws."""

    kind: str = "constant"
    value: float = 1.0
    low: float = 0.0
    high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.kind == "constant":
            if not (self.value >= 0 and np.isfinite(self.value)):
                raise ValueError("constant delay must be >= 0")
        elif not (0 <= self.low <= self.high and np.isfinite(self.high)):
            raise ValueError("uniform delay requires 0 <= low <= high")

    def sampler(self, k: int):
        """Callable node_id -> duration; independent stream per node."""
        if self.kind == "constant":
            value = self.value
            return lambda node: value
        rngs = [np.random.default_rng([self.seed, node]) for node in range(k)]
        return lambda node: float(rngs[node].uniform(self.low, self.high))


@dataclass(frozen=True)
class ExecutionMode:
    kind: str = "serialized"
    delays: DelayModel = field(default_factory=DelayModel)

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown execution mode {self.kind!r}")


@dataclass(frozen=True)
class ContactRecord:
    """One push: its index, who made it, what moved, and when."""

    t: int
    node_id: int
    theta_pushed: Theta
    theta_returned: Theta
    simulated_time: float
    wallclock: float
    bytes_sent: int


@dataclass(frozen=True)
class Trace:
    """Everything a run produced, in push order."""

    theta_init: Theta
    records: tuple[ContactRecord, ...]
    terminal_thetas: dict[int, Theta]
    total_bytes: int

    @property
    def final_theta(self) -> Theta:
        return self.records[-1].theta_pushed if self.records else self.theta_init

    def theta_log(self) -> list[Theta]:
        """Server log reconstructed from the records: theta_0 .. theta_T."""
        return [self.theta_init] + [r.theta_pushed for r in self.records]


def run_schedule(partition: Partition, objective: Objective, policy: UpdatePolicy,
                 schedule: Schedule, mode: ExecutionMode, total_contacts: int,
                 theta_init: Theta | None = None, server=None) -> Trace:
    """Drive ``total_contacts`` contacts against a swap server.

    ``server`` defaults to an in-process :class:`ParameterServer`; any object
    with the same ``pull``/``push_swap`` surface (e.g. a TCP client) works and
    must already hold ``theta_init``. Byte counts always reflect the wire
    encoding, whichever transport is in use.
    """
    if schedule.k != partition.k:
        raise ValueError(f"schedule has k={schedule.k}, partition has k={partition.k}")
    dims = {s.dim for s in partition.shards}
    if len(dims) != 1:
        raise ValueError("shards disagree on dimension")
    dim = dims.pop()
    if theta_init is None:
        theta_init = Theta.zeros(dim)
    if theta_init.dim != dim:
        raise ValueError("theta_init dimension does not match the data")
    if server is None:
        server = ParameterServer(theta_init)
    nodes = [Learner(objective, shard, policy) for shard in partition.shards]
    contacts = schedule.contacts(total_contacts)
    duration = mode.delays.sampler(partition.k)
    pull_rt = transport.pull_round_trip_bytes(dim)
    push_rt = transport.push_round_trip_bytes(dim)

    records: list[ContactRecord] = []
    terminal: dict[int, Theta] = {}
    total_bytes = 0

    if mode.kind == "serialized":
        clock = 0.0
        for node in contacts:
            node = int(node)
            base, _ = server.pull(node)
            result = nodes[node].update(base)
            prev, t = server.push_swap(node, result)
            clock += duration(node)
            total_bytes += pull_rt + push_rt
            records.append(ContactRecord(t, node, result, prev, clock,
                                         time.perf_counter(), pull_rt + push_rt))
            terminal[node] = result
    else:
        base: dict[int, Theta] = {}
        ready = np.zeros(partition.k)
        clock = 0.0
        for node in contacts:
            node = int(node)
            clock = max(clock, float(ready[node]))
            if node not in base:
                theta, _ = server.pull(node)
                total_bytes += pull_rt
                base[node] = theta
            else:
                result = nodes[node].update(base[node])
                prev, t = server.push_swap(node, result)
                total_bytes += push_rt
                records.append(ContactRecord(t, node, result, prev, clock,
                                             time.perf_counter(), push_rt))
                terminal[node] = result
                base[node] = prev
            ready[node] = clock + duration(node)

    return Trace(theta_init, tuple(records), terminal, total_bytes)


@dataclass(frozen=True)
class SecondOrderSummary:
    """What one node shares for exact aggregation: Gram matrix, moment
    vector, and row count. Never raw rows."""

    node_id: int
    gram: np.ndarray
    moment: np.ndarray
    count: int

    def __post_init__(self):
        object.__setattr__(self, "gram", np.asarray(self.gram, dtype=np.float64))
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=np.float64))


def node_second_order(node_id: int, shard) -> SecondOrderSummary:
    """Local sufficient statistics for least squares on one shard."""
    if not shard.has_labels:
        raise ValueError("second-order aggregation requires labels")
    x = design_matrix(shard)
    y = np.asarray(shard.labels, dtype=np.float64)
    return SecondOrderSummary(node_id, x.T @ x, x.T @ y, shard.n_points)


def aggregate_second_order(partition: Partition, channel: list | None = None) -> Theta:
    """One-round exact least squares from per-node summaries.

    Each node contributes (dim+1)^2 + (dim+1) reals plus a count; the server
    sums them and solves the pooled normal equations. When ``channel`` is
    given, every message that crosses the node/server boundary is appended to
    it.
    """
    if partition.k < 1:
        raise ValueError("empty partition")
    dim = partition.shards[0].dim
    if partition.total_points <= dim + 1:
        raise ValueError(
            f"need more than {dim + 1} total rows, got {partition.total_points}"
        )
    summaries = []
    for node_id, shard in enumerate(partition.shards):
        if shard.dim != dim:
            raise ValueError("shards disagree on dimension")
        msg = node_second_order(node_id, shard)
        if channel is not None:
            channel.append(msg)
        summaries.append(msg)
    gram = sum(s.gram for s in summaries)
    moment = sum(s.moment for s in summaries)
    try:
        c = cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"pooled Gram matrix is singular: {exc}") from None
    return Theta(cho_solve(c, moment))
