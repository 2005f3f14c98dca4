"""Localization-enabled relaying protocol: threshold clustering, per-slot
drug releases (including cumulative relay re-release), delivery accounting
and link counting.

Slot semantics: slot 1 is the localization broadcast; drug delivery runs in
slots 2..L. During every drug slot each DgN releases simultaneously:
cluster 0 releases the default dose, every relay cluster releases the
default dose plus whatever it absorbed during the previous slot. A release
in slot s contributes to each of its receivers in every later slot j via
the window (j - s + 1) hitting probability of its channel table, so
delivery is bookkept per release rather than assuming slots long enough to
complete within one window.

Receiver sets follow the cluster structure: a transmitter in cluster n < N
is heard by every DgN in clusters m > n plus the tissue (multi-receiver
channel); a transmitter in the final cluster N is heard by the tissue only
(single-receiver channel). Cluster 0 therefore never receives relayed
molecules. The optional same_cluster_absorb flag additionally lets DgNs of
the transmitter's own cluster capture its molecules (physically plausible,
off by default, no fidelity claim either way).
"""

from dataclasses import dataclass, field

import numpy as np

from .channel_analytic import sample_received

__all__ = [
    "TISSUE",
    "Thresholds",
    "ClusterAssignment",
    "ReleaseEvent",
    "Transfer",
    "SlotRecord",
    "DeliveryLedger",
    "LinkCount",
    "MissingChannelError",
    "localize",
    "delivery_slot_index",
    "cumulative_release",
    "count_links",
    "run_delivery",
]

TISSUE = -1  # receiver key for the infected tissue in channel tables and ledgers


class MissingChannelError(LookupError):
    """A needed (transmitter, receiver) channel table was not supplied."""


@dataclass(frozen=True, slots=True)
class Thresholds:
    """Descending localization thresholds; empty means the no-relay baseline."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if any(v < 0 for v in vals):
            raise ValueError("thresholds must be >= 0")
        if any(a <= b for a, b in zip(vals, vals[1:])):
            raise ValueError(f"thresholds must be strictly descending, got {vals}")

    @property
    def n_hops(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, slots=True)
class ClusterAssignment:
    """Cluster index (0..n_hops) per DgN."""

    indices: tuple
    n_hops: int

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if any(not 0 <= i <= self.n_hops for i in self.indices):
            raise ValueError("cluster indices must lie in 0..n_hops")

    def cluster_sizes(self) -> tuple:
        sizes = [0] * (self.n_hops + 1)
        for i in self.indices:
            sizes[i] += 1
        return tuple(sizes)

    def members(self, cluster: int) -> list:
        return [g for g, c in enumerate(self.indices) if c == cluster]


@dataclass(frozen=True, slots=True)
class ReleaseEvent:
    slot: int
    source: int
    amount: int

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError("release amount must be >= 0")
        if self.slot < 2:
            raise ValueError("drug releases start at slot 2")


@dataclass(frozen=True, slots=True)
class Transfer:
    """One sampled molecule transfer: released by `tx` in `release_slot`,
    absorbed by `rx` (a DgN index, or TISSUE) during the recording slot."""

    tx: int
    release_slot: int
    rx: int
    amount: int


@dataclass(slots=True)
class SlotRecord:
    slot: int
    releases: list = field(default_factory=list)  # [ReleaseEvent]
    transfers: list = field(default_factory=list)  # [Transfer]

    def dgn_absorbed(self) -> dict:
        out = {}
        for tr in self.transfers:
            if tr.rx != TISSUE:
                out[tr.rx] = out.get(tr.rx, 0) + tr.amount
        return out

    def tissue_absorbed(self) -> int:
        return sum(tr.amount for tr in self.transfers if tr.rx == TISSUE)


@dataclass(slots=True)
class DeliveryLedger:
    """Per-slot record of every release and every sampled transfer."""

    n_dgns: int
    slots: list = field(default_factory=list)  # [SlotRecord], slots 2..L

    def record(self, slot: int) -> SlotRecord:
        for rec in self.slots:
            if rec.slot == slot:
                return rec
        raise KeyError(f"no slot {slot} in ledger")

    def tissue_in_slot(self, slot: int) -> int:
        return self.record(slot).tissue_absorbed()

    def tissue_running_total(self, slot: int) -> int:
        return sum(rec.tissue_absorbed() for rec in self.slots if rec.slot <= slot)


@dataclass(frozen=True, slots=True)
class LinkCount:
    total: int
    relay: int
    direct: int

    def __post_init__(self):
        if self.total != self.direct + self.relay:
            raise ValueError("total links must equal direct + relay")


def localize(received, thresholds: Thresholds) -> ClusterAssignment:
    """Assign each DgN to a cluster from its localization count.

    A DgN joins the lowest cluster n whose threshold it strictly exceeds; a
    count equal to a threshold falls through to the next cluster, and a
    count below every threshold lands in the final cluster n_hops.
    """
    n = thresholds.n_hops
    idx = []
    for r in received:
        c = n
        for k, eta in enumerate(thresholds.values):
            if r > eta:
                c = k
                break
        idx.append(c)
    return ClusterAssignment(indices=tuple(idx), n_hops=n)


def delivery_slot_index(i: int, n_hops: int) -> int:
    """Slot in which molecules released at drug slot i complete an n-hop relay."""
    if i < 2:
        raise ValueError("drug slots start at i=2")
    if n_hops < 0:
        raise ValueError("hop count must be >= 0")
    return i + n_hops


def cumulative_release(default: int, received_prev: int) -> int:
    """Relay emission: the default dose plus everything absorbed last slot."""
    if default < 0 or received_prev < 0:
        raise ValueError("amounts must be >= 0")
    return default + received_prev


def count_links(cluster_sizes) -> LinkCount:
    """Direct links (one per DgN) plus pairwise relay links between clusters."""
    sizes = list(cluster_sizes)
    if any(s < 0 for s in sizes):
        raise ValueError("cluster sizes must be >= 0")
    direct = sum(sizes)
    relay = 0
    for n in range(len(sizes)):
        for m in range(n + 1, len(sizes)):
            relay += sizes[n] * sizes[m]
    return LinkCount(total=direct + relay, relay=relay, direct=direct)


def _receivers(tx: int, assignment: ClusterAssignment, same_cluster_absorb: bool) -> list:
    n = assignment.indices[tx]
    lower = n if same_cluster_absorb else n + 1
    rx = [g for g in range(len(assignment.indices)) if g != tx and assignment.indices[g] >= lower]
    rx.append(TISSUE)
    return rx


def run_delivery(
    assignment: ClusterAssignment,
    scenario,
    channels,
    n_tx_drug: int,
    n_slots: int,
    rng: np.random.Generator,
    same_cluster_absorb: bool = False,
) -> DeliveryLedger:
    """Simulate drug slots 2..n_slots and return the full transfer ledger.

    `channels` maps (tx_dgn_index, rx_key) to a sequence of per-window
    hitting probabilities, rx_key being a DgN index or TISSUE. Draw order
    is canonical (slot, then release slot, then transmitter index, then
    receiver key) so that runs with the same seed and the same effective
    topology consume identical variates.
    """
    k = len(assignment.indices)
    if scenario is not None and len(scenario.dgns) != k:
        raise ValueError("assignment does not match the scenario's DgN count")
    if n_slots < 2:
        raise ValueError("need at least one drug slot (n_slots >= 2)")
    if n_tx_drug < 0:
        raise ValueError("default dose must be >= 0")

    ledger = DeliveryLedger(n_dgns=k, slots=[SlotRecord(slot=j) for j in range(2, n_slots + 1)])
    absorbed_prev = [0] * k  # per-DgN drug absorbed during the previous slot

    for j in range(2, n_slots + 1):
        rec = ledger.record(j)
        for g in range(k):
            if assignment.indices[g] == 0:
                amount = n_tx_drug
            else:
                amount = cumulative_release(n_tx_drug, absorbed_prev[g])
            rec.releases.append(ReleaseEvent(slot=j, source=g, amount=amount))

        # every release from slots 2..j contributes via window (j - s + 1)
        for s in range(2, j + 1):
            window = j - s + 1
            for ev in ledger.record(s).releases:
                for rx in _receivers(ev.source, assignment, same_cluster_absorb):
                    key = (ev.source, rx)
                    if key not in channels:
                        rx_name = "tissue" if rx == TISSUE else f"dgn {rx}"
                        raise MissingChannelError(
                            f"no channel table for transmitter dgn {ev.source} -> {rx_name}"
                        )
                    table = channels[key]
                    if window > len(table):
                        rx_name = "tissue" if rx == TISSUE else f"dgn {rx}"
                        raise MissingChannelError(
                            f"channel table for (dgn {ev.source} -> {rx_name}) has "
                            f"{len(table)} windows, need window {window}"
                        )
                    amt = sample_received(ev.amount, float(table[window - 1]), rng)
                    rec.transfers.append(Transfer(tx=ev.source, release_slot=s, rx=rx, amount=amt))

        absorbed = rec.dgn_absorbed()
        absorbed_prev = [absorbed.get(g, 0) for g in range(k)]

    return ledger
