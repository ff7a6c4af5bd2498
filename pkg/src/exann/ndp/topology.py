"""DIMM system shape and cost-model parameters.

Times are in accelerator clock cycles. One synchronized access moves one
burst per device (devices * burst_bits bits, i.e. one 64-byte line at the
default 4 x 128-bit geometry) and costs t_burst. Crossing to another channel
adds t_cross per access. Each hop pays t_hop_launch per query command plus a
t_merge host window per batch; distance arithmetic costs t_feature per
dimension spread across the device lanes.

Defaults for t_merge / t_hop_launch were calibrated so the no-optimization
replay (exact mode, host-side lookup, no caches) spends roughly 30% of its
time in neighbor-list handling and 15% in control, matching the motivating
breakdown of a vanilla offload.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class NdpTopology:
    channels: int = 2
    dimms_per_channel: int = 2
    ranks_per_dimm: int = 2
    subchannels_per_rank: int = 2
    devices_per_subchannel: int = 4
    burst_bits_per_device: int = 128
    # cost parameters (cycles)
    t_burst: float = 16.0
    t_cross: float = 64.0
    t_merge: float = 87000.0
    t_hop_launch: float = 2860.0
    t_feature: float = 1.0
    clock_ghz: float = 1.2
    # local neighbor cache geometry
    lnct_bytes: int = 8 * 1024
    lncd_bytes: int = 256 * 1024
    lncd_ways: int = 8
    line_bytes: int = 64
    # per-sub-channel priority-queue slots shared by the batch's queries;
    # feeds the prefetcher, so batch size vs depth sets prefetch accuracy
    pf_queue_depth: int = 32

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def n_subchannels(self) -> int:
        return (
            self.channels
            * self.dimms_per_channel
            * self.ranks_per_dimm
            * self.subchannels_per_rank
        )

    @property
    def access_bytes(self) -> int:
        """Bytes moved by one synchronized sub-channel access."""
        return self.devices_per_subchannel * self.burst_bits_per_device // 8

    def cycles_to_seconds(self, cycles: float) -> float:
        return cycles / (self.clock_ghz * 1e9)


_INT_FIELDS = {
    f.name
    for f in fields(NdpTopology)
    if f.type == "int"
}


def save_topology(topo: NdpTopology, path) -> None:
    with open(path, "w") as f:
        for fl in fields(NdpTopology):
            f.write(f"{fl.name}={getattr(topo, fl.name)}\n")


def load_topology(path) -> NdpTopology:
    """key=value text config; unknown keys are an error."""
    known = {f.name for f in fields(NdpTopology)}
    kwargs = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown topology key {key!r}")
            kwargs[key] = int(value) if key in _INT_FIELDS else float(value)
    return NdpTopology(**kwargs)


def with_lncd_bytes(topo: NdpTopology, capacity: int) -> NdpTopology:
    return replace(topo, lncd_bytes=capacity)
