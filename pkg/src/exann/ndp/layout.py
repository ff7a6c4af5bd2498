"""Sub-channel placement: vector homes, partitioned neighbor lists, NLT.

Every vector lives wholly in one sub-channel. A node's base-layer neighbor
list is split by the neighbors' home sub-channels and each piece is stored
in that sub-channel, next to the vectors it names, so a sub-channel can walk
its share of a hop without touching another channel. The per-sub-channel
neighbor list table (NLT) maps node id -> (3-byte start address, 1-byte
entry count) into the sub-channel's packed neighbor region.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from exann.dfloat import DfloatConfig, DfloatSegment, PackedDatabase
from exann.graph import GraphIndex
from exann.ndp.topology import NdpTopology

MAGIC = b"EXNL"
FORMAT_VERSION = 1

ADDR_LIMIT = 1 << 24  # 3-byte NLT address field
LEN_LIMIT = 255  # 1-byte NLT length field

ENTRY_BYTES = 4  # one neighbor id in a stored list
NLT_ENTRY_BYTES = 4  # packed (addr << 8 | len)


@dataclass
class NdpLayout:
    topology: NdpTopology
    config: DfloatConfig
    home: np.ndarray  # int32[n]: node -> sub-channel
    nlt: list[np.ndarray]  # per sub-channel uint32[n]: addr << 8 | len
    lists: list[np.ndarray]  # per sub-channel int32 region, lists back to back
    shuffled: bool = True
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.home)

    @property
    def n_subchannels(self) -> int:
        return len(self.nlt)

    def step_dims(self) -> np.ndarray:
        return self.config.step_dims()

    def nlt_entry(self, sub: int, node: int) -> tuple[int, int]:
        """(byte address, entry count) of node's partition in sub."""
        word = int(self.nlt[sub][node])
        return word >> 8, word & 0xFF

    def partition(self, sub: int, node: int) -> np.ndarray:
        addr, length = self.nlt_entry(sub, node)
        start = addr // ENTRY_BYTES
        return self.lists[sub][start : start + length]

    def reconstructed_neighbors(self, node: int) -> list[int]:
        """Union of the node's partitions over all sub-channels."""
        out = []
        for s in range(self.n_subchannels):
            out.extend(int(x) for x in self.partition(s, node))
        return out


def assign_homes(
    n: int, n_sub: int, policy="round_robin", shuffle: bool = True, seed: int = 0
) -> np.ndarray:
    """Node -> sub-channel map. `policy` may also be an explicit array."""
    if isinstance(policy, (np.ndarray, list, tuple)):
        home = np.asarray(policy, dtype=np.int32)
        if home.shape != (n,) or home.min() < 0 or home.max() >= n_sub:
            raise ValueError("explicit home map must assign every node a valid sub-channel")
        return home
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    home = np.empty(n, dtype=np.int32)
    if policy == "round_robin":
        home[order] = np.arange(n, dtype=np.int32) % n_sub
    elif policy == "block":
        block = -(-n // n_sub)
        home[order] = (np.arange(n, dtype=np.int32) // block).astype(np.int32)
    else:
        raise ValueError(f"unknown placement policy {policy!r}")
    return home


def map_database(
    packed: PackedDatabase,
    index: GraphIndex,
    topology: NdpTopology,
    policy="round_robin",
    shuffle: bool = True,
    seed: int = 0,
) -> NdpLayout:
    """Place vectors and partitioned base-layer neighbor lists."""
    n = packed.n
    if index.n != n:
        raise ValueError(f"index has {index.n} nodes, packed database has {n}")
    n_sub = topology.n_subchannels
    if topology.devices_per_subchannel != packed.config.devices:
        raise ValueError("packing device count does not match the topology")
    home = assign_homes(n, n_sub, policy=policy, shuffle=shuffle, seed=seed)
    base = index.layers[0]
    nlt = [np.zeros(n, dtype=np.uint32) for _ in range(n_sub)]
    chunks: list[list[np.ndarray]] = [[] for _ in range(n_sub)]
    cursor = [0] * n_sub
    for node in range(n):
        nbrs = np.asarray(base[node], dtype=np.int32)
        owner = home[nbrs] if len(nbrs) else np.empty(0, dtype=np.int32)
        for s in range(n_sub):
            part = nbrs[owner == s]
            length = len(part)
            if length > LEN_LIMIT:
                raise ValueError(f"node {node} has {length} neighbors homed in sub-channel {s} (NLT cap {LEN_LIMIT})")
            addr = cursor[s]
            if addr + length * ENTRY_BYTES > ADDR_LIMIT:
                raise ValueError(f"sub-channel {s} neighbor region exceeds the 16 MB NLT address space")
            nlt[s][node] = np.uint32((addr << 8) | length)
            if length:
                chunks[s].append(part)
                cursor[s] = addr + length * ENTRY_BYTES
    lists = [
        np.concatenate(chunks[s]) if chunks[s] else np.empty(0, dtype=np.int32)
        for s in range(n_sub)
    ]
    return NdpLayout(
        topology=topology,
        config=packed.config,
        home=home,
        nlt=nlt,
        lists=lists,
        shuffled=shuffle,
        seed=seed,
    )


def save_layout(layout: NdpLayout, path) -> None:
    """Self-contained binary (homes, NLTs, packed lists, geometry)."""
    cfg = layout.config
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            struct.pack(
                "<IIIIIBI",
                FORMAT_VERSION,
                layout.n,
                layout.n_subchannels,
                cfg.burst_bits,
                cfg.devices,
                1 if layout.shuffled else 0,
                layout.seed,
            )
        )
        f.write(struct.pack("<I", len(cfg.segments)))
        for seg in cfg.segments:
            f.write(struct.pack("<IIII", seg.dim_start, seg.dim_end, seg.n_exp, seg.n_man))
        f.write(layout.home.astype("<i4").tobytes())
        for s in range(layout.n_subchannels):
            f.write(layout.nlt[s].astype("<u4").tobytes())
            f.write(struct.pack("<I", len(layout.lists[s])))
            f.write(layout.lists[s].astype("<i4").tobytes())


def load_layout(path, topology: NdpTopology) -> NdpLayout:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a layout file")
        version, n, n_sub, burst_bits, devices, shuffled, seed = struct.unpack(
            "<IIIIIBI", f.read(25)
        )
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if n_sub != topology.n_subchannels or devices != topology.devices_per_subchannel:
            raise ValueError(f"{path}: layout was built for a different topology")
        (n_seg,) = struct.unpack("<I", f.read(4))
        segs = []
        for _ in range(n_seg):
            a, b, ne, nm = struct.unpack("<IIII", f.read(16))
            segs.append(DfloatSegment(a, b, ne, nm))
        cfg = DfloatConfig(tuple(segs), burst_bits=burst_bits, devices=devices)
        home = np.frombuffer(f.read(4 * n), dtype="<i4").copy()
        nlt = []
        lists = []
        for _ in range(n_sub):
            nlt.append(np.frombuffer(f.read(4 * n), dtype="<u4").copy())
            (cnt,) = struct.unpack("<I", f.read(4))
            lists.append(np.frombuffer(f.read(4 * cnt), dtype="<i4").copy())
    return NdpLayout(
        topology=topology,
        config=cfg,
        home=home,
        nlt=nlt,
        lists=lists,
        shuffled=bool(shuffled),
        seed=seed,
    )
