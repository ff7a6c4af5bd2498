"""Dynamic floating-point codec and burst-aligned vector packing.

A vector is split into segments of non-increasing bit width; each feature is
stored as sign / n_exp-bit exponent / n_man-bit mantissa with bias
2^(n_exp-1)-1. Exponent field 0 is reserved for zero: values below the
smallest normal flush to zero, values above the largest finite saturate, and
rounding is round-to-nearest-even. Decoding widens back to float32 by
re-biasing the exponent and zero-padding the mantissa, so every encodable
value round-trips exactly.

Features never straddle burst boundaries; a burst's leftover bits are zero
padding. Bursts are interleaved round-robin across the sub-channel's devices,
so one synchronized access (one burst per device) advances the dimension
cursor by one "step" -- the checkpoint grid used by early-exit search.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

WIDTH_MIN = 12
WIDTH_MAX = 32
DEFAULT_WIDTH_LADDER = (12, 14, 16, 18, 20, 24, 28, 32)
DEFAULT_MAX_SEGMENTS = 3

_F32_EXP_BITS = 8
_F32_MAN_BITS = 23
_F32_BIAS = 127
_F32_MAX_BIASED_EXP = 254  # largest finite float32 exponent field


def width_format(width: int) -> tuple[int, int]:
    """Default (n_exp, n_man) split for a total width: keep the full float32
    exponent so no in-range value ever flushes or saturates."""
    if not WIDTH_MIN <= width <= WIDTH_MAX:
        raise ValueError(f"width {width} outside [{WIDTH_MIN}, {WIDTH_MAX}]")
    return _F32_EXP_BITS, width - 1 - _F32_EXP_BITS


@dataclass(frozen=True)
class DfloatSegment:
    """Inclusive 1-based dimension range sharing one float format."""

    dim_start: int
    dim_end: int
    n_exp: int
    n_man: int

    def __post_init__(self):
        if not 1 <= self.dim_start <= self.dim_end:
            raise ValueError(f"bad dimension range {self.dim_start}..{self.dim_end}")
        if not 2 <= self.n_exp <= 8:
            raise ValueError(f"n_exp {self.n_exp} outside [2, 8]")
        if self.n_man < 1:
            raise ValueError("n_man must be >= 1")
        if not WIDTH_MIN <= self.width <= WIDTH_MAX:
            raise ValueError(f"width {self.width} outside [{WIDTH_MIN}, {WIDTH_MAX}]")

    @property
    def width(self) -> int:
        return 1 + self.n_exp + self.n_man

    @property
    def count(self) -> int:
        return self.dim_end - self.dim_start + 1


@dataclass(frozen=True)
class DfloatConfig:
    """Ordered segments covering dims 1..D plus the burst geometry."""

    segments: tuple[DfloatSegment, ...]
    burst_bits: int = 128
    devices: int = 4

    def __post_init__(self):
        if not self.segments:
            raise ValueError("config needs at least one segment")
        if self.burst_bits < WIDTH_MAX or self.devices < 1:
            raise ValueError("bad burst geometry")
        pos = 1
        for seg in self.segments:
            if seg.dim_start != pos:
                raise ValueError(f"segment gap/overlap at dimension {pos}")
            pos = seg.dim_end + 1
        object.__setattr__(self, "segments", tuple(self.segments))

    def widths_non_increasing(self) -> bool:
        """Config-search rule; hand-written layouts may break it."""
        w = [s.width for s in self.segments]
        return all(a >= b for a, b in zip(w, w[1:]))

    @property
    def dim(self) -> int:
        return self.segments[-1].dim_end

    def features_per_burst(self) -> list[int]:
        return [self.burst_bits // seg.width for seg in self.segments]

    def bursts_per_segment(self) -> list[int]:
        return [
            -(-seg.count // fpb) for seg, fpb in zip(self.segments, self.features_per_burst())
        ]

    @property
    def data_bursts(self) -> int:
        return sum(self.bursts_per_segment())

    @property
    def n_burst_total(self) -> int:
        """Data bursts rounded up to a device multiple (synchronized access)."""
        d = self.data_bursts
        return -(-d // self.devices) * self.devices

    def burst_feature_counts(self) -> list[int]:
        """Features carried by each burst, in vector order, incl. padding."""
        counts = []
        for seg, fpb, nb in zip(self.segments, self.features_per_burst(), self.bursts_per_segment()):
            left = seg.count
            for _ in range(nb):
                take = min(fpb, left)
                counts.append(take)
                left -= take
        counts.extend([0] * (self.n_burst_total - len(counts)))
        return counts

    def step_dims(self) -> np.ndarray:
        """Cumulative dimensions after each synchronized access; the early
        exit checkpoint grid. Strictly increasing, last entry equals D."""
        counts = np.array(self.burst_feature_counts(), dtype=np.int64)
        per_step = counts.reshape(-1, self.devices).sum(axis=1)
        cum = np.cumsum(per_step)
        keep = np.ones(len(cum), dtype=bool)
        keep[1:] = cum[1:] > cum[:-1]
        return cum[keep].astype(np.int32)

    def dim_formats(self) -> tuple[np.ndarray, np.ndarray]:
        """(n_exp, n_man) arrays indexed by 0-based dimension."""
        exps = np.concatenate([np.full(s.count, s.n_exp, dtype=np.int32) for s in self.segments])
        mans = np.concatenate([np.full(s.count, s.n_man, dtype=np.int32) for s in self.segments])
        return exps, mans

    def bits_per_vector(self) -> int:
        return self.n_burst_total * self.burst_bits

    def is_lossless(self) -> bool:
        return all(s.n_exp == 8 and s.n_man >= 23 for s in self.segments)


def all32_config(dim: int, burst_bits: int = 128, devices: int = 4) -> DfloatConfig:
    """The uncompressed fallback: one 32-bit segment over every dimension."""
    return DfloatConfig(
        (DfloatSegment(1, dim, _F32_EXP_BITS, _F32_MAN_BITS),),
        burst_bits=burst_bits,
        devices=devices,
    )


def _check_widths(n_exp: int, n_man: int) -> None:
    if not 2 <= n_exp <= 8 or n_man < 1 or 1 + n_exp + n_man > 32:
        raise ValueError(f"unsupported widths n_exp={n_exp} n_man={n_man}")


def encode(x: float, n_exp: int, n_man: int) -> int:
    """Encode one value to its dfloat bit pattern (int of width 1+exp+man)."""
    _check_widths(n_exp, n_man)
    x32 = np.float32(x)
    if not np.isfinite(x32):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    u = int(x32.view(np.uint32))
    sign = u >> 31
    mag = u & 0x7FFFFFFF
    bias = (1 << (n_exp - 1)) - 1
    if n_man < _F32_MAN_BITS:
        shift = _F32_MAN_BITS - n_man
        mag = (mag + ((mag >> shift) & 1) + (1 << (shift - 1)) - 1) >> shift << shift
    e32 = mag >> _F32_MAN_BITS
    e32_min = _F32_BIAS + 1 - bias
    e32_cap = min((1 << n_exp) - 1 - bias + _F32_BIAS, _F32_MAX_BIASED_EXP)
    if e32 < e32_min:  # flush to zero (covers zero and float32 subnormals)
        return 0
    width = 1 + n_exp + n_man
    if e32 > e32_cap:
        exp_field = e32_cap - _F32_BIAS + bias
        return (sign << (width - 1)) | (exp_field << n_man) | ((1 << n_man) - 1)
    man23 = mag & ((1 << _F32_MAN_BITS) - 1)
    man = man23 >> (_F32_MAN_BITS - n_man) if n_man <= _F32_MAN_BITS else man23 << (n_man - _F32_MAN_BITS)
    exp_field = e32 - _F32_BIAS + bias
    return (sign << (width - 1)) | (exp_field << n_man) | man


def decode(bits: int, n_exp: int, n_man: int) -> float:
    """Widen a dfloat bit pattern back to float32 (exponent field 0 -> 0.0)."""
    _check_widths(n_exp, n_man)
    width = 1 + n_exp + n_man
    if bits >> width:
        raise ValueError(f"bit pattern wider than {width} bits")
    sign = bits >> (width - 1)
    exp_field = (bits >> n_man) & ((1 << n_exp) - 1)
    man = bits & ((1 << n_man) - 1)
    if exp_field == 0:
        return 0.0
    bias = (1 << (n_exp - 1)) - 1
    e32 = exp_field - bias + _F32_BIAS
    man23 = man << (_F32_MAN_BITS - n_man) if n_man <= _F32_MAN_BITS else man >> (n_man - _F32_MAN_BITS)
    u = (sign << 31) | (e32 << _F32_MAN_BITS) | man23
    return float(np.uint32(u).view(np.float32))


def _quantize_array(x: np.ndarray, n_exp: int, n_man: int) -> np.ndarray:
    """Vectorized decode(encode(.)): float32 in, float32 out."""
    _check_widths(n_exp, n_man)
    x = np.ascontiguousarray(x, dtype=np.float32)
    u = x.view(np.uint32)
    sign = u & np.uint32(0x80000000)
    mag = (u & np.uint32(0x7FFFFFFF)).astype(np.uint32)
    bias = (1 << (n_exp - 1)) - 1
    if n_man < _F32_MAN_BITS:
        shift = _F32_MAN_BITS - n_man
        mag64 = mag.astype(np.uint64)
        incr = ((mag64 >> np.uint64(shift)) & np.uint64(1)) + np.uint64((1 << (shift - 1)) - 1)
        mag64 = (mag64 + incr) >> np.uint64(shift) << np.uint64(shift)
        mag = mag64.astype(np.uint32)
        man_mask = np.uint32(((1 << n_man) - 1) << shift)
    else:
        man_mask = np.uint32((1 << _F32_MAN_BITS) - 1)
    e32 = mag >> np.uint32(_F32_MAN_BITS)
    e32_min = _F32_BIAS + 1 - bias
    e32_cap = min((1 << n_exp) - 1 - bias + _F32_BIAS, _F32_MAX_BIASED_EXP)
    sat_mag = np.uint32((e32_cap << _F32_MAN_BITS) | man_mask)
    out = sign | mag
    out = np.where(e32 > np.uint32(e32_cap), sign | sat_mag, out)
    out = np.where(e32 < np.uint32(e32_min), np.uint32(0), out)
    return out.view(np.float32).reshape(x.shape)


def mask_emulate(v: np.ndarray, cfg: DfloatConfig) -> np.ndarray:
    """Apply each segment's precision loss elementwise, without packing.

    Bit-identical to unpack(pack(v)); works on a vector or a row matrix.
    """
    v = np.asarray(v, dtype=np.float32)
    if v.shape[-1] != cfg.dim:
        raise ValueError(f"vector dimension {v.shape[-1]} != config dimension {cfg.dim}")
    out = np.empty_like(v)
    for seg in cfg.segments:
        sl = slice(seg.dim_start - 1, seg.dim_end)
        out[..., sl] = _quantize_array(v[..., sl], seg.n_exp, seg.n_man)
    return out


def pack_vector(v: np.ndarray, cfg: DfloatConfig) -> list[bytes]:
    """Encode a vector into per-device burst streams.

    Burst i goes to device i % devices at slot i // devices; features are
    packed LSB-first inside each burst, leftover bits zero.
    """
    v = np.asarray(v, dtype=np.float32)
    if v.shape != (cfg.dim,):
        raise ValueError(f"vector shape {v.shape} does not match config dimension {cfg.dim}")
    burst_bytes = cfg.burst_bits // 8
    bursts = []
    for seg, fpb in zip(cfg.segments, cfg.features_per_burst()):
        codes = [encode(float(v[i]), seg.n_exp, seg.n_man) for i in range(seg.dim_start - 1, seg.dim_end)]
        for lo in range(0, len(codes), fpb):
            word = 0
            for j, code in enumerate(codes[lo : lo + fpb]):
                word |= code << (j * seg.width)
            bursts.append(word.to_bytes(burst_bytes, "little"))
    bursts.extend([bytes(burst_bytes)] * (cfg.n_burst_total - len(bursts)))
    streams = [b"".join(bursts[d :: cfg.devices]) for d in range(cfg.devices)]
    return streams


def unpack_vector(streams: list[bytes], cfg: DfloatConfig) -> np.ndarray:
    """Inverse of pack_vector; returns float32 of length D."""
    burst_bytes = cfg.burst_bits // 8
    n_slots = cfg.n_burst_total // cfg.devices
    bursts = []
    for slot in range(n_slots):
        for d in range(cfg.devices):
            chunk = streams[d][slot * burst_bytes : (slot + 1) * burst_bytes]
            bursts.append(int.from_bytes(chunk, "little"))
    out = np.empty(cfg.dim, dtype=np.float32)
    b = 0
    for seg, fpb, nb in zip(cfg.segments, cfg.features_per_burst(), cfg.bursts_per_segment()):
        mask = (1 << seg.width) - 1
        left = seg.count
        pos = seg.dim_start - 1
        for _ in range(nb):
            word = bursts[b]
            b += 1
            for j in range(min(fpb, left)):
                out[pos] = decode((word >> (j * seg.width)) & mask, seg.n_exp, seg.n_man)
                pos += 1
            left -= min(fpb, left)
    return out


def cfg_validate(
    n_burst: int,
    dim: int,
    burst_bits: int = 128,
    devices: int = 4,
    ladder=DEFAULT_WIDTH_LADDER,
    max_segments: int = DEFAULT_MAX_SEGMENTS,
) -> list[DfloatConfig]:
    """Enumerate valid configs whose padded burst total is exactly n_burst.

    Rules enforced: one format per burst (features never straddle bursts),
    widths non-increasing across segments, full 1..D coverage, and burst
    total a multiple of the device count. Candidates are ordered widest
    first (total bits descending).
    """
    if n_burst % devices != 0:
        return []
    widths = sorted(set(ladder), reverse=True)
    found = {}
    for s in range(1, max_segments + 1):
        for combo in itertools.combinations_with_replacement(widths, s):
            fpbs = [burst_bits // w for w in combo]
            if any(f < 1 for f in fpbs):
                continue
            for data_total in range(max(n_burst - devices + 1, s), n_burst + 1):
                for counts in _segment_counts(dim, fpbs, data_total):
                    merged = _merge_equal_widths(counts, combo)
                    segs = []
                    pos = 1
                    for c, w in merged:
                        ne, nm = width_format(w)
                        segs.append(DfloatSegment(pos, pos + c - 1, ne, nm))
                        pos += c
                    cfg = DfloatConfig(tuple(segs), burst_bits=burst_bits, devices=devices)
                    if cfg.data_bursts != data_total:
                        continue  # merging found a strictly cheaper layout
                    if cfg.n_burst_total == n_burst:
                        found.setdefault(tuple(merged), cfg)
    configs = list(found.values())
    configs.sort(
        key=lambda c: (
            -sum(s.count * s.width for s in c.segments),
            tuple(-s.width for s in c.segments),
            tuple(s.count for s in c.segments),
        )
    )
    return configs


def _merge_equal_widths(counts, widths):
    """Collapse adjacent segments sharing a width into one (count, width)."""
    merged = []
    for c, w in zip(counts, widths):
        if merged and merged[-1][1] == w:
            merged[-1] = (merged[-1][0] + c, w)
        else:
            merged.append((c, w))
    return tuple(merged)


def _segment_counts(dim, fpbs, data_total):
    """Yield per-segment dimension counts: earlier segments take whole
    bursts; the last absorbs the remainder and must fill its bursts."""
    s = len(fpbs)
    if s == 1:
        if -(-dim // fpbs[0]) == data_total:
            yield (dim,)
        return
    head_fpb = fpbs[0]
    # segment 1 uses b1 full bursts of head_fpb features
    for b1 in range(1, data_total - (s - 1) + 1):
        c1 = b1 * head_fpb
        if c1 > dim - (s - 1):
            break
        for rest in _segment_counts(dim - c1, fpbs[1:], data_total - b1):
            yield (c1, *rest)


def segment_spec(cfg: DfloatConfig) -> str:
    """Human-readable one-line-per-segment form used by the config file."""
    lines = [f"burst_bits={cfg.burst_bits}", f"devices={cfg.devices}"]
    for s in cfg.segments:
        lines.append(f"dims={s.dim_start}..{s.dim_end} exp={s.n_exp} man={s.n_man}")
    return "\n".join(lines) + "\n"


def save_config(cfg: DfloatConfig, path) -> None:
    with open(path, "w") as f:
        f.write(segment_spec(cfg))


def load_config(path) -> DfloatConfig:
    burst_bits = None
    devices = None
    segs = []
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("burst_bits="):
                burst_bits = int(line.split("=", 1)[1])
            elif line.startswith("devices="):
                devices = int(line.split("=", 1)[1])
            elif line.startswith("dims="):
                fields = dict(part.split("=", 1) for part in line.split())
                lo, hi = fields["dims"].split("..")
                segs.append(DfloatSegment(int(lo), int(hi), int(fields["exp"]), int(fields["man"])))
            else:
                raise ValueError(f"{path}: unrecognized line {line!r}")
    if burst_bits is None or devices is None or not segs:
        raise ValueError(f"{path}: incomplete dfloat config")
    return DfloatConfig(tuple(segs), burst_bits=burst_bits, devices=devices)


@dataclass(frozen=True)
class PackedDatabase:
    """Handle for a database packed under one config (streams materialized
    lazily; the simulator only needs the geometry)."""

    n: int
    config: DfloatConfig


def search_config(
    db,
    index,
    query_sample: np.ndarray,
    r_target: float,
    burst_bits: int = 128,
    devices: int = 4,
    *,
    model,
    ef_search: int,
    k: int = 10,
    ground_truth: np.ndarray | None = None,
    ladder=DEFAULT_WIDTH_LADDER,
    max_segments: int = DEFAULT_MAX_SEGMENTS,
    max_configs_per_step: int = 12,
) -> tuple[DfloatConfig, float]:
    """Binary search over the burst budget for the cheapest config whose
    estimated-exit search still meets the recall target (mask emulation on
    the host path; the index is never rebuilt).

    db must already be in the model's transformed space. Returns
    (config, measured recall); falls back to the all-32-bit config with a
    warning when no candidate meets the target.
    """
    from exann import engine  # deferred: engine depends on this module
    from exann.vecdb import compute_ground_truth, recall_at_k

    queries = np.asarray(query_sample, dtype=np.float32)
    if queries.size == 0:
        raise ValueError("query sample is empty")
    dim = db.dim
    if ground_truth is None:
        ground_truth = compute_ground_truth(db, queries, k)

    def measure(cfg: DfloatConfig) -> float:
        masked = mask_emulate(db.vectors, cfg)
        ctx = engine.SearchContext.for_mode(
            engine.EvalMode.FEE_SPCA, db.metric, masked, model=model, config=cfg
        )
        total = 0.0
        for i in range(queries.shape[0]):
            ids, _ = engine.search(index, queries[i], ef_search, k, ctx)
            total += recall_at_k(ids, ground_truth[i])
        return total / queries.shape[0]

    step = devices
    lo = -(-(dim * WIDTH_MIN) // burst_bits)  # narrowest format, fewest bursts
    lo = -(-lo // step) * step
    hi = -(-(dim * WIDTH_MAX) // burst_bits)
    hi = -(-hi // step) * step
    best = None  # (n_burst, recall, cfg)
    probed = {}
    t_lo, t_hi = lo // step, hi // step
    while t_lo < t_hi:
        mid = (t_lo + t_hi) // 2
        n_burst = mid * step
        feasible_cfg = None
        feasible_recall = -1.0
        for cfg in cfg_validate(n_burst, dim, burst_bits, devices, ladder, max_segments)[:max_configs_per_step]:
            r = measure(cfg)
            if r >= r_target and r > feasible_recall:
                feasible_cfg, feasible_recall = cfg, r
        probed[n_burst] = feasible_cfg is not None
        if feasible_cfg is not None:
            if best is None or n_burst <= best[0]:
                best = (n_burst, feasible_recall, feasible_cfg)
            t_hi = mid
        else:
            t_lo = mid + 1
    if best is None and t_hi * step not in probed:
        # bisection can converge on the upper bound without probing it
        n_burst = t_hi * step
        for cfg in cfg_validate(n_burst, dim, burst_bits, devices, ladder, max_segments)[:max_configs_per_step]:
            r = measure(cfg)
            if r >= r_target and (best is None or r > best[1]):
                best = (n_burst, r, cfg)
        probed[n_burst] = best is not None
    for small, large in itertools.combinations(sorted(probed), 2):
        if probed[small] and not probed[large]:
            log.warning(
                "non-monotone feasibility: %d bursts met the target but %d did not", small, large
            )
    if best is not None:
        return best[2], best[1]
    fallback = all32_config(dim, burst_bits, devices)
    r = measure(fallback)
    if r < r_target:
        log.warning(
            "no config met target recall %.4f (uncompressed achieves %.4f); returning 32-bit fallback",
            r_target,
            r,
        )
    return fallback, r
