"""Block-wise NormalFloat quantization with a double-quantized absmax chain.

Weights are flattened row-major and cut into blocks of ``B0`` elements. Each
block stores its absolute maximum; weights are normalized by it and snapped to
the nearest level of a normal-quantile codebook with ``2**b0`` entries. The
per-block absmax values are quantized again: blocks are grouped ``B1`` at a
time, the group maximum is stored at ``b2`` float precision, and the absmax
values are round-to-nearest coded on a uniform ``b1``-bit grid over [0, 1].

Storage is accounted exactly, including partial trailing blocks/groups, and a
packed binary serialization is provided so the accounting can be audited
bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

SUPPORTED_CODE_BITS = (2, 3, 4, 8)
FLOAT_FORMATS = ("bf16", "fp16", "fp32")
FLOAT_FORMAT_BITS = {"bf16": 16, "fp16": 16, "fp32": 32}

_codebook_cache: dict[int, "NfCodebook"] = {}


@dataclass(frozen=True)
class NfCodebook:
    """Sorted quantization levels in [-1, 1] following standard-normal quantiles."""

    bits: int
    levels: np.ndarray  # shape (2**bits,), strictly increasing, contains exact 0

    @property
    def midpoints(self) -> np.ndarray:
        return (self.levels[:-1] + self.levels[1:]) / 2.0

    @property
    def max_gap(self) -> float:
        return float(np.max(np.diff(self.levels)))

    @property
    def zero_code(self) -> int:
        return int(np.searchsorted(self.levels, 0.0))


def nf_codebook(bits: int) -> NfCodebook:
    """Build (and cache) the NormalFloat codebook for a supported bit width.

    The negative half evaluates the standard-normal inverse CDF at 2**(bits-1)
    evenly spaced probabilities from p0 = 2**-(bits+1) up to 0.5; the positive
    half uses 2**(bits-1) + 1 probabilities from 0.5 up to 1 - p0. The shared
    zero is deduplicated and each half is scaled by its endpoint magnitude so
    the extreme levels are exactly -1 and +1.
    """
    if bits not in SUPPORTED_CODE_BITS:
        raise ValueError(f"unsupported code bit width {bits!r}; expected one of {SUPPORTED_CODE_BITS}")
    if bits in _codebook_cache:
        return _codebook_cache[bits]

    half = 1 << (bits - 1)
    p0 = 2.0 ** -(bits + 1)
    neg = norm.ppf(np.linspace(p0, 0.5, half))
    pos = norm.ppf(np.linspace(0.5, 1.0 - p0, half + 1))
    neg = neg / abs(neg[0])
    pos = pos / pos[-1]
    neg[-1] = 0.0  # ppf(0.5) is 0 up to sign; pin it
    pos[0] = 0.0
    levels = np.concatenate([neg[:-1], pos])
    levels.setflags(write=False)
    book = NfCodebook(bits=bits, levels=levels)
    _codebook_cache[bits] = book
    return book


@dataclass(frozen=True)
class QuantizedTensor:
    """Encoded weight matrix plus the two-level absmax chain and exact storage size."""

    shape: tuple[int, int]
    codes: np.ndarray           # (d*n,) uint8/uint16 level indices
    absmax1_codes: np.ndarray   # (n_blocks,) uniform-grid codes for block absmax
    absmax2: np.ndarray         # (n_groups,) group absmax, already rounded to b2
    cfg: "LayerQuantConfig"     # noqa: F821 - defined in qconfig
    storage_bits_total: int

    @property
    def n_blocks(self) -> int:
        return len(self.absmax1_codes)

    @property
    def n_groups(self) -> int:
        return len(self.absmax2)


def _round_to_format(values: np.ndarray, fmt: str) -> np.ndarray:
    """Round float64 values to bf16/fp16/fp32 precision (returned as float64)."""
    if fmt == "fp32":
        return np.float32(values).astype(np.float64)
    if fmt == "fp16":
        return np.float16(values).astype(np.float64)
    if fmt == "bf16":
        as32 = np.asarray(values, dtype=np.float32)
        u = as32.view(np.uint32)
        # round-to-nearest-even on the upper 16 bits
        rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) & np.uint32(0xFFFF0000)
        return rounded.view(np.float32).astype(np.float64)
    raise ValueError(f"unsupported float format {fmt!r}")


def _block_counts(n_elems: int, cfg) -> tuple[int, int]:
    n_blocks = -(-n_elems // cfg.B0)
    n_groups = -(-n_blocks // cfg.B1)
    return n_blocks, n_groups


def storage_bits(cfg, d: int, n: int) -> int:
    """Exact stored size in bits of a d x n matrix under cfg (ceil block counts)."""
    n_blocks, n_groups = _block_counts(d * n, cfg)
    return d * n * cfg.b0 + n_blocks * cfg.b1 + n_groups * FLOAT_FORMAT_BITS[cfg.b2]


def effective_bits(cfg, d: int, n: int) -> float:
    """Stored bits per weight for a d x n matrix: storage_bits / (d*n)."""
    if d < 1 or n < 1:
        raise ValueError("matrix dimensions must be positive")
    return storage_bits(cfg, d, n) / (d * n)


def bit_rate(cfg) -> float:
    """Bits per weight on a fully block-aligned matrix: b0 + b1/B0 + bits(b2)/(B0*B1).

    Equals effective_bits at any shape where B0*B1 divides d*n (e.g. 128x128
    for every supported configuration). All terms are dyadic, so the value is
    exact in float64. Used as the storage coordinate of the configuration
    ladder and of model-level average bit width.
    """
    return cfg.b0 + cfg.b1 / cfg.B0 + FLOAT_FORMAT_BITS[cfg.b2] / (cfg.B0 * cfg.B1)


def quantize_layer(W: np.ndarray, cfg) -> QuantizedTensor:
    """Encode a weight matrix block-wise under the given layer configuration."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size < 1:
        raise ValueError("expected a non-empty 2-D weight matrix")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight matrix contains non-finite values")

    d, n = W.shape
    book = nf_codebook(cfg.b0)
    flat = W.reshape(-1)
    n_blocks, n_groups = _block_counts(flat.size, cfg)

    absmax = np.zeros(n_blocks)
    code_dtype = np.uint16 if cfg.b0 == 8 else np.uint8
    codes = np.empty(flat.size, dtype=code_dtype)
    for b in range(n_blocks):
        block = flat[b * cfg.B0 : (b + 1) * cfg.B0]
        a = np.max(np.abs(block))
        absmax[b] = a
        if a == 0.0:
            codes[b * cfg.B0 : b * cfg.B0 + block.size] = book.zero_code
        else:
            t = block / a
            codes[b * cfg.B0 : b * cfg.B0 + block.size] = np.searchsorted(
                book.midpoints, t, side="left"
            ).astype(code_dtype)

    grid_max = (1 << cfg.b1) - 1
    absmax1_codes = np.zeros(n_blocks, dtype=np.uint16 if cfg.b1 == 8 else np.uint8)
    absmax2 = np.zeros(n_groups)
    for g in range(n_groups):
        sl = slice(g * cfg.B1, min((g + 1) * cfg.B1, n_blocks))
        group = absmax[sl]
        gmax = np.max(group) if group.size else 0.0
        absmax2[g] = _round_to_format(np.float64(gmax), cfg.b2) if gmax > 0 else 0.0
        if gmax > 0:
            absmax1_codes[sl] = np.clip(np.round(group / gmax * grid_max), 0, grid_max).astype(
                absmax1_codes.dtype
            )

    return QuantizedTensor(
        shape=(d, n),
        codes=codes,
        absmax1_codes=absmax1_codes,
        absmax2=absmax2,
        cfg=cfg,
        storage_bits_total=storage_bits(cfg, d, n),
    )


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct the real matrix encoded by a QuantizedTensor."""
    cfg = qt.cfg
    book = nf_codebook(cfg.b0)
    grid_max = (1 << cfg.b1) - 1

    group_idx = np.arange(qt.n_blocks) // cfg.B1
    absmax_hat = qt.absmax2[group_idx] * (qt.absmax1_codes.astype(np.float64) / grid_max)
    block_idx = np.arange(qt.codes.size) // cfg.B0
    flat = book.levels[qt.codes] * absmax_hat[block_idx]
    return flat.reshape(qt.shape)


def rtn_quantize(W: np.ndarray, bits: int) -> np.ndarray:
    """Round-to-nearest uniform quantization with a symmetric absmax scale.

    s = max|w| / (2**(bits-1) - 1); returns s * clamp(round(w/s)). A zero
    matrix is returned unchanged (s = 0 guarded).
    """
    if bits < 2:
        raise ValueError("rtn_quantize requires bits >= 2")
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise ValueError("weight matrix contains non-finite values")
    half = 1 << (bits - 1)
    s = np.max(np.abs(W)) / (half - 1)
    if s == 0.0:
        return np.zeros_like(W)
    return s * np.clip(np.round(W / s), -half, half - 1)


# --- packed binary serialization (audit format for the storage accounting) ---

_MAGIC = b"NFQT"


class _BitWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.payload_bits = 0
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, width: int) -> None:
        # little-endian bit order: first value occupies the lowest bits
        self._acc |= (int(value) & ((1 << width) - 1)) << self._nbits
        self._nbits += width
        self.payload_bits += width
        while self._nbits >= 8:
            self.chunks.append(bytes([self._acc & 0xFF]))
            self._acc >>= 8
            self._nbits -= 8

    def pad_to_byte(self) -> None:
        if self._nbits:
            self.chunks.append(bytes([self._acc & 0xFF]))
            self._acc = 0
            self._nbits = 0

    def getvalue(self) -> bytes:
        self.pad_to_byte()
        return b"".join(self.chunks)


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos_bits = 0

    def read(self, width: int) -> int:
        out = 0
        for k in range(width):
            byte = self.data[(self.pos_bits + k) >> 3]
            out |= ((byte >> ((self.pos_bits + k) & 7)) & 1) << k
        self.pos_bits += width
        return out

    def skip_to_byte(self) -> None:
        self.pos_bits = (self.pos_bits + 7) & ~7


def serialize(qt: QuantizedTensor) -> tuple[bytes, int]:
    """Pack a QuantizedTensor into bytes; returns (blob, payload_bits).

    payload_bits counts the data bits actually packed (codes, absmax codes and
    the b2 floats), excluding the header and per-section byte padding; it must
    equal qt.storage_bits_total.
    """
    cfg = qt.cfg
    w = _BitWriter()
    for c in qt.codes:
        w.write(int(c), cfg.b0)
    w.pad_to_byte()
    for c in qt.absmax1_codes:
        w.write(int(c), cfg.b1)
    w.pad_to_byte()
    fmt_bits = FLOAT_FORMAT_BITS[cfg.b2]
    for v in qt.absmax2:
        if cfg.b2 == "fp32":
            raw = struct.unpack("<I", struct.pack("<f", v))[0]
        elif cfg.b2 == "fp16":
            raw = np.float16(v).view(np.uint16)
        else:  # bf16: upper half of the float32 pattern
            raw = np.float32(v).view(np.uint32) >> 16
        w.write(int(raw), fmt_bits)
    w.pad_to_byte()

    header = _MAGIC + struct.pack(
        "<HHBB BBH II",
        qt.shape[0],
        qt.shape[1],
        cfg.b0,
        cfg.b1,
        FLOAT_FORMAT_BITS[cfg.b2] // 16,  # 1 = 16-bit, 2 = 32-bit
        int(cfg.b2 == "fp16"),
        cfg.B0,
        cfg.B1,
        qt.n_blocks,
    )
    return header + w.getvalue(), w.payload_bits


def deserialize(blob: bytes) -> QuantizedTensor:
    """Inverse of serialize (needs module qconfig for the cfg object)."""
    from .qconfig import LayerQuantConfig

    if blob[:4] != _MAGIC:
        raise ValueError("bad magic in quantized tensor blob")
    d, n, b0, b1, half_words, is_fp16, B0, B1, n_blocks = struct.unpack("<HHBB BBH II", blob[4:22])
    b2 = "fp32" if half_words == 2 else ("fp16" if is_fp16 else "bf16")
    cfg = LayerQuantConfig(b0=b0, b1=b1, b2=b2, B0=B0, B1=B1)
    n_groups = -(-n_blocks // B1)

    r = _BitReader(blob[22:])
    code_dtype = np.uint16 if b0 == 8 else np.uint8
    codes = np.array([r.read(b0) for _ in range(d * n)], dtype=code_dtype)
    r.skip_to_byte()
    a1 = np.array([r.read(b1) for _ in range(n_blocks)], dtype=np.uint16 if b1 == 8 else np.uint8)
    r.skip_to_byte()
    a2 = np.zeros(n_groups)
    for g in range(n_groups):
        raw = r.read(FLOAT_FORMAT_BITS[b2])
        if b2 == "fp32":
            a2[g] = struct.unpack("<f", struct.pack("<I", raw))[0]
        elif b2 == "fp16":
            a2[g] = np.uint16(raw).view(np.float16)
        else:
            a2[g] = np.uint32(raw << 16).view(np.float32)
    return QuantizedTensor(
        shape=(d, n),
        codes=codes,
        absmax1_codes=a1,
        absmax2=a2,
        cfg=cfg,
        storage_bits_total=storage_bits(cfg, d, n),
    )
