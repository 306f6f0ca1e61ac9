"""Bit-packed on-disk codec for sparse teacher targets.

Layout (all little-endian), format version 1:

    header:   magic "SKDC" | version u16 | vocab_size u32 | scheme_id u8
              | param u32 | position_count u64                  (23 bytes)
    position: entry_count u8 | [anchor u16, scheme 2 only]
              | entry_count * record
    record:   3 bytes; bits 0-16 token id, bits 17-23 payload

Schemes:
    1  Top-K linear   payload = floor(p * 128), clamped to [0, 127]
    2  Top-K ratio    anchor = round(p_max * 65535); records sorted by
                      descending probability; the first payload is fixed at
                      127 and each following payload is the 7-bit quantized
                      ratio of the probability to the previously *decoded*
                      one, so quantization error does not compound
    3  RS counts      payload = the integer numerator x of weight x / N,
                      where N = param is the number of sampling rounds

Records are stored in descending decoded-probability order (ties broken by
ascending token id). Decoding drops zero payloads, restores weights, and for
schemes 1-2 renormalizes them to sum to 1.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CacheCorruptError, CacheVersionError
from .sparsify import SparseTarget

MAGIC = b"SKDC"
FORMAT_VERSION = 1

SCHEME_TOPK_LINEAR = 1
SCHEME_TOPK_RATIO = 2
SCHEME_RS_COUNTS = 3

MAX_VOCAB = 1 << 17          # token id must fit 17 bits
MAX_RS_ROUNDS = 127          # count numerators must fit 7 bits
MAX_ENTRIES = 255            # per-position entry count is one byte

_HEADER = struct.Struct("<4sHIBIQ")
_ANCHOR = struct.Struct("<H")

_SCHEME_NAMES = {
    SCHEME_TOPK_LINEAR: "topk_linear",
    SCHEME_TOPK_RATIO: "topk_ratio",
    SCHEME_RS_COUNTS: "rs_counts",
}


@dataclass(frozen=True)
class CacheHeader:
    version: int
    vocab_size: int
    scheme_id: int
    param: int
    position_count: int


def _pack_records(token_ids, payloads) -> bytes:
    out = bytearray()
    for tid, payload in zip(token_ids, payloads):
        out += int(int(tid) | (int(payload) << 17)).to_bytes(3, "little")
    return bytes(out)


def _validate_common(target: SparseTarget, vocab_size: int) -> None:
    if target.vocab_size != vocab_size:
        raise ValueError(f"target vocab_size {target.vocab_size} != header vocab_size {vocab_size}")
    n = target.token_ids.size
    if n == 0:
        raise ValueError("cannot encode an empty target")
    if n > MAX_ENTRIES:
        raise ValueError(f"position has {n} entries, format limit is {MAX_ENTRIES}")


def _encode_topk_linear(target: SparseTarget) -> bytes:
    payloads = np.clip(np.floor(target.weights * 128.0), 0, 127).astype(np.int64)
    if not np.any(payloads > 0):
        raise ValueError("no weight is representable at 7-bit linear resolution")
    order = np.lexsort((target.token_ids, -payloads))
    return bytes([target.token_ids.size]) + _pack_records(
        target.token_ids[order], payloads[order])


def _encode_topk_ratio(target: SparseTarget) -> bytes:
    order = np.lexsort((target.token_ids, -target.weights))
    ids = target.token_ids[order]
    probs = target.weights[order]
    anchor = int(round(probs[0] * 65535.0))
    if anchor == 0:
        raise ValueError("leading probability is not representable at 16-bit resolution")
    payloads = np.empty(probs.size, dtype=np.int64)
    payloads[0] = 127
    decoded_prev = anchor / 65535.0
    for i in range(1, probs.size):
        q = int(np.clip(round(probs[i] / decoded_prev * 127.0), 0, 127))
        payloads[i] = q
        decoded_prev = decoded_prev * q / 127.0
    return (bytes([ids.size]) + _ANCHOR.pack(anchor) + _pack_records(ids, payloads))


def _encode_rs_counts(target: SparseTarget, n_rounds: int) -> bytes:
    scaled = target.weights * n_rounds
    counts = np.rint(scaled).astype(np.int64)
    if np.any(np.abs(scaled - counts) > 1e-9):
        raise ValueError(f"weights are not integer multiples of 1/{n_rounds}")
    if np.any(counts < 1) or np.any(counts > 127):
        raise ValueError("counts must lie in [1, 127]")
    if counts.sum() != n_rounds:
        raise ValueError(f"counts sum to {counts.sum()}, expected {n_rounds}")
    order = np.lexsort((target.token_ids, -counts))
    return bytes([target.token_ids.size]) + _pack_records(
        target.token_ids[order], counts[order])


def encode(targets, scheme_id: int, param: int, vocab_size: int | None = None) -> bytes:
    """Pack a sequence of SparseTargets into cache bytes.

    ``param`` is K for the Top-K schemes and the sampling-round count N for
    scheme 3 (capped at 127 so every numerator fits 7 bits; use ratio
    encoding for larger N).
    """
    targets = list(targets)
    if scheme_id not in _SCHEME_NAMES:
        raise ValueError(f"unknown scheme_id {scheme_id}")
    if vocab_size is None:
        if not targets:
            raise ValueError("vocab_size is required when encoding zero positions")
        vocab_size = targets[0].vocab_size
    if not 1 <= vocab_size <= MAX_VOCAB:
        raise ValueError(f"vocab_size must lie in [1, {MAX_VOCAB}], got {vocab_size}")
    if param < 0 or param > 0xFFFFFFFF:
        raise ValueError(f"param out of range: {param}")
    if scheme_id == SCHEME_RS_COUNTS and not 1 <= param <= MAX_RS_ROUNDS:
        raise ValueError(f"scheme 3 requires 1 <= N <= {MAX_RS_ROUNDS}, got {param}")

    out = bytearray()
    out += _HEADER.pack(MAGIC, FORMAT_VERSION, vocab_size, scheme_id, param, len(targets))
    for target in targets:
        _validate_common(target, vocab_size)
        if scheme_id == SCHEME_TOPK_LINEAR:
            out += _encode_topk_linear(target)
        elif scheme_id == SCHEME_TOPK_RATIO:
            out += _encode_topk_ratio(target)
        else:
            out += _encode_rs_counts(target, param)
    return bytes(out)


def parse_header(data: bytes) -> CacheHeader:
    """Validate and read the fixed-size header."""
    if len(data) < _HEADER.size:
        raise CacheCorruptError("stream shorter than header", offset=len(data))
    magic, version, vocab_size, scheme_id, param, position_count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheCorruptError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise CacheVersionError(f"unsupported format version {version}")
    if scheme_id not in _SCHEME_NAMES:
        raise CacheVersionError(f"unknown scheme_id {scheme_id}")
    if not 1 <= vocab_size <= MAX_VOCAB:
        raise CacheCorruptError(f"vocab_size {vocab_size} out of range", offset=6)
    if scheme_id == SCHEME_RS_COUNTS and not 1 <= param <= MAX_RS_ROUNDS:
        raise CacheCorruptError(f"scheme 3 param {param} out of range", offset=11)
    return CacheHeader(version, vocab_size, scheme_id, param, position_count)


def _read_records(data: bytes, pos: int, count: int, vocab_size: int):
    end = pos + 3 * count
    if end > len(data):
        raise CacheCorruptError("stream truncated inside a record block", offset=len(data))
    raw = np.frombuffer(data[pos:end], dtype=np.uint8).reshape(count, 3).astype(np.int64)
    values = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
    ids = values & (MAX_VOCAB - 1)
    payloads = values >> 17
    if np.any(ids >= vocab_size):
        bad = int(np.argmax(ids >= vocab_size))
        raise CacheCorruptError(f"token id {int(ids[bad])} >= vocab_size {vocab_size}",
                                offset=pos + 3 * bad)
    if np.unique(ids).size != ids.size:
        raise CacheCorruptError("duplicate token id within a position", offset=pos)
    return ids, payloads, end


def decode(data: bytes) -> list[SparseTarget]:
    """Unpack cache bytes into SparseTargets (ids ascending per position).

    Scheme 3 reproduces the encoded weights bit for bit; schemes 1-2 rebuild
    the quantized probabilities and renormalize them to sum to 1.
    """
    header = parse_header(data)
    pos = _HEADER.size
    targets = []
    for _ in range(header.position_count):
        if pos >= len(data):
            raise CacheCorruptError("stream truncated before a position block", offset=pos)
        count = data[pos]
        pos += 1
        if count == 0:
            raise CacheCorruptError("position block with zero entries", offset=pos - 1)
        anchor = None
        if header.scheme_id == SCHEME_TOPK_RATIO:
            if pos + _ANCHOR.size > len(data):
                raise CacheCorruptError("stream truncated inside an anchor", offset=len(data))
            (anchor,) = _ANCHOR.unpack_from(data, pos)
            pos += _ANCHOR.size
        ids, payloads, pos = _read_records(data, pos, count, header.vocab_size)

        if header.scheme_id == SCHEME_TOPK_LINEAR:
            weights = payloads / 128.0
        elif header.scheme_id == SCHEME_TOPK_RATIO:
            weights = np.empty(count)
            cur = anchor / 65535.0
            for i in range(count):
                cur = cur * payloads[i] / 127.0
                weights[i] = cur
        else:
            weights = payloads / header.param

        keep = weights > 0.0
        if not np.any(keep):
            raise CacheCorruptError("position decodes to no positive weights", offset=pos)
        ids, weights = ids[keep], weights[keep]
        if header.scheme_id == SCHEME_RS_COUNTS:
            if payloads.sum() != header.param:
                raise CacheCorruptError(
                    f"counts sum to {int(payloads.sum())}, expected {header.param}", offset=pos)
        else:
            weights = weights / weights.sum()
        targets.append(SparseTarget.from_entries(
            ids, weights, header.vocab_size, _SCHEME_NAMES[header.scheme_id]))
    if pos != len(data):
        raise CacheCorruptError(f"{len(data) - pos} trailing bytes after the last position",
                                offset=pos)
    return targets


def encoded_size(header: CacheHeader, entry_counts) -> int:
    """Exact file size implied by the header and per-position entry counts."""
    anchor_bytes = _ANCHOR.size if header.scheme_id == SCHEME_TOPK_RATIO else 0
    return _HEADER.size + sum(1 + anchor_bytes + 3 * int(c) for c in entry_counts)
