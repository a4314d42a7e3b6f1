"""Systematic MDS erasure coding over GF(2^8).

An object is split into d equal data shards (zero-padded to a multiple of d)
and extended with p parity shards so that any d of the d+p shards reconstruct
the original bytes. Parity rows come from a Cauchy matrix, whose square
submatrices are always invertible; stacked under the identity this gives the
MDS guarantee for every d-subset.

Shard math runs on numpy uint8 arrays via a 256x256 GF multiplication table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PRIM = 0x11D  # x^8 + x^4 + x^3 + x^2 + 1

_EXP = [0] * 512
_LOG = [0] * 256
_x = 1
for _i in range(255):
    _EXP[_i] = _x
    _LOG[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= _PRIM
for _i in range(255, 512):
    _EXP[_i] = _EXP[_i - 255]


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _EXP[_LOG[a] + _LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("no inverse of 0 in GF(2^8)")
    return _EXP[255 - _LOG[a]]


def _build_mul_table() -> np.ndarray:
    logs = np.array(_LOG, dtype=np.int32)
    exps = np.array(_EXP, dtype=np.uint8)
    t = exps[logs[:, None] + logs[None, :]]
    t[0, :] = 0
    t[:, 0] = 0
    return t


_MUL = _build_mul_table()  # _MUL[a][b] == gf_mul(a, b)


class CodecError(Exception):
    pass


class InvalidKeyError(CodecError):
    """Object key violates the chunk-id grammar."""


class InsufficientChunksError(CodecError):
    """Fewer than d distinct chunks supplied to decode."""


class CorruptInputError(CodecError):
    """Chunks disagree on size/key or reference impossible sequence numbers."""


@dataclass(frozen=True)
class ECConfig:
    d: int
    p: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.p < 0:
            raise ValueError("p must be >= 0")
        if self.d + self.p > 256:
            raise ValueError("d + p must be <= 256")

    @property
    def n(self) -> int:
        return self.d + self.p

    @property
    def m(self) -> int:
        """Minimum simultaneous chunk losses that destroy an object."""
        return self.p + 1

    @classmethod
    def parse(cls, text: str) -> "ECConfig":
        # accepts "10+2" or "(10+2)"
        s = text.strip().strip("()")
        d, _, p = s.partition("+")
        return cls(int(d), int(p))

    def __str__(self):
        return f"({self.d}+{self.p})"


SEQ_SEP = "#"


@dataclass(frozen=True, order=True)
class ChunkId:
    object_key: str
    seq: int

    def __post_init__(self):
        if not self.object_key or SEQ_SEP in self.object_key:
            raise InvalidKeyError(f"bad object key: {self.object_key!r}")
        if self.seq < 0:
            raise InvalidKeyError(f"negative seq: {self.seq}")

    def __str__(self):
        return f"{self.object_key}{SEQ_SEP}{self.seq}"

    @classmethod
    def parse(cls, text: str) -> "ChunkId":
        key, sep, seq = text.rpartition(SEQ_SEP)
        if not sep or not key or not seq.isdigit():
            raise InvalidKeyError(f"unparseable chunk id: {text!r}")
        return cls(key, int(seq))


def chunk_id(key: str, seq: int) -> ChunkId:
    return ChunkId(key, seq)


@dataclass
class Chunk:
    id: ChunkId
    data: bytes
    chunk_size: int
    version: int = 0  # assigned by the proxy at store time; 0 = unset


def _cauchy_rows(cfg: ECConfig) -> np.ndarray:
    """p x d parity coefficient matrix: a[i][j] = 1 / (x_i + y_j) in GF(2^8)."""
    d, p = cfg.d, cfg.p
    rows = np.zeros((p, d), dtype=np.uint8)
    for i in range(p):
        for j in range(d):
            rows[i, j] = gf_inv((d + i) ^ j)
    return rows


_cauchy_cache: dict = {}


def _parity_matrix(cfg: ECConfig) -> np.ndarray:
    m = _cauchy_cache.get(cfg)
    if m is None:
        m = _cauchy_cache[cfg] = _cauchy_rows(cfg)
    return m


def encode(obj: bytes, cfg: ECConfig, key: str = "obj") -> list[Chunk]:
    """Split obj into d data shards plus p Cauchy parity shards.

    Shard size is ceil(len/d); the object is zero-padded to d*chunk_size.
    The caller must remember the original length (it is not stored in the
    chunk bytes).
    """
    if not obj:
        raise ValueError("cannot encode an empty object")
    d = cfg.d
    size = -(-len(obj) // d)
    buf = np.zeros(d * size, dtype=np.uint8)
    buf[: len(obj)] = np.frombuffer(obj, dtype=np.uint8)
    shards = buf.reshape(d, size)

    out = [
        Chunk(ChunkId(key, j), shards[j].tobytes(), size) for j in range(d)
    ]
    if cfg.p:
        coef = _parity_matrix(cfg)
        for i in range(cfg.p):
            acc = np.zeros(size, dtype=np.uint8)
            for j in range(d):
                acc ^= _MUL[coef[i, j]][shards[j]]
            out.append(Chunk(ChunkId(key, d + i), acc.tobytes(), size))
    return out


def _gf_matrix_invert(m: list[list[int]]) -> list[list[int]]:
    """Gauss-Jordan inverse over GF(2^8); raises if singular (cannot happen
    for submatrices of [I; Cauchy], kept as a guard)."""
    n = len(m)
    aug = [row[:] + [1 if i == j else 0 for j in range(n)] for i, row in enumerate(m)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r][col]), None)
        if pivot is None:
            raise CorruptInputError("singular decode matrix")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = gf_inv(aug[col][col])
        if inv != 1:
            aug[col] = [gf_mul(v, inv) for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col]:
                f = aug[r][col]
                arow, crow = aug[r], aug[col]
                for c in range(2 * n):
                    arow[c] ^= gf_mul(f, crow[c])
    return [row[n:] for row in aug]


def _reconstruct(cfg: ECConfig, seqs: list[int], shards: np.ndarray) -> np.ndarray:
    """Solve for the d data shards from any d distinct (seq, shard) pairs."""
    d = cfg.d
    coef = _parity_matrix(cfg) if cfg.p else None
    rows = []
    for s in seqs:
        if s < d:
            rows.append([1 if j == s else 0 for j in range(d)])
        else:
            rows.append([int(v) for v in coef[s - d]])
    inv = _gf_matrix_invert(rows)
    size = shards.shape[1]
    data = np.zeros((d, size), dtype=np.uint8)
    for j in range(d):
        acc = data[j]
        for k in range(d):
            c = inv[j][k]
            if c == 0:
                continue
            if c == 1:
                acc ^= shards[k]
            else:
                acc ^= _MUL[c][shards[k]]
    return data


def decode(chunks: list[Chunk], cfg: ECConfig, original_len: int) -> bytes:
    """Reconstruct the object from any >= d chunks with distinct seqs.

    When the supplied seqs are exactly {0..d-1} the result is a plain
    concatenation with no parity math.
    """
    d = cfg.d
    by_seq = {}
    key = None
    size = None
    for c in chunks:
        if key is None:
            key, size = c.id.object_key, c.chunk_size
        elif c.id.object_key != key:
            raise CorruptInputError("chunks from different objects")
        elif c.chunk_size != size:
            raise CorruptInputError("inconsistent chunk sizes")
        if len(c.data) != size:
            raise CorruptInputError("chunk data length disagrees with chunk_size")
        if not (0 <= c.id.seq < cfg.n):
            raise CorruptInputError(f"seq {c.id.seq} out of range for {cfg}")
        by_seq.setdefault(c.id.seq, c)
    if len(by_seq) < d:
        raise InsufficientChunksError(f"need {d} distinct chunks, got {len(by_seq)}")
    if original_len > d * size:
        raise CorruptInputError("original_len exceeds decoded capacity")

    seqs = sorted(by_seq)[:d]
    if seqs == list(range(d)):
        out = b"".join(by_seq[s].data for s in seqs)
        return out[:original_len]

    shards = np.stack(
        [np.frombuffer(by_seq[s].data, dtype=np.uint8) for s in seqs]
    )
    data = _reconstruct(cfg, seqs, shards)
    return data.reshape(-1).tobytes()[:original_len]
