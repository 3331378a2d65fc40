"""Weight wire format and the QKD-keyed XOR stream cipher.

This is simulation-grade cryptography: a SplitMix64-driven keystream and a
FNV-1a-64 integrity tag.  It is bit-exact and invertible, NOT secure against a
real adversary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, KeyMaterialError, LengthError, TamperError, VersionError
from .model import ModelParameters

WEIGHTS_MAGIC = b"QFLW"
CIPHER_MAGIC = b"QFLC"
WIRE_VERSION = 1
MIN_KEY_BITS = 128

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_W_HEADER = struct.Struct("<4sHH")
_C_HEADER = struct.Struct("<4sHQQI")
WEIGHTS_HEADER_SIZE = _W_HEADER.size
CIPHER_HEADER_SIZE = _C_HEADER.size


# --------------------------------------------------------------------------- wire format

def serialize_weights(w: ModelParameters) -> bytes:
    if len(w) == 0:
        raise ConfigError("cannot serialize an empty parameter set")
    if len(w) > 0xFFFF:
        raise ConfigError(f"too many tensors ({len(w)}) for a 16-bit count")
    parts = [_W_HEADER.pack(WEIGHTS_MAGIC, WIRE_VERSION, len(w))]
    for t in w:
        if t.ndim > 0xFF:
            raise ConfigError(f"tensor rank {t.ndim} does not fit in one byte")
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_weights(data: bytes) -> ModelParameters:
    data = bytes(data)
    if len(data) < _W_HEADER.size:
        raise LengthError(f"weight payload too short for header ({len(data)} bytes)")
    magic, version, count = _W_HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad weight magic {magic!r}")
    if version != WIRE_VERSION:
        raise VersionError(f"unsupported weight format version {version}")
    if count == 0:
        raise FormatError("weight payload declares zero tensors")
    pos = _W_HEADER.size
    tensors = []
    for i in range(count):
        if pos + 1 > len(data):
            raise LengthError(f"truncated before tensor {i} header")
        rank = data[pos]
        pos += 1
        if pos + 4 * rank > len(data):
            raise LengthError(f"truncated inside tensor {i} dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if pos + 8 * n > len(data):
            raise LengthError(f"tensor {i} needs {8 * n} value bytes, {len(data) - pos} remain")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        tensors.append(values.astype(np.float64).reshape(dims))
        pos += 8 * n
    if pos != len(data):
        raise LengthError(f"{len(data) - pos} trailing bytes after {count} tensors")
    return ModelParameters(tuple(tensors))


def wire_length(shapes) -> int:
    """Serialized byte length for a list of tensor shapes."""
    total = _W_HEADER.size
    for s in shapes:
        total += 1 + 4 * len(s) + 8 * int(np.prod(s, dtype=np.int64))
    return total


# --------------------------------------------------------------------------- primitives

def splitmix_mix(z: int) -> int:
    """One SplitMix64 step as a pure function of the 64-bit state."""
    z = (z + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def pack_bits(bits: np.ndarray) -> bytes:
    """Bits to bytes, least-significant bit first, zero-padded."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


# --------------------------------------------------------------------------- keys

@dataclass(frozen=True)
class QkdKey:
    bits: np.ndarray
    key_id: int

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=np.uint8)
        if ((bits != 0) & (bits != 1)).any():
            raise KeyMaterialError("key bits must be 0 or 1")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "key_id", int(self.key_id) & MASK64)

    def __len__(self) -> int:
        return int(self.bits.size)


def fold_key(key: QkdKey) -> int:
    n_chunks = -(-len(key) // 64)
    padded = np.zeros(n_chunks * 64, dtype=np.uint8)
    padded[:len(key)] = key.bits
    s = 0
    for chunk in np.frombuffer(pack_bits(padded), dtype="<u8"):
        s = splitmix_mix(s ^ int(chunk))
    return s


def keystream(key: QkdKey, n_bytes: int, *, strict_otp: bool = False) -> bytes:
    """Expand ``key`` into ``n_bytes`` of keystream.

    Default mode folds the key into a 64-bit state and emits successive mix
    iterates.  ``strict_otp`` uses the raw key bits as a one-time pad and
    refuses keys shorter than the message.
    """
    if n_bytes < 0:
        raise ConfigError(f"n_bytes must be non-negative, got {n_bytes}")
    if strict_otp:
        if len(key) < 8 * n_bytes:
            raise KeyMaterialError(
                f"strict OTP needs {8 * n_bytes} key bits, key {key.key_id} has {len(key)}"
            )
        return pack_bits(key.bits[:8 * n_bytes])[:n_bytes]
    if n_bytes == 0:
        return b""
    s = fold_key(key)
    words = []
    for _ in range(-(-n_bytes // 8)):
        s = splitmix_mix(s)
        words.append(s)
    return np.array(words, dtype="<u8").tobytes()[:n_bytes]


def _xor(data: bytes, stream: bytes) -> bytes:
    a = np.frombuffer(data, dtype=np.uint8)
    b = np.frombuffer(stream, dtype=np.uint8)
    return (a ^ b).tobytes()


# --------------------------------------------------------------------------- cipher

@dataclass(frozen=True)
class Ciphertext:
    key_id: int
    payload: bytes
    integrity_tag: int

    def to_bytes(self) -> bytes:
        header = _C_HEADER.pack(CIPHER_MAGIC, WIRE_VERSION, self.key_id, self.integrity_tag, len(self.payload))
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        data = bytes(data)
        if len(data) < _C_HEADER.size:
            raise LengthError(f"ciphertext too short for header ({len(data)} bytes)")
        magic, version, key_id, tag, n = _C_HEADER.unpack_from(data)
        if magic != CIPHER_MAGIC:
            raise FormatError(f"bad ciphertext magic {magic!r}")
        if version != WIRE_VERSION:
            raise VersionError(f"unsupported ciphertext version {version}")
        if len(data) - _C_HEADER.size != n:
            raise LengthError(f"ciphertext declares {n} payload bytes, got {len(data) - _C_HEADER.size}")
        return cls(key_id, data[_C_HEADER.size:], tag)


def _check_key(key: QkdKey) -> None:
    if len(key) < MIN_KEY_BITS:
        raise KeyMaterialError(f"key {key.key_id} has {len(key)} bits, need at least {MIN_KEY_BITS}")


def encrypt_bytes(plaintext: bytes, key: QkdKey, *, strict_otp: bool = False) -> Ciphertext:
    _check_key(key)
    stream = keystream(key, len(plaintext), strict_otp=strict_otp)
    return Ciphertext(key.key_id, _xor(plaintext, stream), fnv1a64(plaintext))


def decrypt_bytes(ct: Ciphertext, key: QkdKey, *, strict_otp: bool = False) -> bytes:
    _check_key(key)
    if ct.key_id != key.key_id:
        raise KeyMaterialError(f"ciphertext was sealed with key {ct.key_id}, got key {key.key_id}")
    plaintext = _xor(ct.payload, keystream(key, len(ct.payload), strict_otp=strict_otp))
    if fnv1a64(plaintext) != ct.integrity_tag:
        raise TamperError(f"integrity tag mismatch under key {key.key_id}")
    return plaintext


def encrypt_weights(w: ModelParameters, key: QkdKey, *, strict_otp: bool = False) -> Ciphertext:
    return encrypt_bytes(serialize_weights(w), key, strict_otp=strict_otp)


def decrypt_weights(ct: Ciphertext, key: QkdKey, *, strict_otp: bool = False) -> ModelParameters:
    return deserialize_weights(decrypt_bytes(ct, key, strict_otp=strict_otp))
