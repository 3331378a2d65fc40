"""BB84 key exchange over a lossy channel with an intercept-resend eavesdropper.

The sender (client) and receiver (server) each keep their own copy of the
sifted bits.  No error correction or privacy amplification is done, so with
channel noise or a partial attack the two raw keys can differ; downstream
integrity checks catch that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, KeyExhaustionError, KeyMaterialError


@dataclass(frozen=True)
class QuantumChannelConfig:
    gamma: float = 0.0
    length_km: float = 0.0
    eve_rate: float = 0.0
    noise_flip_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.length_km < 0:
            raise ConfigError(f"length_km must be >= 0, got {self.length_km}")
        if not 0.0 <= self.eve_rate <= 1.0:
            raise ConfigError(f"eve_rate must be in [0, 1], got {self.eve_rate}")
        if not 0.0 <= self.noise_flip_prob < 1.0:
            raise ConfigError(f"noise_flip_prob must be in [0, 1), got {self.noise_flip_prob}")

    @property
    def transmittance(self) -> float:
        return math.exp(-self.gamma * self.length_km)


@dataclass(frozen=True)
class QkdPolicy:
    qber_abort_threshold: float = 0.11
    sample_fraction: float = 0.25
    min_key_bits: int = 128

    def __post_init__(self) -> None:
        if not 0.0 < self.qber_abort_threshold < 0.5:
            raise ConfigError(f"qber_abort_threshold must be in (0, 0.5), got {self.qber_abort_threshold}")
        if not 0.0 < self.sample_fraction < 1.0:
            raise ConfigError(f"sample_fraction must be in (0, 1), got {self.sample_fraction}")
        if self.min_key_bits < 1:
            raise ConfigError(f"min_key_bits must be >= 1, got {self.min_key_bits}")


@dataclass(frozen=True)
class QkdSessionResult:
    session_id: int
    transmitted_count: int
    received_count: int
    sifted_bits: np.ndarray
    receiver_sifted_bits: np.ndarray
    sample_positions: np.ndarray  # indices into the sifted bits
    key_positions: np.ndarray  # indices into the sifted bits
    sample_bits_disclosed: int
    qber_estimate: float
    aborted: bool
    abort_reason: str | None
    key: np.ndarray  # sender copy
    receiver_key: np.ndarray
    success_probability: float  # 1 - exp(-gamma * L), reported only
    transmittance: float
    channel: QuantumChannelConfig = field(default_factory=QuantumChannelConfig)

    @property
    def sifted_count(self) -> int:
        return int(self.sifted_bits.size)

    @property
    def key_length(self) -> int:
        return int(self.key.size)

    def to_record(self) -> dict:
        """JSON-ready transcript summary (no key material)."""
        return {
            "session_id": self.session_id,
            "transmitted": self.transmitted_count,
            "received": self.received_count,
            "sifted": self.sifted_count,
            "disclosed": self.sample_bits_disclosed,
            "key_bits": self.key_length,
            "qber": self.qber_estimate,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "success_probability": self.success_probability,
            "transmittance": self.transmittance,
            "gamma": self.channel.gamma,
            "length_km": self.channel.length_km,
            "eve_rate": self.channel.eve_rate,
            "noise_flip_prob": self.channel.noise_flip_prob,
        }


def qkd_success_probability(gamma: float, length_km: float) -> float:
    """``1 - exp(-gamma * L)``, reproduced as a reported metric.

    Note this grows with distance; the simulated photon survival uses
    ``exp(-gamma * L)`` instead (see :attr:`QuantumChannelConfig.transmittance`).
    """
    if gamma < 0 or length_km < 0:
        raise ConfigError("gamma and length_km must be non-negative")
    return -math.expm1(-gamma * length_km)


def session_rng(seed: int, session_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(session_id) & (2**64 - 1)]))


def run_bb84(
    n_qubits: int,
    channel: QuantumChannelConfig,
    policy: QkdPolicy,
    seed: int,
    session_id: int = 0,
    *,
    force_basis_match: bool = False,
) -> QkdSessionResult:
    if n_qubits < 1:
        raise ConfigError(f"n_qubits must be positive, got {n_qubits}")
    if n_qubits * (1.0 - policy.sample_fraction) < policy.min_key_bits:
        raise ConfigError(
            f"n_qubits={n_qubits} cannot yield {policy.min_key_bits} key bits "
            f"after disclosing a {policy.sample_fraction} sample"
        )
    rng = session_rng(seed, session_id)
    n = n_qubits
    alice_bits = rng.integers(0, 2, n, dtype=np.uint8)
    alice_basis = rng.integers(0, 2, n, dtype=np.uint8)

    survived = rng.random(n) < channel.transmittance
    alice_bits, alice_basis = alice_bits[survived], alice_basis[survived]
    m = int(alice_bits.size)

    # intercept-resend: Eve measures in a random basis and resends her result
    intercepted = rng.random(m) < channel.eve_rate
    eve_basis = rng.integers(0, 2, m, dtype=np.uint8)
    eve_guess = rng.integers(0, 2, m, dtype=np.uint8)
    eve_bits = np.where(eve_basis == alice_basis, alice_bits, eve_guess)
    wire_bits = np.where(intercepted, eve_bits, alice_bits).astype(np.uint8)
    wire_basis = np.where(intercepted, eve_basis, alice_basis).astype(np.uint8)

    bob_basis = alice_basis.copy() if force_basis_match else rng.integers(0, 2, m, dtype=np.uint8)
    bob_guess = rng.integers(0, 2, m, dtype=np.uint8)
    bob_bits = np.where(bob_basis == wire_basis, wire_bits, bob_guess).astype(np.uint8)
    flips = rng.random(m) < channel.noise_flip_prob
    bob_bits ^= flips.astype(np.uint8)

    sifted = alice_basis == bob_basis
    a_sift, b_sift = alice_bits[sifted], bob_bits[sifted]
    s = int(a_sift.size)

    k = min(s, int(math.floor(policy.sample_fraction * s + 0.5)))
    if s > 0:
        k = max(k, 1)
    sample_pos = np.sort(rng.choice(s, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    mask = np.ones(s, dtype=bool)
    mask[sample_pos] = False
    key_pos = np.flatnonzero(mask)
    errors = int((a_sift[sample_pos] != b_sift[sample_pos]).sum())
    qber = errors / k if k else 0.0

    reason = None
    if qber > policy.qber_abort_threshold:
        reason = f"qber {qber:.4f} exceeds threshold {policy.qber_abort_threshold}"
    elif key_pos.size < policy.min_key_bits:
        reason = f"only {key_pos.size} key bits remain, need {policy.min_key_bits}"
    aborted = reason is not None
    empty = np.zeros(0, dtype=np.uint8)
    return QkdSessionResult(
        session_id=int(session_id),
        transmitted_count=n,
        received_count=m,
        sifted_bits=a_sift,
        receiver_sifted_bits=b_sift,
        sample_positions=sample_pos.astype(np.int64),
        key_positions=key_pos.astype(np.int64),
        sample_bits_disclosed=k,
        qber_estimate=qber,
        aborted=aborted,
        abort_reason=reason,
        key=empty if aborted else a_sift[key_pos],
        receiver_key=empty if aborted else b_sift[key_pos],
        success_probability=qkd_success_probability(channel.gamma, channel.length_km),
        transmittance=channel.transmittance,
        channel=channel,
    )


def sifted_fraction(result: QkdSessionResult) -> float:
    if result.received_count <= 0:
        raise ConfigError("sifted_fraction needs at least one received qubit")
    return result.sifted_count / result.received_count


def derive_key(result: QkdSessionResult, required_bits: int, *, offset: int = 0,
               receiver: bool = False) -> np.ndarray:
    """Bits ``[offset, offset + required_bits)`` of the session key.

    Only post-disclosure key bits are ever returned.  ``receiver`` selects the
    receiver's copy instead of the sender's.
    """
    if required_bits <= 0:
        raise ConfigError(f"required_bits must be positive, got {required_bits}")
    if offset < 0:
        raise ConfigError(f"offset must be non-negative, got {offset}")
    if result.aborted:
        raise KeyMaterialError(f"session {result.session_id} aborted: {result.abort_reason}")
    source = result.receiver_key if receiver else result.key
    if offset + required_bits > source.size:
        raise KeyExhaustionError(
            f"need {required_bits} key bits at offset {offset}, session {result.session_id} "
            f"has {source.size}; run additional QKD sessions"
        )
    return source[offset:offset + required_bits].copy()
