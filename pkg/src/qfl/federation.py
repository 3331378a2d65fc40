"""Round-based federated training with QKD-keyed weight transport.

One round: establish link keys -> local training -> upload -> aggregate ->
broadcast -> evaluate.  Server-side functions only ever see weights or wire
bytes, never client data.  Every random stream is derived from
``(master_seed, purpose, client_id, round)`` so results do not depend on the
order in which client work is scheduled.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .data import Dataset, generate_dataset, partition_iid, partition_label_skew, train_test_split
from .errors import (
    ConfigError,
    FormatError,
    KeyMaterialError,
    NumericError,
    ProtocolError,
    TamperError,
)
from .model import (
    Batch,
    LayerSpec,
    ModelParameters,
    backward,
    evaluate,
    forward,
    init_model,
    loss_ce,
    sgd_step,
)
from .qkd import QkdPolicy, QkdSessionResult, QuantumChannelConfig, run_bb84
from .transport import (
    CIPHER_HEADER_SIZE,
    WEIGHTS_HEADER_SIZE,
    Ciphertext,
    QkdKey,
    decrypt_weights,
    deserialize_weights,
    encrypt_weights,
    fnv1a64,
    serialize_weights,
    wire_length,
)

log = logging.getLogger(__name__)

# stream tags for seed derivation
_DATA, _PARTITION, _INIT, _TRAIN, _SESSION, _KEY_ID, _QKD, _TAMPER = range(8)
UPLOAD, DOWNLOAD = 0, 1

TransitHook = Callable[[int, int, str, bytes], bytes]


def derive_seed(master_seed: int, *parts: int) -> int:
    seq = np.random.SeedSequence([int(master_seed), *[int(p) for p in parts]])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


# --------------------------------------------------------------------------- state

@dataclass
class ClientState:
    client_id: int
    shard: Dataset
    weights: ModelParameters
    master_seed: int = 0
    stale: bool = False

    def __post_init__(self) -> None:
        if len(self.shard) < 1:
            raise ConfigError(f"client {self.client_id} has an empty shard")

    @property
    def n_samples(self) -> int:
        return len(self.shard)

    def round_seed(self, round_index: int) -> int:
        return derive_seed(self.master_seed, _TRAIN, self.client_id, round_index)


@dataclass
class ServerState:
    global_weights: ModelParameters
    client_ids: list[int]
    policy: QkdPolicy = field(default_factory=QkdPolicy)
    channels: dict[int, QuantumChannelConfig] = field(default_factory=dict)
    round: int = 0


@dataclass(frozen=True)
class AggregationMode:
    rule: str = "weighted"
    normalization: str = "by_total_samples"

    def __post_init__(self) -> None:
        if self.rule not in ("weighted", "incremental"):
            raise ConfigError(f"unknown aggregation rule {self.rule!r}")
        if self.normalization not in ("by_total_samples", "by_client_count"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")


class Update(NamedTuple):
    client_id: int
    n_samples: int
    weights: ModelParameters


@dataclass(frozen=True)
class LinkKeys:
    """Per-link key material for one round.

    Upload keys come from bits ``[0, n)`` of the session key and download keys
    from ``[n, 2n)``; the client holds the sender copy, the server the receiver copy.
    """

    client_id: int
    sessions: tuple[QkdSessionResult, ...]
    upload_client: QkdKey
    upload_server: QkdKey
    download_server: QkdKey
    download_client: QkdKey

    @property
    def qber(self) -> float:
        return max(s.qber_estimate for s in self.sessions)

    @property
    def bits_used(self) -> int:
        return 2 * len(self.upload_client)


@dataclass(frozen=True)
class LinkAbort:
    client_id: int
    reason: str
    sessions: tuple[QkdSessionResult, ...] = ()

    @property
    def qber(self) -> float | None:
        return max((s.qber_estimate for s in self.sessions), default=None)


@dataclass
class ClientRoundRecord:
    client_id: int
    n_samples: int
    local_loss: float | None = None
    qber: float | None = None
    key_bits_used: int = 0
    aborted: bool = False
    abort_reason: str | None = None
    success_probability: float | None = None
    transmittance: float | None = None
    qkd_sessions: list[dict] = field(default_factory=list)


@dataclass
class RoundRecord:
    t: int
    clients: list[ClientRoundRecord]
    accuracy: float
    loss: float
    aggregation: str
    normalization: str
    participants: int
    failed: bool = False
    failure_reason: str | None = None
    global_digest: str = ""
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


TIMING_FIELDS = ("wall_time_s",)


# --------------------------------------------------------------------------- client side

def client_local_train(state: ClientState, global_w: ModelParameters, arch: Sequence[LayerSpec],
                       epochs: int, batch_size: int, lr: float,
                       round_index: int) -> tuple[ModelParameters, float]:
    """Mini-batch SGD from ``global_w`` over the client's shard.

    Returns the new weights and the mean batch loss of the final epoch.  When a
    single batch covers the shard the stored sample order is used as is.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = state.n_samples
    rng = np.random.default_rng(state.round_seed(round_index))
    w = global_w
    losses: list[float] = []
    for _ in range(epochs):
        order = np.arange(n) if batch_size >= n else rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = Batch(state.shard.inputs[idx], state.shard.labels[idx])
            probs, cache = forward(w, arch, batch)
            loss = loss_ce(probs, batch.labels)
            if not math.isfinite(loss):
                raise NumericError(f"client {state.client_id}: non-finite loss")
            w = sgd_step(w, backward(w, arch, batch, cache), lr)
            losses.append(loss)
    return w, float(np.mean(losses))


def client_package_update(local_w: ModelParameters, link_key: QkdKey, *,
                          used_key_ids: set[int] | None = None,
                          strict_otp: bool = False) -> Ciphertext:
    """Encrypt local weights for upload.  Keys are single-use within a round."""
    if used_key_ids is not None:
        if link_key.key_id in used_key_ids:
            raise ProtocolError(f"key id {link_key.key_id} already used this round")
        used_key_ids.add(link_key.key_id)
    return encrypt_weights(local_w, link_key, strict_otp=strict_otp)


def client_install(state: ClientState, data: bytes, key: QkdKey | None, *,
                   strict_otp: bool = False) -> None:
    if key is None:
        w = deserialize_weights(data)
    else:
        w = decrypt_weights(Ciphertext.from_bytes(data), key, strict_otp=strict_otp)
    state.weights = w
    state.stale = False


# --------------------------------------------------------------------------- server side

def aggregation_coefficients(sizes: Sequence[int], normalization: str) -> list[float]:
    if not sizes:
        raise ConfigError("no updates to aggregate")
    if normalization == "by_total_samples":
        total = sum(sizes)
        return [n / total for n in sizes]
    if normalization == "by_client_count":
        return [n / len(sizes) for n in sizes]
    raise ConfigError(f"unknown normalization {normalization!r}")


def _as_updates(updates: Iterable) -> list[Update]:
    out = sorted((Update(*u) for u in updates), key=lambda u: u.client_id)
    if not out:
        raise ConfigError("zero non-aborted updates; round fails and global weights stay unchanged")
    shapes = out[0].weights.shapes
    for u in out[1:]:
        if u.weights.shapes != shapes:
            raise ConfigError(f"client {u.client_id} architecture {u.weights.shapes} differs from {shapes}")
    return out


def server_aggregate(updates: Iterable, mode: AggregationMode = AggregationMode()) -> ModelParameters:
    """Sample-weighted average of client weights (summed in client-id order)."""
    ups = _as_updates(updates)
    coeffs = aggregation_coefficients([u.n_samples for u in ups], mode.normalization)
    acc = [coeffs[0] * t for t in ups[0].weights]
    for c, u in zip(coeffs[1:], ups[1:]):
        acc = [a + c * t for a, t in zip(acc, u.weights)]
    return ModelParameters(tuple(acc))


def server_incremental_update(w_global: ModelParameters, updates: Iterable,
                              mode: AggregationMode = AggregationMode()) -> ModelParameters:
    """``w + sum_i c_i (w_i - w)`` with the same coefficients as :func:`server_aggregate`."""
    ups = _as_updates(updates)
    if ups[0].weights.shapes != w_global.shapes:
        raise ConfigError("update architecture differs from the global model")
    coeffs = aggregation_coefficients([u.n_samples for u in ups], mode.normalization)
    delta = [np.zeros_like(t) for t in w_global]
    for c, u in zip(coeffs, ups):
        delta = [d + c * (t - g) for d, t, g in zip(delta, u.weights, w_global)]
    return ModelParameters(tuple(g + d for g, d in zip(w_global, delta)))


def apply_aggregation(w_global: ModelParameters, updates: Iterable, mode: AggregationMode) -> ModelParameters:
    if mode.rule == "incremental":
        return server_incremental_update(w_global, updates, mode)
    return server_aggregate(updates, mode)


def server_receive(data: bytes, key: QkdKey | None, *, strict_otp: bool = False) -> ModelParameters:
    if key is None:
        w = deserialize_weights(data)
    else:
        w = decrypt_weights(Ciphertext.from_bytes(data), key, strict_otp=strict_otp)
    if not w.all_finite():
        raise NumericError("received non-finite weights")
    return w


def _session_id(seed: int, client_id: int, round_index: int, attempt: int) -> int:
    return derive_seed(seed, _SESSION, client_id, round_index, attempt)


def key_id_for(seed: int, client_id: int, round_index: int, direction: int) -> int:
    return derive_seed(seed, _KEY_ID, client_id, round_index, direction)


def _extra_qubits(policy: QkdPolicy, deficit: int, n_qubits: int, yielded: int,
                  channel: QuantumChannelConfig) -> int:
    rate = yielded / n_qubits if yielded else 0.5 * (1 - policy.sample_fraction) * channel.transmittance
    floor = math.ceil(policy.min_key_bits / (1 - policy.sample_fraction)) + 1
    if rate <= 0:
        return max(n_qubits, floor)
    return max(floor, math.ceil(1.25 * (deficit + policy.min_key_bits) / rate))


def establish_link_keys(server: ServerState, client_ids: Iterable[int],
                        round_index: int, n_qubits: int, seed: int, *,
                        bits_per_direction: int = 128) -> dict[int, LinkKeys | LinkAbort]:
    """One BB84 session per link; a short key triggers exactly one extra session."""
    need = 2 * bits_per_direction
    out: dict[int, LinkKeys | LinkAbort] = {}
    for cid in map(int, client_ids):
        channel = server.channels.get(cid, QuantumChannelConfig())
        sessions: list[QkdSessionResult] = []
        sender, receiver = [], []
        abort: str | None = None
        size = n_qubits
        for attempt in range(2):
            s = run_bb84(size, channel, server.policy, seed, _session_id(seed, cid, round_index, attempt))
            sessions.append(s)
            if s.aborted and s.qber_estimate > server.policy.qber_abort_threshold:
                abort = f"security: {s.abort_reason}"
                break
            if not s.aborted:
                sender.append(s.key)
                receiver.append(s.receiver_key)
            have = sum(k.size for k in sender)
            if have >= need:
                break
            size = _extra_qubits(server.policy, need - have, size, s.key_length, channel)
        else:
            abort = f"key exhausted: {sum(k.size for k in sender)} of {need} bits after {len(sessions)} sessions"
        if abort is not None:
            out[cid] = LinkAbort(cid, abort, tuple(sessions))
            continue
        a = np.concatenate(sender)
        b = np.concatenate(receiver)
        n = bits_per_direction
        up_id = key_id_for(seed, cid, round_index, UPLOAD)
        down_id = key_id_for(seed, cid, round_index, DOWNLOAD)
        out[cid] = LinkKeys(
            cid,
            tuple(sessions),
            upload_client=QkdKey(a[:n], up_id),
            upload_server=QkdKey(b[:n], up_id),
            download_server=QkdKey(b[n:2 * n], down_id),
            download_client=QkdKey(a[n:2 * n], down_id),
        )
    return out


def broadcast_global(server: ServerState, w_global: ModelParameters,
                     keys: dict[int, LinkKeys | None], *, used_key_ids: set[int] | None = None,
                     strict_otp: bool = False) -> dict[int, bytes]:
    """Wire bytes for every recipient; ``None`` key means plaintext transport."""
    out: dict[int, bytes] = {}
    plain = None
    for cid in sorted(keys):
        link = keys[cid]
        if link is None:
            if plain is None:
                plain = serialize_weights(w_global)
            out[cid] = plain
            continue
        key = link.download_server
        if used_key_ids is not None:
            if key.key_id in used_key_ids:
                raise ProtocolError(f"key id {key.key_id} already used this round")
            used_key_ids.add(key.key_id)
        out[cid] = encrypt_weights(w_global, key, strict_otp=strict_otp).to_bytes()
    return out


def weights_digest(w: ModelParameters) -> str:
    return f"{fnv1a64(serialize_weights(w)):016x}"


# --------------------------------------------------------------------------- orchestration

@dataclass
class TrainingResult:
    records: list[RoundRecord]
    global_weights: ModelParameters
    initial_weights: ModelParameters
    history: list[ModelParameters] = field(default_factory=list)
    halted: bool = False
    halt_reason: str | None = None


def flip_bit(data: bytes, position: int) -> bytes:
    buf = bytearray(data)
    buf[position // 8] ^= 1 << (position % 8)
    return bytes(buf)


class Federation:
    """Owns the clients, the server state and the held-out test set for one experiment."""

    def __init__(self, cfg, *, transit_hook: TransitHook | None = None,
                 client_order: Sequence[int] | None = None) -> None:
        self.cfg = cfg
        self.arch = cfg.arch()
        self.seed = cfg.master_seed
        self.encrypted = cfg.transport == "encrypted"
        self.strict_otp = cfg.qkd.strict_otp
        self.transit_hook = transit_hook
        self.client_order = client_order
        self.mode = AggregationMode(cfg.training.aggregation, cfg.training.normalization)

        data = generate_dataset(cfg.data.synthetic(derive_seed(self.seed, _DATA)))
        train, self.test = train_test_split(data, cfg.data.test_fraction, derive_seed(self.seed, _DATA, 1))
        part_seed = derive_seed(self.seed, _PARTITION)
        if cfg.data.partition == "label_skew":
            partition = partition_label_skew(train, cfg.num_clients, cfg.data.skew, part_seed)
        else:
            partition = partition_iid(train, cfg.num_clients, part_seed)

        w0 = init_model(self.arch, derive_seed(self.seed, _INIT), cfg.input_shape)
        self.initial_weights = w0
        self.clients = [ClientState(i, shard, w0, self.seed) for i, shard in enumerate(partition.client_shards)]
        self.server = ServerState(
            global_weights=w0,
            client_ids=[c.client_id for c in self.clients],
            policy=cfg.qkd.policy.policy(),
            channels={c.client_id: cfg.channel_for(c.client_id) for c in self.clients},
        )

    @property
    def bits_per_direction(self) -> int:
        if self.strict_otp:
            return max(self.cfg.qkd.key_bits, 8 * wire_length(self.initial_weights.shapes))
        return self.cfg.qkd.key_bits

    def _transit(self, t: int, cid: int, direction: str, data: bytes) -> bytes:
        if direction == "up" and self.cfg.tampered(cid, t):
            # flip one payload bit past the frame header
            header = CIPHER_HEADER_SIZE if self.encrypted else WEIGHTS_HEADER_SIZE
            span = (len(data) - header) * 8
            data = flip_bit(data, header * 8 + derive_seed(self.seed, _TAMPER, cid, t) % span)
        if self.transit_hook is not None:
            data = self.transit_hook(t, cid, direction, data)
        return data

    def _client_work(self, client: ClientState, link: LinkKeys | None, t: int,
                     used: set[int]) -> tuple[bytes | None, float | None, str | None]:
        tr = self.cfg.training
        try:
            local_w, local_loss = client_local_train(client, client.weights, self.arch,
                                                     tr.epochs, tr.batch_size, tr.lr, t)
        except NumericError as exc:
            return None, None, f"numeric divergence: {exc}"
        if link is None:
            return serialize_weights(local_w), local_loss, None
        ct = client_package_update(local_w, link.upload_client, used_key_ids=used, strict_otp=self.strict_otp)
        return ct.to_bytes(), local_loss, None

    def run_round(self, t: int) -> RoundRecord:
        started = time.perf_counter()
        cfg = self.cfg
        self.server.round = t
        by_id = {c.client_id: c for c in self.clients}
        records = {cid: ClientRoundRecord(cid, by_id[cid].n_samples) for cid in by_id}

        links: dict[int, LinkKeys | None] = {}
        if self.encrypted:
            established = establish_link_keys(self.server, list(by_id), t, cfg.qkd.n_qubits,
                                              self.seed, bits_per_direction=self.bits_per_direction)
            for cid, link in established.items():
                rec = records[cid]
                rec.qkd_sessions = [s.to_record() for s in link.sessions]
                rec.qber = link.qber
                rec.success_probability = link.sessions[0].success_probability
                rec.transmittance = link.sessions[0].transmittance
                if isinstance(link, LinkAbort):
                    rec.aborted, rec.abort_reason = True, link.reason
                else:
                    rec.key_bits_used = link.bits_used
                    links[cid] = link
        else:
            links = {cid: None for cid in by_id}

        # client work is independent; results are consumed in client-id order
        used_up: set[int] = set()
        order = list(self.client_order) if self.client_order is not None else sorted(links)
        order = [cid for cid in order if cid in links]
        work = lambda cid: (cid, self._client_work(by_id[cid], links[cid], t, used_up))  # noqa: E731
        if cfg.training.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.training.workers) as pool:
                results = dict(pool.map(work, order))
        else:
            results = dict(map(work, order))

        updates: list[Update] = []
        for cid in sorted(results):
            payload, local_loss, error = results[cid]
            rec = records[cid]
            rec.local_loss = local_loss
            if error is not None:
                rec.aborted, rec.abort_reason = True, error
                continue
            data = self._transit(t, cid, "up", payload)
            link = links[cid]
            try:
                w = server_receive(data, None if link is None else link.upload_server,
                                   strict_otp=self.strict_otp)
            except TamperError as exc:
                rec.aborted, rec.abort_reason = True, f"tamper: {exc}"
                continue
            except (FormatError, KeyMaterialError, NumericError) as exc:
                rec.aborted, rec.abort_reason = True, f"bad upload: {exc}"
                continue
            updates.append(Update(cid, by_id[cid].n_samples, w))

        failed, reason = False, None
        if updates:
            self.server.global_weights = apply_aggregation(self.server.global_weights, updates, self.mode)
            recipients = {u.client_id: links[u.client_id] for u in updates}
            used_down: set[int] = set()
            sent = broadcast_global(self.server, self.server.global_weights, recipients,
                                    used_key_ids=used_down, strict_otp=self.strict_otp)
            for cid, data in sent.items():
                data = self._transit(t, cid, "down", data)
                link = recipients[cid]
                try:
                    client_install(by_id[cid], data, None if link is None else link.download_client,
                                   strict_otp=self.strict_otp)
                except (TamperError, FormatError, KeyMaterialError) as exc:
                    by_id[cid].stale = True
                    records[cid].aborted = True
                    records[cid].abort_reason = f"download rejected: {exc}"
        else:
            failed = True
            if self.encrypted and all(isinstance(l, LinkAbort) for l in established.values()):
                reason = "security alert: every QKD link aborted"
            else:
                reason = "no client produced a usable update"
            log.warning("round %d failed: %s", t, reason)
        for c in self.clients:
            if c.client_id not in {u.client_id for u in updates}:
                c.stale = True

        acc, loss = evaluate(self.server.global_weights, self.arch, self.test)
        return RoundRecord(
            t=t,
            clients=[records[cid] for cid in sorted(records)],
            accuracy=acc,
            loss=loss,
            aggregation=self.mode.rule,
            normalization=self.mode.normalization,
            participants=len(updates),
            failed=failed,
            failure_reason=reason,
            global_digest=weights_digest(self.server.global_weights),
            wall_time_s=time.perf_counter() - started,
        )

    def run(self, *, keep_history: bool = False) -> TrainingResult:
        tr = self.cfg.training
        result = TrainingResult([], self.server.global_weights, self.initial_weights)
        calm = 0
        for t in range(tr.rounds):
            rec = self.run_round(t)
            result.records.append(rec)
            if keep_history:
                result.history.append(self.server.global_weights)
            if rec.failed and self.cfg.fail_fast:
                result.halted, result.halt_reason = True, f"round {t} failed: {rec.failure_reason}"
                break
            if tr.early_stop_epsilon > 0 and len(result.records) > 1:
                calm = calm + 1 if abs(rec.loss - result.records[-2].loss) < tr.early_stop_epsilon else 0
                if calm >= tr.patience:
                    log.info("early stop after round %d", t)
                    break
        result.global_weights = self.server.global_weights
        return result


def run_training(cfg, *, transit_hook: TransitHook | None = None,
                 client_order: Sequence[int] | None = None,
                 keep_history: bool = False) -> TrainingResult:
    return Federation(cfg, transit_hook=transit_hook, client_order=client_order).run(keep_history=keep_history)
