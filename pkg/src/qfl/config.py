"""Experiment configuration: JSON in, fully resolved and validated model out."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SyntheticConfig
from .errors import ConfigError
from .model import LayerSpec, check_arch, default_arch
from .qkd import QkdPolicy, QuantumChannelConfig

U64_MAX = 2**64 - 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    samples_per_class: int = Field(200, ge=1)
    image_size: tuple[int, int] = (16, 16)
    noise_sigma: float = Field(0.1, ge=0.0)
    partition: Literal["iid", "label_skew"] = "iid"
    skew: float = Field(0.0, ge=0.0, le=1.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _image_size(self):
        if min(self.image_size) < 8:
            raise ValueError(f"image_size must be at least (8, 8), got {self.image_size}")
        return self

    def synthetic(self, seed: int) -> SyntheticConfig:
        return SyntheticConfig(self.samples_per_class, tuple(self.image_size), self.noise_sigma, seed)


class LayerSection(_Strict):
    kind: Literal["conv2d", "maxpool2d", "relu", "flatten", "dense", "softmax"]
    in_channels: Optional[int] = Field(None, ge=1)
    out_channels: Optional[int] = Field(None, ge=1)
    in_features: Optional[int] = Field(None, ge=1)
    out_features: Optional[int] = Field(None, ge=1)

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, self.in_channels, self.out_channels, self.in_features, self.out_features)


class ModelSection(_Strict):
    conv_channels: int = Field(4, ge=1)
    layers: Optional[list[LayerSection]] = None

    def arch(self) -> list[LayerSpec]:
        assert self.layers is not None
        return [layer.spec() for layer in self.layers]


class TrainingSection(_Strict):
    rounds: int = Field(10, ge=0)
    epochs: int = Field(1, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.05, ge=0.0)
    early_stop_epsilon: float = Field(0.0, ge=0.0)
    patience: int = Field(3, ge=1)
    aggregation: Literal["weighted", "incremental"] = "weighted"
    normalization: Literal["by_total_samples", "by_client_count"] = "by_total_samples"
    workers: int = Field(1, ge=1)


class ChannelSection(_Strict):
    gamma: float = Field(0.0, ge=0.0)
    length_km: float = Field(0.0, ge=0.0)
    eve_rate: float = Field(0.0, ge=0.0, le=1.0)
    noise_flip_prob: float = Field(0.0, ge=0.0, lt=1.0)

    def channel(self) -> QuantumChannelConfig:
        return QuantumChannelConfig(self.gamma, self.length_km, self.eve_rate, self.noise_flip_prob)


class PolicySection(_Strict):
    qber_abort_threshold: float = Field(0.11, gt=0.0, lt=0.5)
    sample_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    min_key_bits: int = Field(128, ge=1)

    def policy(self) -> QkdPolicy:
        return QkdPolicy(self.qber_abort_threshold, self.sample_fraction, self.min_key_bits)


class QkdSection(_Strict):
    n_qubits: int = Field(2048, ge=1)
    channel: ChannelSection = Field(default_factory=ChannelSection)
    links: dict[int, ChannelSection] = Field(default_factory=dict)
    policy: PolicySection = Field(default_factory=PolicySection)
    key_bits: int = Field(128, ge=128)
    strict_otp: bool = False


class AttackSection(_Strict):
    kind: Literal["none", "eavesdrop", "tamper"] = "none"
    links: Optional[list[int]] = None  # None means every link
    eve_rate: float = Field(1.0, ge=0.0, le=1.0)
    rounds: Optional[list[int]] = None  # tamper rounds; None means every round


class ExperimentConfig(_Strict):
    master_seed: int = Field(0, ge=0, le=U64_MAX)
    num_clients: int = Field(4, ge=1)
    transport: Literal["plaintext", "encrypted"] = "encrypted"
    fail_fast: bool = False
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    qkd: QkdSection = Field(default_factory=QkdSection)
    attack: AttackSection = Field(default_factory=AttackSection)

    @model_validator(mode="after")
    def _resolve(self):
        if self.model.layers is None:
            arch = default_arch(tuple(self.data.image_size), self.model.conv_channels)
            self.model.layers = [LayerSection(**spec.to_dict()) for spec in arch]
        check_arch(self.model.arch(), (1, *self.data.image_size))

        total = 2 * self.data.samples_per_class
        n_test = sum(int(self.data.test_fraction * self.data.samples_per_class + 0.5) for _ in range(2))
        if n_test == 0 or n_test == total:
            raise ValueError(f"data.test_fraction={self.data.test_fraction} leaves an empty split")
        if self.num_clients > total - n_test:
            raise ValueError(
                f"num_clients={self.num_clients} exceeds the {total - n_test} training samples"
            )
        for link in list(self.qkd.links) + list(self.attack.links or []):
            if not 0 <= link < self.num_clients:
                raise ValueError(f"link id {link} outside [0, {self.num_clients - 1}]")
        return self

    # ---------------------------------------------------------------- derived values

    def arch(self) -> list[LayerSpec]:
        return self.model.arch()

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (1, *self.data.image_size)

    def channel_for(self, client_id: int) -> QuantumChannelConfig:
        section = self.qkd.links.get(client_id, self.qkd.channel)
        channel = section.channel()
        if self.attack.kind == "eavesdrop" and self._attacked(client_id):
            channel = QuantumChannelConfig(channel.gamma, channel.length_km, self.attack.eve_rate,
                                           channel.noise_flip_prob)
        return channel

    def tampered(self, client_id: int, round_index: int) -> bool:
        if self.attack.kind != "tamper" or not self._attacked(client_id):
            return False
        return self.attack.rounds is None or round_index in self.attack.rounds

    def _attacked(self, client_id: int) -> bool:
        return self.attack.links is None or client_id in self.attack.links

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            lines.append(f"unknown field {loc!r}")
        else:
            lines.append(f"{loc or 'config'}: {err['msg']}")
    return "; ".join(lines)


def parse_config(source: str | Path | dict | None = None, **overrides) -> ExperimentConfig:
    """Parse a JSON document (path, text, or dict) into a resolved config.

    Keyword overrides are applied at the top level (``master_seed=7``).
    """
    if source is None:
        doc: dict = {}
    elif isinstance(source, dict):
        doc = dict(source)
    else:
        text = str(source)
        path = Path(text) if not text.lstrip().startswith("{") else None
        if path is not None:
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
