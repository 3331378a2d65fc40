"""Experiment runners: metrics files, baseline-vs-encrypted comparison, QKD sweeps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .config import ExperimentConfig
from .errors import QflError
from .federation import TIMING_FIELDS, RoundRecord, TrainingResult, run_training
from .qkd import QkdPolicy, QuantumChannelConfig, qkd_success_probability, run_bb84, sifted_fraction
from .transport import serialize_weights

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SECURITY = 3
EXIT_IO = 4

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
WEIGHTS_FILE = "final_weights.qflw"


class ExperimentIOError(QflError, OSError):
    """Writing an output file failed."""


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def round_to_json(record: RoundRecord) -> dict:
    return record.to_dict()


def emit_metrics(records: Sequence[RoundRecord], path: str | Path) -> None:
    """Write one JSON object per round."""
    if not records:
        raise ValueError("no round records to emit")
    lines = "".join(_dumps(round_to_json(r)) + "\n" for r in records)
    _write(Path(path), lines)


def _write(path: Path, text: str | bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(text, bytes):
            path.write_bytes(text)
        else:
            path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ExperimentIOError(f"cannot write {path}: {exc}") from exc


def strip_timing(obj):
    """Drop wall-clock fields so outputs can be compared byte for byte."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def canonical_metrics(path: str | Path) -> bytes:
    """Metrics file content with timing fields removed."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return "".join(_dumps(strip_timing(json.loads(line))) + "\n" for line in lines).encode()


def security_events(records: Iterable[RoundRecord]) -> list[dict]:
    events = []
    for r in records:
        for c in r.clients:
            if c.aborted or c.qber is not None:
                events.append({
                    "t": r.t,
                    "client_id": c.client_id,
                    "qber": c.qber,
                    "aborted": c.aborted,
                    "reason": c.abort_reason,
                    "success_probability": c.success_probability,
                    "transmittance": c.transmittance,
                })
        if r.failed:
            events.append({"t": r.t, "round_failed": True, "reason": r.failure_reason})
    return events


def link_metrics(cfg: ExperimentConfig) -> dict[str, dict]:
    out = {}
    for cid in range(cfg.num_clients):
        ch = cfg.channel_for(cid)
        out[str(cid)] = {
            "gamma": ch.gamma,
            "length_km": ch.length_km,
            "eve_rate": ch.eve_rate,
            "success_probability": qkd_success_probability(ch.gamma, ch.length_km),
            "transmittance": ch.transmittance,
        }
    return out


def summarize(cfg: ExperimentConfig, result: TrainingResult) -> dict:
    recs = result.records
    last = recs[-1] if recs else None
    return {
        "config": cfg.model_dump(mode="json"),
        "transport": cfg.transport,
        "rounds_completed": len(recs),
        "rounds_failed": [r.t for r in recs if r.failed],
        "all_rounds_failed": bool(recs) and all(r.failed for r in recs),
        "halted": result.halted,
        "halt_reason": result.halt_reason,
        "final_accuracy": last.accuracy if last else None,
        "final_loss": last.loss if last else None,
        "final_digest": last.global_digest if last else None,
        "accuracy_series": [r.accuracy for r in recs],
        "loss_series": [r.loss for r in recs],
        "links": link_metrics(cfg),
        "security_events": security_events(recs),
    }


def write_run_outputs(cfg: ExperimentConfig, result: TrainingResult, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    summary = summarize(cfg, result)
    if result.records:
        emit_metrics(result.records, out / METRICS_FILE)
    else:
        _write(out / METRICS_FILE, "")
    _write(out / SUMMARY_FILE, json.dumps(summary, sort_keys=True, indent=2, allow_nan=False) + "\n")
    _write(out / WEIGHTS_FILE, serialize_weights(result.global_weights))
    return summary


def execute_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> int:
    """Like :func:`run_experiment` but lets :class:`ExperimentIOError` propagate."""
    result = run_training(cfg)
    write_run_outputs(cfg, result, out_dir)
    return EXIT_SECURITY if result.halted else EXIT_OK


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> int:
    """Run one training pipeline and write metrics, summary and final weights."""
    try:
        return execute_experiment(cfg, out_dir)
    except ExperimentIOError as exc:
        log.error("%s", exc)
        return EXIT_IO


# --------------------------------------------------------------------------- comparison

@dataclass
class ComparisonReport:
    rows: list[tuple[str, float, float]]
    accuracy_delta: float
    loss_delta: float
    accuracy_parity: bool
    loss_parity: bool
    weights_parity: bool
    curves: dict[str, dict[str, list[float]]]
    security_events: list[dict]
    links: dict[str, dict]
    config: dict = field(default_factory=dict)

    @property
    def parity(self) -> bool:
        return self.accuracy_parity and self.loss_parity and self.weights_parity

    def to_dict(self) -> dict:
        return {
            "rows": [{"model": m, "accuracy": a, "loss": l} for m, a, l in self.rows],
            "accuracy_delta": self.accuracy_delta,
            "loss_delta": self.loss_delta,
            "accuracy_parity": self.accuracy_parity,
            "loss_parity": self.loss_parity,
            "weights_parity": self.weights_parity,
            "curves": self.curves,
            "security_events": self.security_events,
            "links": self.links,
            "config": self.config,
        }

    def render(self) -> str:
        text = render_table(self.rows)
        if not self.parity:
            text += "\n!! PARITY VIOLATION: encrypted and plaintext runs diverged !!\n"
        return text


def render_table(rows: Sequence[tuple[str, float, float]], title: str = "Comparison of Model Performance") -> str:
    header = ("Model", "Accuracy", "Loss")
    cells = [header] + [(name, f"{acc:.4f}", f"{loss:.4f}") for name, acc, loss in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(3)]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(r):
        return "| " + " | ".join(c.center(w) for c, w in zip(r, widths)) + " |"

    out = [title, rule, line(cells[0]), rule]
    out += [line(r) for r in cells[1:]]
    out.append(rule)
    return "\n".join(out) + "\n"


def compare_baseline_encrypted(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ComparisonReport:
    """Run plaintext and encrypted transport with identical seeds and compare."""
    runs: dict[str, TrainingResult] = {}
    cfgs: dict[str, ExperimentConfig] = {}
    for mode in ("plaintext", "encrypted"):
        cfgs[mode] = cfg.model_copy(update={"transport": mode})
        runs[mode] = run_training(cfgs[mode])
    base, enc = runs["plaintext"], runs["encrypted"]

    def final(r: TrainingResult) -> tuple[float, float]:
        if not r.records:
            return float("nan"), float("nan")
        return r.records[-1].accuracy, r.records[-1].loss

    (ba, bl), (ea, el) = final(base), final(enc)
    weights_parity = [r.global_digest for r in base.records] == [r.global_digest for r in enc.records] \
        and base.global_weights.bitwise_equal(enc.global_weights)
    report = ComparisonReport(
        rows=[("Baseline Model", ba, bl), ("Encrypted Model (After Decryption)", ea, el)],
        accuracy_delta=ea - ba,
        loss_delta=el - bl,
        accuracy_parity=[r.accuracy for r in base.records] == [r.accuracy for r in enc.records],
        loss_parity=[r.loss for r in base.records] == [r.loss for r in enc.records],
        weights_parity=weights_parity,
        curves={
            mode: {"accuracy": [r.accuracy for r in run.records], "loss": [r.loss for r in run.records]}
            for mode, run in runs.items()
        },
        security_events=security_events(enc.records),
        links=link_metrics(cfg),
        config=cfg.model_dump(mode="json"),
    )
    if not report.parity:
        log.error("parity violation between plaintext and encrypted transport")
    if out_dir is not None:
        out = Path(out_dir)
        for mode, run in runs.items():
            write_run_outputs(cfgs[mode], run, out / mode)
        _write(out / "report.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
        _write(out / "report.txt", report.render())
    return report


# --------------------------------------------------------------------------- QKD sweeps

def qkd_probe(gammas: Sequence[float], lengths: Sequence[float], eve_rates: Sequence[float],
              n_qubits: int = 100_000, seed: int = 0, policy: QkdPolicy | None = None) -> list[dict]:
    """Run one BB84 session per (gamma, length, eve_rate) combination."""
    policy = policy or QkdPolicy()
    out = []
    sid = 0
    for g in gammas:
        for length in lengths:
            for e in eve_rates:
                res = run_bb84(n_qubits, QuantumChannelConfig(g, length, e), policy, seed, sid)
                rec = res.to_record()
                rec["sifted_fraction"] = sifted_fraction(res) if res.received_count else None
                rec["received_fraction"] = res.received_count / res.transmitted_count
                out.append(rec)
                sid += 1
    return out
