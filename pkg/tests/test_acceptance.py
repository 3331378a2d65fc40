"""Acceptance gate: one test per headline criterion, each printing PASS/FAIL."""

import math
import time

import numpy as np
import pytest

from conftest import fd_gradient, max_relative_error, random_small_network
from qfl.config import parse_config
from qfl.errors import KeyMaterialError, TamperError
from qfl.experiments import canonical_metrics, compare_baseline_encrypted
from qfl.federation import Federation, Update, run_training, server_aggregate, server_incremental_update
from qfl.model import ModelParameters, backward, forward
from qfl.qkd import QkdPolicy, QuantumChannelConfig, qkd_success_probability, run_bb84, sifted_fraction
from qfl.transport import Ciphertext, QkdKey, decrypt_weights, encrypt_weights

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(request, pytestconfig):
    """Yield a reporter; the criterion line is printed whether the body passes or not."""
    state = {"detail": ""}

    def report(detail):
        state["detail"] = detail

    yield report
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {request.node.name}: {state['detail']}")


def test_c1_accuracy_parity(verdict):
    cfg = parse_config({"num_clients": 4, "training": {"rounds": 10}})
    start = time.perf_counter()
    plain = Federation(cfg.model_copy(update={"transport": "plaintext"})).run(keep_history=True)
    enc = Federation(cfg.model_copy(update={"transport": "encrypted"})).run(keep_history=True)
    elapsed = time.perf_counter() - start
    verdict(f"{len(enc.history)} rounds, {elapsed:.1f}s")
    assert len(plain.history) == len(enc.history) == 10
    assert all(a.bitwise_equal(b) for a, b in zip(plain.history, enc.history))
    assert [r.global_digest for r in plain.records] == [r.global_digest for r in enc.records]
    assert [r.accuracy for r in plain.records] == [r.accuracy for r in enc.records]
    assert [r.loss for r in plain.records] == [r.loss for r in enc.records]
    assert not any(c.aborted for r in enc.records for c in r.clients)
    verdict(f"bitwise-equal weights in all 10 rounds, final acc {enc.records[-1].accuracy:.4f}, {elapsed:.1f}s")
    assert elapsed < 60


def test_c2_incremental_equals_direct(verdict):
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        size = int(rng.integers(1, 50))
        base = ModelParameters((rng.normal(0, 1, size),))
        ups = [Update(i, int(rng.integers(1, 1000)), ModelParameters((rng.normal(0, 1, size),)))
               for i in range(k)]
        direct = server_aggregate(ups).flatten()
        inc = server_incremental_update(base, ups).flatten()
        worst = max(worst, float(np.max(np.abs(direct - inc))))
    verdict(f"1000 instances, max |diff| {worst:.2e}")
    assert worst <= 1e-12


def test_c3_qkd_statistics(verdict):
    start = time.perf_counter()
    policy = QkdPolicy()
    clean = run_bb84(100_000, QuantumChannelConfig(), policy, seed=1)
    attacked = run_bb84(100_000, QuantumChannelConfig(eve_rate=1.0), policy, seed=2)
    p = math.exp(-0.05 * 10)
    lossy = run_bb84(100_000, QuantumChannelConfig(gamma=0.05, length_km=10), policy, seed=3)
    sigma = math.sqrt(100_000 * p * (1 - p))
    elapsed = time.perf_counter() - start
    verdict(
        f"clean qber {clean.qber_estimate}, attacked qber {attacked.qber_estimate:.4f} "
        f"over {attacked.sample_bits_disclosed} sampled of {attacked.sifted_count} sifted, "
        f"sifted fraction {sifted_fraction(clean):.4f}, received {lossy.received_count} vs {100_000 * p:.0f}, "
        f"{elapsed:.2f}s"
    )
    assert clean.qber_estimate == 0.0 and not clean.aborted
    assert attacked.sifted_count >= 10_000 and attacked.sample_bits_disclosed >= 10_000
    assert 0.23 <= attacked.qber_estimate <= 0.27
    assert attacked.aborted
    assert abs(sifted_fraction(clean) - 0.5) <= 0.02
    assert abs(lossy.received_count - 100_000 * p) <= 3 * sigma
    assert elapsed < 10


def test_c4_success_probability(verdict):
    got = qkd_success_probability(0.1, 10)
    far = qkd_success_probability(1.0, 1e4)
    verdict(f"f(0.1, 10) = {got!r}, f(g, 0) = {qkd_success_probability(0.3, 0)}, far = {far}")
    assert abs(got - (1 - math.exp(-1))) <= 1e-12
    assert qkd_success_probability(0.3, 0.0) == 0.0
    assert qkd_success_probability(0.0, 50.0) == 0.0
    assert far == 1.0
    vals = [qkd_success_probability(0.2, length) for length in (0, 1, 5, 20, 100, 400)]
    assert vals == sorted(vals)


def test_c5_crypto_roundtrip_and_tamper(verdict):
    rng = np.random.default_rng(55)
    for i in range(1000):
        n_tensors = int(rng.integers(1, 5))
        w = ModelParameters(tuple(
            rng.normal(0, 10, tuple(int(d) for d in rng.integers(1, 6, int(rng.integers(0, 4)))))
            for _ in range(n_tensors)
        ))
        key = QkdKey(rng.integers(0, 2, int(rng.integers(128, 1024))), key_id=i)
        strict = i % 10 == 0
        if strict:
            key = QkdKey(rng.integers(0, 2, 8 * 2048), key_id=i)
        assert decrypt_weights(encrypt_weights(w, key, strict_otp=strict), key, strict_otp=strict).bitwise_equal(w)

    w = ModelParameters((rng.normal(size=(4, 49)), rng.normal(size=4)))
    key = QkdKey(rng.integers(0, 2, 256), key_id=7)
    ct = encrypt_weights(w, key)
    detected = 0
    for pos in rng.choice(8 * len(ct.payload), size=100, replace=False):
        buf = bytearray(ct.payload)
        buf[pos // 8] ^= 1 << (pos % 8)
        try:
            decrypt_weights(Ciphertext(ct.key_id, bytes(buf), ct.integrity_tag), key)
        except TamperError:
            detected += 1

    wrong_detected = 0
    for _ in range(100):
        other = QkdKey(rng.integers(0, 2, 256), key_id=7)
        try:
            decrypt_weights(ct, other)
        except (TamperError, KeyMaterialError):
            wrong_detected += 1
    verdict(f"1000 roundtrips exact, bit flips {detected}/100, wrong keys {wrong_detected}/100")
    assert detected == 100
    assert wrong_detected >= 99


def test_c6_gradient_check(verdict):
    rng = np.random.default_rng(66)
    worst = 0.0
    for _ in range(20):
        arch, params, batch = random_small_network(rng)
        _, cache = forward(params, arch, batch)
        analytic = backward(params, arch, batch, cache).flatten()
        worst = max(worst, max_relative_error(analytic, fd_gradient(params, arch, batch)))
    verdict(f"20 networks, max relative error {worst:.2e}")
    assert worst < 1e-4


def test_c7_end_to_end_learning(verdict):
    cfg = parse_config({"num_clients": 4, "data": {"partition": "iid", "noise_sigma": 0.1},
                        "training": {"rounds": 10}})
    start = time.perf_counter()
    res = run_training(cfg)
    elapsed = time.perf_counter() - start
    losses = np.array([r.loss for r in res.records])
    smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
    final = res.records[-1].accuracy
    verdict(f"final accuracy {final:.4f}, smoothed loss {smooth[0]:.4f} -> {smooth[-1]:.4f}, {elapsed:.1f}s")
    assert len(res.records) == 10
    assert final >= 0.90
    assert np.all(np.diff(smooth) <= 0)
    assert elapsed < 60


def test_c8_compare_determinism(verdict, tmp_path):
    cfg = parse_config({"num_clients": 4})
    compare_baseline_encrypted(cfg, tmp_path / "a")
    compare_baseline_encrypted(cfg, tmp_path / "b")
    same = {
        mode: canonical_metrics(tmp_path / "a" / mode / "metrics.jsonl")
        == canonical_metrics(tmp_path / "b" / mode / "metrics.jsonl")
        for mode in ("plaintext", "encrypted")
    }
    reports_equal = (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    weights_equal = all(
        (tmp_path / "a" / m / "final_weights.qflw").read_bytes() == (tmp_path / "b" / m / "final_weights.qflw").read_bytes()
        for m in ("plaintext", "encrypted")
    )
    verdict(f"metrics identical {same}, report identical {reports_equal}, weights identical {weights_equal}")
    assert all(same.values()) and reports_equal and weights_equal
