"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from misaligned_oac.channel import (
    SymbolBlock,
    assemble_colored_noise,
    draw_whitened_noise,
    observe_slot,
)
from misaligned_oac.estimators import estimate, relative_error
from misaligned_oac.feel import (
    BlobTask,
    ChannelConfig,
    FeelSetup,
    decode_sum,
    encode_update,
    fedavg_reference,
    init_state,
    run_feel,
    run_round,
)
from misaligned_oac.model import DeviceProfile, colored_noise_covariance, validate_geometry

from conftest import random_block, random_geometry, record_criterion

ML = ("direct_ml", "whitened_ml", "sp_ml")


def test_criterion_1_estimator_equivalence():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for M in (2, 3, 4):
        for L in (4, 8, 16):
            for esn0 in (0.0, 10.0, 20.0):
                for k in range(100):
                    rng = np.random.default_rng([1, M, L, int(esn0), k])
                    g = random_geometry(rng, M)
                    obs = observe_slot(g, random_block(rng, M, L), esn0_db=esn0, seed=[2, M, L, k])
                    est = [estimate(e, obs).estimate for e in ML]
                    for a in range(3):
                        for b in range(a + 1, 3):
                            worst = max(worst, relative_error(est[a], est[b]))
                    count += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60
    record_criterion(1, ok, f"{count} instances, worst pairwise relative deviation {worst:.2e} "
                            f"(<= 1e-6), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_criterion_2_noiseless_exactness():
    worst, count = 0.0, 0
    for k in range(300):
        rng = np.random.default_rng([3, k])
        M = int(rng.integers(1, 5))
        L = int(rng.choice([1, 4, 8, 16, 32]))
        g = random_geometry(rng, M, cfo_max=1.0 if k % 2 else 0.0)
        block = random_block(rng, M, L)
        obs = observe_slot(g, block, n0=0.0)
        for e in ML:
            worst = max(worst, relative_error(estimate(e, obs).estimate, block.target_sum))
        count += 1
    worst_aligned = 0.0
    for k in range(100):
        rng = np.random.default_rng([4, k])
        M = int(rng.integers(1, 5))
        g = random_geometry(rng, M, unit_gain=True)
        block = random_block(rng, M, 16)
        obs = observe_slot(g, block, n0=0.0, standard=False)
        worst_aligned = max(worst_aligned, float(np.max(np.abs(estimate("aligned", obs).estimate - block.target_sum))))
    ok = worst <= 1e-8 and worst_aligned <= 1e-12
    record_criterion(2, ok, f"ML worst relative error {worst:.2e} over {count} instances (<= 1e-8); "
                            f"aligned unit-gain worst abs error {worst_aligned:.1e}")
    assert ok


def test_criterion_3_noise_statistics():
    g = validate_geometry([DeviceProfile(0.0), DeviceProfile(0.2), DeviceProfile(0.55)])
    L, n0, n = 3, 1.0, 100_000
    draws = [draw_whitened_noise(g, L, n0, seed=[5, s]) for s in range(n)]
    y = np.array([d.vector() for d in draws])
    z = np.array([assemble_colored_noise(g, d) for d in draws])

    def worst_rel(emp, true):
        big = np.abs(true) > 0.05 * n0
        rel = np.max(np.abs(emp[big] - true[big]) / np.abs(true[big]))
        small = np.max(np.abs(emp[~big])) if np.any(~big) else 0.0
        return rel, small

    white_true = np.diag(n0 / np.tile(g.sub_lengths, L + 1)[: y.shape[1]])
    w_rel, w_small = worst_rel(y.T @ y.conj() / n, white_true)
    c_rel, c_small = worst_rel(z.T @ z.conj() / n, colored_noise_covariance(g, L, n0))
    ok = w_rel <= 0.05 and c_rel <= 0.05 and w_small <= 0.05 * n0 and c_small <= 0.05 * n0
    record_criterion(3, ok, f"whitened worst rel {w_rel:.3f}, colored worst rel {c_rel:.3f} (<= 0.05); "
                            f"max |emp| on near-zero entries {max(w_small, c_small):.3f}")
    assert ok


def test_criterion_4_aligned_penalty():
    t0 = time.perf_counter()
    M, L, packets = 4, 1000, 1000  # 10^6 sum-symbol errors per offset setting

    def error_variance(tau_max, tag):
        sq = 0.0
        for p in range(packets):
            rng = np.random.default_rng([6, tag, p])
            taus = [0.0, tau_max] + list(rng.uniform(0.0, tau_max, M - 2))
            g = validate_geometry([DeviceProfile(float(t)) for t in taus])
            block = random_block(rng, M, L)
            obs = observe_slot(g, block, esn0_db=10.0, seed=[7, tag, p], standard=False)
            # compare against the noise level of the same packet
            err = estimate("aligned", obs).estimate - block.target_sum
            sq += np.sum(np.abs(err) ** 2) / obs.n0
        return sq / (packets * L)

    base = error_variance(0.0, 0)
    r5 = error_variance(0.5, 5) / base
    r9 = error_variance(0.9, 9) / base
    elapsed = time.perf_counter() - t0
    ok = abs(r5 - 2.0) <= 0.1 and abs(r9 - 10.0) <= 0.5 and elapsed < 60
    record_criterion(4, ok, f"variance ratio {r5:.3f} at tau_M=0.5 (2 +- 5%), {r9:.3f} at tau_M=0.9 "
                            f"(10 +- 5%), {packets * L:.0e} symbol errors per setting, {elapsed:.1f} s")
    assert ok


def _available_bytes():
    try:
        with open("/proc/meminfo") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return None


@pytest.mark.slow
def test_criterion_5_linear_time():
    budget, M = 120.0, 4
    n_big = M * 4096
    need = 16 * n_big * n_big
    avail = _available_bytes()
    cmd = [sys.executable, "-m", "misaligned_oac.benchmark", "--devices", str(M), "--lengths", "1024,4096"]
    t0 = time.perf_counter()
    times = {}
    sp = subprocess.run(cmd + ["--estimators", "sp_ml", "--repeats", "3"], capture_output=True, text=True,
                        timeout=budget)
    for line in sp.stdout.splitlines():
        rec = json.loads(line)
        times[(rec["estimator"], rec["L"])] = rec["seconds"]
    notes = []
    if avail is not None and avail < 1.1 * need:
        notes.append(f"dense L=4096 needs {need / 2**30:.1f} GiB, {avail / 2**30:.1f} GiB available; not run")
        dense_cmd = cmd[:-1] + ["1024"]
    else:
        dense_cmd = cmd
    remaining = budget - (time.perf_counter() - t0)
    proc = subprocess.Popen(dense_cmd + ["--estimators", "direct_ml"], stdout=subprocess.PIPE, text=True)
    try:
        out, _ = proc.communicate(timeout=max(remaining, 1.0))
    except subprocess.TimeoutExpired:
        proc.kill()
        out, _ = proc.communicate()
        notes.append(f"dense direct solve did not finish within the {budget:.0f} s budget")
    for line in out.splitlines():
        rec = json.loads(line)
        times[(rec["estimator"], rec["L"])] = rec["seconds"]
    elapsed = time.perf_counter() - t0

    sp_ratio = times[("sp_ml", 4096)] / times[("sp_ml", 1024)]
    dense = (times.get(("direct_ml", 1024)), times.get(("direct_ml", 4096)))
    dense_ratio = dense[1] / dense[0] if None not in dense else math.nan
    ok = sp_ratio <= 5 and dense_ratio >= 20 and elapsed < budget
    dense_txt = ", ".join(f"L={L}: {t:.2f} s" if t is not None else f"L={L}: n/a" for L, t in zip((1024, 4096), dense))
    record_criterion(5, ok, f"sp_ml {times[('sp_ml', 1024)]:.2f} s -> {times[('sp_ml', 4096)]:.2f} s, "
                            f"ratio {sp_ratio:.2f} (<= 5); dense direct {dense_txt}, ratio {dense_ratio:.1f} (>= 20); "
                            f"benchmark {elapsed:.0f} s (< {budget:.0f} s)" + ("; " + "; ".join(notes) if notes else ""))
    assert sp_ratio <= 5
    assert ok, "; ".join(notes) or "dense direct solve ratio or time budget not met"


def test_criterion_6_aggregation_identity():
    task = BlobTask()
    train, test = task.datasets()
    setup = FeelSetup(task, train, test, ChannelConfig(tau_max=0.0, phi_max=0.0, packet_length=64))
    worst = 0.0
    for seed in range(3):
        state = init_state(setup, 40, seed=seed)
        ref = fedavg_reference(state, setup, 4)
        new = run_round(state, setup, "sp_ml", math.inf, 4)
        worst = max(worst, float(np.max(np.abs(new.global_model - ref))))
    ok = worst <= 1e-9
    record_criterion(6, ok, f"max |theta_round - theta_fedavg| = {worst:.1e} (<= 1e-9)")
    assert ok


TASK = BlobTask()
TRAIN, TEST = TASK.datasets()


def final_accuracy(estimator, esn0_db, tau, phi, seed=0):
    setup = FeelSetup(TASK, TRAIN, TEST, ChannelConfig(tau_max=tau, phi_max=phi, packet_length=64))
    t0 = time.perf_counter()
    state = run_feel(setup, n_devices=40, k_active=4, rounds=100, estimator_id=estimator,
                     esn0_db=esn0_db, seed=seed)
    return state.history[-1].test_accuracy, time.perf_counter() - t0


@pytest.fixture(scope="module")
def baseline():
    return final_accuracy("aligned", math.inf, 0.0, 0.0)


@pytest.mark.slow
class TestCriterion7:
    def test_a_high_esn0_ordering(self, baseline):
        base, tb = baseline
        sp, ts = final_accuracy("sp_ml", 15.0, 0.5, math.pi / 2)
        al, ta = final_accuracy("aligned", 15.0, 0.5, math.pi / 2)
        ok = base - sp <= 0.02 and al < sp and max(tb, ts, ta) < 600
        record_criterion("7a", ok, f"15 dB, phi=pi/2, tau_M=0.5: baseline {base:.4f}, sp_ml {sp:.4f} "
                                   f"(gap {100 * (base - sp):.2f} pts <= 2), aligned {al:.4f} (< sp_ml); "
                                   f"slowest run {max(tb, ts, ta):.0f} s")
        assert ok

    def test_b_severe_phase_noiseless(self):
        sp, ts = final_accuracy("sp_ml", math.inf, 0.5, math.pi)
        al, ta = final_accuracy("aligned", math.inf, 0.5, math.pi)
        ok = sp - al >= 0.10 and max(ts, ta) < 600
        record_criterion("7b", ok, f"noiseless, phi=pi: sp_ml {sp:.4f}, aligned {al:.4f} "
                                   f"(gap {100 * (sp - al):.1f} pts >= 10)")
        assert ok

    def test_c_low_esn0_crossover(self):
        sp, ts = final_accuracy("sp_ml", -5.0, 0.5, math.pi / 2)
        al, ta = final_accuracy("aligned", -5.0, 0.5, math.pi / 2)
        ok = al >= sp and max(ts, ta) < 600
        record_criterion("7c", ok, f"-5 dB, phi=pi/2: aligned {al:.4f} >= sp_ml {sp:.4f}")
        assert ok


def test_criterion_8_codec_round_trip():
    rng = np.random.default_rng(8)
    odd = partial = 0
    for _ in range(1000):
        d = int(rng.integers(1, 2000))
        L = int(rng.integers(1, 200))
        theta = rng.standard_normal(d) * 10.0 ** rng.uniform(-3, 3)
        packets = encode_update(theta, L)
        assert len(packets) == math.ceil(d / (2 * L))
        np.testing.assert_array_equal(decode_sum(packets, d), theta)
        odd += d % 2
        partial += (d % (2 * L)) != 0
    ok = odd > 0 and partial > 0
    record_criterion(8, ok, f"1000 random (d, L) pairs exact, {odd} odd d, {partial} partial last packets")
    assert ok
