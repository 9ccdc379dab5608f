import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgnoise import synth
from ecgnoise.signal_io import Level
from ecgnoise.synth import EcgParams, NoiseSpec


def test_peak_count_at_60_bpm():
    params = EcgParams(heart_rate=60.0)
    for seed in range(5):
        ecg = synth.gen_clean_ecg(params, 10.0, seed)
        # 5% RR jitter over 10 beats can add or drop one beat at the edges
        assert abs(synth.count_r_peaks(ecg, 256.0) - 10) <= 1


def test_peak_count_without_jitter():
    params = EcgParams(heart_rate=90.0, rr_jitter=0.0)
    ecg = synth.gen_clean_ecg(params, 20.0, 0)
    assert abs(synth.count_r_peaks(ecg, 256.0) - 30) <= 1


def test_zero_amplitudes_give_zero_signal():
    waves = {k: (0.0, off, w) for k, (_, off, w) in synth.DEFAULT_WAVES.items()}
    assert not synth.gen_clean_ecg(EcgParams(waves=waves), 3.0, 1).any()


def test_clean_ecg_deterministic():
    p = EcgParams(heart_rate=75)
    np.testing.assert_array_equal(synth.gen_clean_ecg(p, 4.0, 9), synth.gen_clean_ecg(p, 4.0, 9))
    assert not np.array_equal(synth.gen_clean_ecg(p, 4.0, 9), synth.gen_clean_ecg(p, 4.0, 10))


def test_params_validation():
    with pytest.raises(ValueError):
        EcgParams(heart_rate=10)
    with pytest.raises(ValueError):
        EcgParams(waves={"R": (1.0, 0.0, 0.0)})
    with pytest.raises(ValueError):
        NoiseSpec(muscle=-1)


def test_silent_spec_is_identity():
    x = synth.gen_clean_ecg(EcgParams(), 2.0, 0)
    np.testing.assert_array_equal(synth.add_noise(x, NoiseSpec(), 3), x)
    spec = NoiseSpec(muscle=0.5, snr_db=math.inf)
    np.testing.assert_array_equal(synth.add_noise(x, spec, 3), x)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 40), st.integers(0, 1000))
def test_snr_targeting(snr, seed):
    x = synth.gen_clean_ecg(EcgParams(), 2.0, seed)
    spec = NoiseSpec(baseline_wander=(0.3, 0.3), powerline=(0.1, 60.0), muscle=0.2, snr_db=snr)
    y = synth.add_noise(x, spec, seed)
    noise = y - x
    measured = 10 * math.log10(np.mean(x**2) / np.mean(noise**2))
    assert abs(measured - snr) < 0.1


def test_snr_zero_power_equal():
    x = synth.gen_clean_ecg(EcgParams(), 4.0, 2)
    y = synth.add_noise(x, NoiseSpec(muscle=1.0, snr_db=0.0), 5)
    assert abs(synth.snr_db(x, y)) < 0.1


def test_zero_power_signal_rejected():
    with pytest.raises(ValueError):
        synth.add_noise(np.zeros(100), NoiseSpec(muscle=1.0, snr_db=5.0), 0)


@pytest.mark.parametrize("freq", [50.0, 60.0])
def test_powerline_is_pure_tone(freq):
    fs, n = 256.0, 1024
    x = synth.gen_clean_ecg(EcgParams(), n / fs, 0)
    y = synth.add_noise(x, NoiseSpec(powerline=(0.2, freq)), 1, sample_rate=fs)
    mag = np.abs(np.fft.rfft(y - x))
    freqs = np.fft.rfftfreq(n, 1 / fs)
    peak = int(np.argmax(mag))
    assert abs(freqs[peak] - freq) <= fs / n
    # energy concentrated around the tone (bins adjacent to an off-grid tone leak)
    near = np.abs(freqs - freq) <= 2 * fs / n
    assert np.sum(mag[near] ** 2) / np.sum(mag**2) > 0.9
    np.testing.assert_allclose(np.std(y - x) * math.sqrt(2), 0.2, rtol=0.02)


def test_benchmark_sizes_and_labels():
    a, b, c = synth.make_benchmark(3, sizes=(12, 5, 4), window_len=128)
    assert (len(a), len(b), len(c)) == (12, 5, 4)
    assert set(a.labels()) == {1} and set(b.labels()) == {2} and set(c.labels()) == {3}
    assert a.window_len == 128 and a.sample_rate == 256.0
    assert synth.make_benchmark.__defaults__[0] == (2000, 400, 400)


def test_benchmark_deterministic(tmp_path):
    from ecgnoise.signal_io import save_dataset

    paths = []
    for name in ("x", "y"):
        sets = synth.make_benchmark(11, sizes=(4, 3, 3), window_len=64)
        for i, ds in enumerate(sets):
            p = tmp_path / f"{name}{i}.ecgw"
            save_dataset(ds, p)
            paths.append(p)
    for i in range(3):
        assert paths[i].read_bytes() == paths[i + 3].read_bytes()


def test_level_noise_power_ordering():
    power = {}
    for level in (Level.LEVEL1, Level.LEVEL2, Level.LEVEL3):
        kids = np.random.SeedSequence([4, int(level)]).spawn(40)
        per = []
        for kid in kids:
            clean, observed = synth.make_window(level, kid)
            per.append(np.mean((observed - clean) ** 2))
        power[level] = np.mean(per)
    assert power[Level.LEVEL3] > power[Level.LEVEL2] > power[Level.LEVEL1]


def test_level3_wander_dominates_qrs():
    kid = np.random.SeedSequence(0)
    clean, observed = synth.make_window(Level.LEVEL3, kid)
    # the added noise swings further than the clean R peaks
    assert np.ptp(observed - clean) > 2 * clean.max()


def test_qrs_heuristic_separates_levels():
    # R-peak count on the observed window matches the clean one far more often at Level 2
    def agree(level):
        hits = 0
        for kid in np.random.SeedSequence([8, int(level)]).spawn(30):
            clean, observed = synth.make_window(level, kid, window_len=1024)
            hits += synth.count_r_peaks(clean, 256.0) == synth.count_r_peaks(observed, 256.0)
        return hits / 30

    assert agree(Level.LEVEL2) > agree(Level.LEVEL3)


def test_unknown_profile():
    with pytest.raises(ValueError, match="profile"):
        synth.make_corpus(Level.LEVEL1, 2, 0, profile="nope")
