"""Seeded synthetic single-lead ECG and artifact generator.

Beats are sums of Gaussian bumps (P, Q, R, S, T). Noise is a mix of
sinusoidal baseline wander, sinusoidal powerline interference and white
muscle-like noise, scaled to a target SNR. ``make_benchmark`` builds
clean / moderately noisy / severely noisy corpora labelled Level 1/2/3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .signal_io import Dataset, Level, SignalWindow

# (amplitude mV, offset from R peak s, width s)
DEFAULT_WAVES = {
    "P": (0.15, -0.20, 0.025),
    "Q": (-0.10, -0.035, 0.010),
    "R": (1.00, 0.0, 0.010),
    "S": (-0.25, 0.035, 0.010),
    "T": (0.30, 0.28, 0.040),
}


@dataclass(frozen=True)
class EcgParams:
    heart_rate: float = 70.0
    sample_rate: float = 256.0
    waves: dict = field(default_factory=lambda: dict(DEFAULT_WAVES))
    rr_jitter: float = 0.05

    def __post_init__(self):
        if not 30.0 <= self.heart_rate <= 220.0:
            raise ValueError(f"heart_rate must lie in [30, 220] bpm, got {self.heart_rate}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0.0 <= self.rr_jitter < 1.0:
            raise ValueError("rr_jitter must lie in [0, 1)")
        for name, (_, _, width) in self.waves.items():
            if width <= 0:
                raise ValueError(f"wave {name} has non-positive width")

    @property
    def r_amplitude(self) -> float:
        return abs(self.waves["R"][0]) if "R" in self.waves else 0.0


@dataclass(frozen=True)
class NoiseSpec:
    baseline_wander: tuple[float, float] = (0.0, 0.3)  # amplitude mV, Hz
    powerline: tuple[float, float] = (0.0, 50.0)  # amplitude mV, Hz
    muscle: float = 0.0  # white-noise std, mV
    snr_db: float | None = None  # None: keep amplitudes as given

    def __post_init__(self):
        if self.baseline_wander[0] < 0 or self.powerline[0] < 0 or self.muscle < 0:
            raise ValueError("noise amplitudes must be non-negative")

    @property
    def silent(self) -> bool:
        return self.baseline_wander[0] == 0 and self.powerline[0] == 0 and self.muscle == 0


def gen_clean_ecg(params: EcgParams, duration_s: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fs = params.sample_rate
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    rr = 60.0 / params.heart_rate
    signal = np.zeros(n)
    # first beat falls in [-rr, 0) so the window starts at a random cardiac phase
    beat = -rng.uniform(0.0, rr)
    margin = 0.5
    while beat < duration_s + margin:
        for amp, offset, width in params.waves.values():
            if amp == 0:
                continue
            centre = beat + offset
            lo = max(0, int((centre - 5 * width) * fs))
            hi = min(n, int(math.ceil((centre + 5 * width) * fs)) + 1)
            if lo < hi:
                signal[lo:hi] += amp * np.exp(-0.5 * ((t[lo:hi] - centre) / width) ** 2)
        beat += rr * (1.0 + params.rr_jitter * rng.uniform(-1.0, 1.0))
    return signal


def noise_components(n: int, sample_rate: float, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sample_rate
    amp_bw, f_bw = spec.baseline_wander
    amp_pl, f_pl = spec.powerline
    noise = amp_bw * np.sin(2 * np.pi * f_bw * t + rng.uniform(0, 2 * np.pi))
    noise += amp_pl * np.sin(2 * np.pi * f_pl * t + rng.uniform(0, 2 * np.pi))
    noise += spec.muscle * rng.standard_normal(n)
    return noise


def add_noise(signal: np.ndarray, spec: NoiseSpec, seed: int, sample_rate: float = 256.0) -> np.ndarray:
    """Add the artifact mix; with a finite ``snr_db`` the mix is rescaled so
    10*log10(P_signal / P_noise) equals it (powers are mean squares)."""
    x = np.asarray(signal, dtype=np.float64)
    if spec.silent or (spec.snr_db is not None and math.isinf(spec.snr_db) and spec.snr_db > 0):
        return x.copy()
    rng = np.random.default_rng(seed)
    noise = noise_components(x.size, sample_rate, spec, rng)
    if spec.snr_db is not None:
        p_sig = float(np.mean(x * x))
        p_noise = float(np.mean(noise * noise))
        if p_sig == 0:
            raise ValueError("cannot target an SNR on a zero-power signal")
        if p_noise == 0:
            return x.copy()
        noise *= math.sqrt(p_sig / (p_noise * 10 ** (spec.snr_db / 10)))
    return x + noise


def snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return 10 * math.log10(np.mean(clean**2) / np.mean(noise**2))


# -- benchmark corpora --------------------------------------------------------

PROFILES = {
    # heart-rate range (bpm), per-wave amplitude scale ranges
    "default": {"hr": (55.0, 95.0), "scale": {"R": (0.8, 1.2), "T": (0.8, 1.2), "P": (0.8, 1.2)}, "waves": DEFAULT_WAVES},
    "shifted": {
        "hr": (85.0, 130.0),
        "scale": {"R": (0.6, 0.9), "T": (1.2, 1.8), "P": (0.5, 0.9)},
        "waves": {
            "P": (0.10, -0.16, 0.020),
            "Q": (-0.05, -0.040, 0.012),
            "R": (0.90, 0.0, 0.014),
            "S": (-0.40, 0.040, 0.014),
            "T": (0.30, 0.24, 0.050),
        },
    },
}

LEVEL_SNR_DB = {Level.LEVEL1: (30.0, 40.0), Level.LEVEL2: (5.0, 5.0), Level.LEVEL3: (-5.0, -5.0)}
LEVEL3_WANDER_RATIO = (2.0, 3.0)  # extra wander amplitude, in multiples of the R amplitude


def _random_params(rng: np.random.Generator, profile: dict, sample_rate: float) -> EcgParams:
    waves = {}
    for name, (amp, offset, width) in profile["waves"].items():
        lo, hi = profile["scale"].get(name, (1.0, 1.0))
        waves[name] = (amp * rng.uniform(lo, hi), offset, width)
    hr = rng.uniform(*profile["hr"])
    return EcgParams(heart_rate=hr, sample_rate=sample_rate, waves=waves)


def _random_noise(rng: np.random.Generator, snr: float) -> NoiseSpec:
    return NoiseSpec(
        baseline_wander=(rng.uniform(0.0, 1.0), rng.uniform(0.2, 0.5)),
        powerline=(rng.uniform(0.0, 1.0), float(rng.choice([50.0, 60.0]))),
        muscle=rng.uniform(0.2, 1.0),
        snr_db=snr,
    )


def make_window(
    level: Level,
    seed_seq: np.random.SeedSequence,
    window_len: int = 512,
    sample_rate: float = 256.0,
    profile: str = "default",
) -> tuple[np.ndarray, np.ndarray]:
    """One (clean, observed) window pair for the given level."""
    prof = PROFILES[profile]
    rng = np.random.default_rng(seed_seq)
    params = _random_params(rng, prof, sample_rate)
    ecg_seed, noise_seed, wander_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=3))
    clean = gen_clean_ecg(params, window_len / sample_rate, ecg_seed)
    lo, hi = LEVEL_SNR_DB[level]
    observed = add_noise(clean, _random_noise(rng, rng.uniform(lo, hi)), noise_seed, sample_rate)
    if level == Level.LEVEL3:
        amp = rng.uniform(*LEVEL3_WANDER_RATIO) * params.r_amplitude
        wander = NoiseSpec(baseline_wander=(amp, rng.uniform(0.2, 0.5)))
        observed = add_noise(observed, wander, wander_seed, sample_rate)
    return clean, observed


def make_corpus(
    level: Level,
    count: int,
    seed: int,
    window_len: int = 512,
    sample_rate: float = 256.0,
    profile: str = "default",
) -> Dataset:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    children = np.random.SeedSequence([seed, int(level)]).spawn(count)
    windows = []
    for i, child in enumerate(children):
        _, observed = make_window(level, child, window_len, sample_rate, profile)
        windows.append(SignalWindow(observed, sample_rate, level, f"synth-{profile}-L{int(level)}:{i}"))
    return Dataset(tuple(windows), window_len, sample_rate)


def make_benchmark(
    seed: int,
    sizes: tuple[int, int, int] = (2000, 400, 400),
    window_len: int = 512,
    sample_rate: float = 256.0,
    profile: str = "default",
) -> tuple[Dataset, Dataset, Dataset]:
    """Level 1/2/3 corpora: SNR 30-40 dB, 5 dB, and -5 dB plus strong wander."""
    levels = (Level.LEVEL1, Level.LEVEL2, Level.LEVEL3)
    return tuple(  # type: ignore[return-value]
        make_corpus(lv, n, seed, window_len, sample_rate, profile) for lv, n in zip(levels, sizes)
    )


def count_r_peaks(signal: np.ndarray, sample_rate: float, threshold: float = 0.5, refractory_s: float = 0.25) -> int:
    """Count local maxima above ``threshold`` separated by a refractory period."""
    x = np.asarray(signal, dtype=np.float64)
    cand = np.flatnonzero((x[1:-1] > threshold) & (x[1:-1] >= x[:-2]) & (x[1:-1] > x[2:])) + 1
    peaks: list[int] = []
    gap = int(refractory_s * sample_rate)
    for i in cand:
        if peaks and i - peaks[-1] < gap:
            if x[i] > x[peaks[-1]]:
                peaks[-1] = i
            continue
        peaks.append(int(i))
    return len(peaks)
