"""Synthetic speech-like and noise-like test signals.

"Speech" is a sequence of syllable-rate bursts of harmonic complexes with a
gliding fundamental and formant-like spectral tilt; "noise" is coloured
Gaussian noise with a slowly varying envelope. Both are deterministic given
a seed so that the whole lab runs without external recordings.
"""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .signal import SAMPLE_RATE, Waveform


def speech_like(duration: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0_base = rng.uniform(95.0, 230.0)
    # slow intonation contour
    f0 = f0_base * (1.0 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.3, 0.9) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = rng.uniform([500, 1200, 2300], [900, 1900, 3100])
    x = np.zeros(n)
    n_harm = int(min(40, (0.45 * sample_rate) // (f0_base * 1.15)))
    for h in range(1, n_harm + 1):
        fh = h * f0_base
        amp = sum(np.exp(-0.5 * ((fh - f) / 160.0) ** 2) for f in formants) + 0.05 / h
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    # syllable envelope: bursts at ~4 Hz with short pauses
    env = np.zeros(n)
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.12, 0.3) * sample_rate)
        gap = int(rng.uniform(0.03, 0.15) * sample_rate)
        seg = min(length, n - pos)
        env[pos : pos + seg] = np.hanning(length)[:seg] * rng.uniform(0.5, 1.0)
        pos += length + gap
    x *= env
    x /= np.max(np.abs(x)) + 1e-12
    # recording noise floor about 60 dB below the peak
    x += 1e-3 * rng.standard_normal(n)
    return Waveform(0.5 * x, sample_rate)


def noise_like(duration: float, seed: int, sample_rate: int = SAMPLE_RATE, color: str | None = None) -> Waveform:
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    white = rng.standard_normal(n)
    color = color or rng.choice(["white", "pink", "lowpass", "babble-band"])
    if color == "white":
        x = white
    elif color == "pink":
        # Voss-style approximation via 1/f spectral shaping
        spec = np.fft.rfft(white)
        f = np.arange(spec.shape[0])
        f[0] = 1
        x = np.fft.irfft(spec / np.sqrt(f), n)
    elif color == "lowpass":
        b, a = sps.butter(2, 1500.0 / (sample_rate / 2))
        x = sps.lfilter(b, a, white)
    else:
        b, a = sps.butter(2, [300.0 / (sample_rate / 2), 3400.0 / (sample_rate / 2)], btype="band")
        x = sps.lfilter(b, a, white)
    t = np.arange(n) / sample_rate
    x *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t)
    x /= np.max(np.abs(x)) + 1e-12
    return Waveform(0.5 * x, sample_rate)


def noisy_pairs(n: int, seed: int, snr_range=(-15.0, 20.0), duration: float = 2.0,
                sample_rate: int = SAMPLE_RATE):
    """``n`` seeded ``(clean, mixture, snr)`` triples; clean is normalized like the mixture's speech."""
    from .signal import mix_at_snr, normalize_rms

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s_seed, n_seed = (int(v) for v in rng.integers(2 ** 31, size=2))
        snr = float(rng.uniform(*snr_range))
        speech = speech_like(duration, s_seed, sample_rate)
        mix, _ = mix_at_snr(speech, noise_like(duration, n_seed, sample_rate), snr)
        out.append((normalize_rms(speech), mix, snr))
    return out
