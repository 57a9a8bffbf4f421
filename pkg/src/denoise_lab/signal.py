"""Time/frequency transforms, level control, SNR mixing and complex ratio masks."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 22050
FRAME_LEN = 512
FRAME_STEP = 128
MASK_EPS = 1e-8
MASK_CLIP = 10.0
NORM_DBFS = -20.0

# Returned by rms_dbfs for an all-zero signal.
SILENCE_DBFS = float("-inf")

RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_CUTOFF = 0.45
RESAMPLE_KAISER_BETA = 5.0
WSUM_FLOOR = 1e-2
MAX_RESAMPLE_FACTOR = 1 << 16


class SignalError(ValueError):
    """Raised for invalid signal inputs (length, shape, level, rate)."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 2:
            # stereo is downmixed by channel averaging
            x = x.mean(axis=1)
        if x.ndim != 1:
            raise SignalError(f"expected mono samples, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise SignalError("waveform contains NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise SignalError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    data: np.ndarray  # complex [frames, bins]
    frame_len: int = FRAME_LEN
    frame_step: int = FRAME_STEP
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def with_data(self, data) -> "Spectrogram":
        return Spectrogram(data, self.frame_len, self.frame_step, self.sample_rate)


@dataclass(frozen=True)
class ComplexMask:
    data: np.ndarray  # complex [frames, bins]
    clip_magnitude: float = MASK_CLIP

    @property
    def shape(self):
        return self.data.shape


def _as_waveform(x, sample_rate=SAMPLE_RATE) -> Waveform:
    return x if isinstance(x, Waveform) else Waveform(np.asarray(x), sample_rate)


def hann(frame_len: int) -> np.ndarray:
    return sps.get_window("hann", frame_len, fftbins=True)


def n_frames(n_samples: int, frame_len: int = FRAME_LEN, frame_step: int = FRAME_STEP) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // frame_step + 1


def frame_signal(x: np.ndarray, frame_len: int, frame_step: int) -> np.ndarray:
    """Return a read-only [frames, frame_len] view of ``x``; trailing partial frame dropped."""
    n = n_frames(len(x), frame_len, frame_step)
    if n == 0:
        raise SignalError(f"signal of {len(x)} samples is shorter than one frame ({frame_len})")
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::frame_step][:n]


def stft(x, frame_len: int = FRAME_LEN, frame_step: int = FRAME_STEP) -> Spectrogram:
    """One-sided Hann-windowed STFT without padding."""
    x = _as_waveform(x)
    if frame_len % frame_step:
        raise SignalError(f"frame_step {frame_step} must divide frame_len {frame_len}")
    frames = frame_signal(x.samples, frame_len, frame_step)
    data = np.fft.rfft(frames * hann(frame_len), axis=1)
    return Spectrogram(data, frame_len, frame_step, x.sample_rate)


def istft(S: Spectrogram) -> Waveform:
    """Overlap-add synthesis normalized by the summed squared window.

    Output length is ``(frames - 1) * frame_step + frame_len``. Near the ends
    the window sum tends to zero; it is floored at ``WSUM_FLOOR`` times its
    steady-state value so that a modified (inconsistent) spectrogram cannot be
    amplified without bound there. The floor only touches the outermost ~18
    samples at the default settings.
    """
    frames, bins = S.data.shape
    if bins != S.frame_len // 2 + 1:
        raise SignalError(f"{bins} bins inconsistent with frame_len {S.frame_len}")
    if S.frame_len % S.frame_step:
        raise SignalError("frame_step must divide frame_len")
    w = hann(S.frame_len)
    n = (frames - 1) * S.frame_step + S.frame_len if frames else 0
    y = np.zeros(n)
    wsum = np.zeros(n)
    if frames:
        seg = np.fft.irfft(S.data, n=S.frame_len, axis=1) * w
        # frames overlap frame_len/frame_step times; add one phase at a time
        hop_ratio = S.frame_len // S.frame_step
        for phase in range(hop_ratio):
            idx = seg[phase::hop_ratio]
            if idx.shape[0] == 0:
                continue
            start = phase * S.frame_step
            stride = S.frame_len
            stop = start + idx.shape[0] * stride
            y[start:stop] += idx.reshape(-1)
            wsum[start:stop] += np.tile(w * w, idx.shape[0])
    floor = WSUM_FLOOR * np.sum(w * w) / S.frame_step
    return Waveform(y / np.maximum(wsum, floor), S.sample_rate)


def rms(x) -> float:
    x = _as_waveform(x)
    if len(x) == 0:
        raise SignalError("empty signal")
    return float(np.sqrt(np.mean(x.samples ** 2)))


def rms_dbfs(x) -> float:
    """RMS level in dB relative to a full-scale square wave (RMS 1 == 0 dBFS).

    An all-zero signal returns ``SILENCE_DBFS`` (negative infinity).
    """
    r = rms(x)
    if r == 0.0:
        return SILENCE_DBFS
    return 20.0 * np.log10(r)


def normalize_rms(x, target: float = NORM_DBFS) -> Waveform:
    x = _as_waveform(x)
    level = rms_dbfs(x)
    if not np.isfinite(level):
        raise SignalError("cannot normalize a zero-energy signal")
    gain = 10.0 ** ((target - level) / 20.0)
    return x.with_samples(x.samples * gain)


def mix_at_snr(speech, noise, snr: float, norm_target: float = NORM_DBFS):
    """Mix ``speech`` with ``noise`` at ``snr`` dB.

    Both components are normalized to ``norm_target`` dBFS (noise truncated to
    the speech length) and the noise is then scaled by ``10**(-snr/20)``.
    Returns ``(mixture, scaled_noise)``.
    """
    speech = _as_waveform(speech)
    noise = _as_waveform(noise)
    if speech.sample_rate != noise.sample_rate:
        raise SignalError(
            f"sample rate mismatch: speech {speech.sample_rate} vs noise {noise.sample_rate}"
        )
    if len(noise) < len(speech):
        raise SignalError(f"noise ({len(noise)}) shorter than speech ({len(speech)})")
    s = normalize_rms(speech, norm_target)
    n = normalize_rms(noise.with_samples(noise.samples[: len(speech)]), norm_target)
    scaled = n.samples * 10.0 ** (-snr / 20.0)
    return s.with_samples(s.samples + scaled), n.with_samples(scaled)


def _resample_ratio(source: int, target: int) -> tuple[int, int]:
    if target <= 0 or source <= 0:
        raise SignalError(f"sample rates must be positive ({source} -> {target})")
    ratio = Fraction(int(target), int(source))
    if ratio.numerator > MAX_RESAMPLE_FACTOR or ratio.denominator > MAX_RESAMPLE_FACTOR:
        raise SignalError(f"resampling ratio {ratio} is too large to realize")
    return ratio.numerator, ratio.denominator


def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc anti-alias filter for a polyphase resampler."""
    numtaps = RESAMPLE_TAPS_PER_PHASE * up + 1
    # cutoff relative to the Nyquist frequency of the upsampled stream
    cutoff = RESAMPLE_CUTOFF * 2.0 / max(up, down)
    # resample_poly applies the factor-of-up gain itself
    return sps.firwin(numtaps, cutoff, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(x, target_rate: int) -> Waveform:
    x = _as_waveform(x)
    up, down = _resample_ratio(x.sample_rate, target_rate)
    if up == down:
        return x
    y = sps.resample_poly(x.samples, up, down, window=resample_filter(up, down))
    n_out = int(round(len(x) * up / down))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return Waveform(y[:n_out], int(target_rate))


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise SignalError(f"shape mismatch: {a.shape} vs {b.shape}")


def ideal_complex_mask(
    clean: Spectrogram, mix: Spectrogram, clip: float = MASK_CLIP, eps: float = MASK_EPS
) -> ComplexMask:
    """Complex ratio clean/mix with a magnitude floor on the mixture, clipped to ``clip``."""
    _check_same_shape(clean, mix)
    c, m = clean.data, mix.data
    denom = np.maximum(np.abs(m) ** 2, eps * eps)
    M = c * np.conj(m) / denom
    mag = np.abs(M)
    over = mag > clip
    M[over] *= clip / mag[over]
    return ComplexMask(M, clip)


def apply_mask(mix: Spectrogram, M: ComplexMask) -> Spectrogram:
    _check_same_shape(mix, M)
    return mix.with_data(mix.data * M.data)
