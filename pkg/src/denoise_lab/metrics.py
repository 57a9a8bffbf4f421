"""Objective speech quality and intelligibility metrics for a (clean, degraded) pair.

All functions take the clean reference first. Distances are zero for an
identical pair; SNR-type measures saturate at their caps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import signal as sig
from .signal import Spectrogram, Waveform

SNR_CAP = 100.0
RESIDUAL_FLOOR = 1e-20

SEG_FRAME = 512
SEG_CLAMP = (-10.0, 35.0)
SEG_SILENCE_DBFS = -60.0

LOG_DELTA = 1e-8

LPC_ORDER = 10

# 25 critical bands (centre, bandwidth) in Hz, from Klatt's WSS table as
# used in Loizou's speech-enhancement evaluation code.
WSS_CENTRES = np.array([
    50.0, 120.0, 190.0, 260.0, 330.0, 400.0, 470.0, 540.0, 617.372, 703.378,
    798.717, 904.128, 1020.38, 1148.30, 1288.72, 1442.54, 1610.70, 1794.16,
    1993.93, 2211.08, 2446.71, 2701.97, 2978.04, 3276.17, 3597.63,
])
WSS_BANDWIDTHS = np.array([
    70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 77.3724, 86.0056, 95.3398,
    105.411, 116.256, 127.914, 140.423, 153.823, 168.154, 183.457, 199.776,
    217.153, 235.631, 255.255, 276.072, 298.126, 321.465, 346.136,
])
WSS_KMAX = 20.0
WSS_KLOCMAX = 1.0
WSS_ENERGY_FLOOR = 1e-10

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
EPS = np.finfo(float).eps

FEATURES = ("snr", "seg_snr", "spectral_mse", "mean_log_error", "wss", "cep", "stoi")

# Value stored for a sub-metric that could not be computed (it is also
# named in MetricVector.flags).
UNDEFINED_SENTINEL = 0.0


class MetricError(ValueError):
    pass


class MetricUndefinedError(MetricError):
    """The metric has no defined value for this input (e.g. no voiced frames)."""


def _pair(clean, degraded):
    c = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, float)
    d = degraded.samples if isinstance(degraded, Waveform) else np.asarray(degraded, float)
    if c.shape != d.shape:
        raise MetricError(f"length mismatch: {c.shape[0]} vs {d.shape[0]}")
    if isinstance(clean, Waveform) and isinstance(degraded, Waveform):
        if clean.sample_rate != degraded.sample_rate:
            raise MetricError("sample rate mismatch")
    return c, d


def _rate(x) -> int:
    return x.sample_rate if isinstance(x, Waveform) else sig.SAMPLE_RATE


def global_snr(clean, degraded) -> float:
    c, d = _pair(clean, degraded)
    residual = np.sum((d - c) ** 2)
    if residual < RESIDUAL_FLOOR:
        return SNR_CAP
    return float(min(SNR_CAP, 10.0 * np.log10(np.sum(c ** 2) / residual)))


def _frames(x, frame, hop):
    if len(x) < frame:
        raise MetricError(f"input of {len(x)} samples shorter than one {frame}-sample frame")
    return sig.frame_signal(x, frame, hop)


def segmental_snr(clean, degraded, frame: int = SEG_FRAME, clamp=SEG_CLAMP) -> float:
    """Mean of clamped per-frame SNRs over 50%-overlapping frames.

    Frames whose clean RMS is below -60 dBFS are treated as silence and skipped.
    """
    c, d = _pair(clean, degraded)
    cf = _frames(c, frame, frame // 2)
    ef = _frames(d - c, frame, frame // 2)
    sig_energy = np.sum(cf ** 2, axis=1)
    res_energy = np.sum(ef ** 2, axis=1)
    voiced = 10.0 * np.log10(sig_energy / frame + 1e-300) >= SEG_SILENCE_DBFS
    if not np.any(voiced):
        raise MetricUndefinedError("segmental SNR undefined: no voiced frames")
    with np.errstate(divide="ignore"):
        per_frame = 10.0 * np.log10(sig_energy[voiced] / res_energy[voiced])
    return float(np.mean(np.clip(per_frame, clamp[0], clamp[1])))


def _spec_pair(clean: Spectrogram, degraded: Spectrogram):
    a = clean.data if isinstance(clean, Spectrogram) else np.asarray(clean)
    b = degraded.data if isinstance(degraded, Spectrogram) else np.asarray(degraded)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def spectral_mse(clean: Spectrogram, degraded: Spectrogram) -> float:
    a, b = _spec_pair(clean, degraded)
    return float(np.mean(np.abs(a - b) ** 2))


def mean_log_error(clean: Spectrogram, degraded: Spectrogram, delta: float = LOG_DELTA) -> float:
    """Mean absolute difference of natural-log magnitudes (floored by ``delta``)."""
    a, b = _spec_pair(clean, degraded)
    return float(np.mean(np.abs(np.log(np.abs(a) + delta) - np.log(np.abs(b) + delta))))


def wss_filterbank(sample_rate: int, nfft: int = SEG_FRAME) -> np.ndarray:
    """Trapezoidal critical-band weights [25, nfft//2+1].

    Unity gain inside centre +/- bandwidth/2, linear skirts reaching zero at
    centre +/- bandwidth.
    """
    f = np.fft.rfftfreq(nfft, 1.0 / sample_rate)
    dist = np.abs(f[None, :] - WSS_CENTRES[:, None]) / WSS_BANDWIDTHS[:, None]
    return np.clip(2.0 - 2.0 * dist, 0.0, 1.0)


def _wss_band_energies(frames, bank):
    spec = np.abs(np.fft.rfft(frames * sig.hann(frames.shape[1]), axis=1)) ** 2
    return 10.0 * np.log10(np.maximum(spec @ bank.T, WSS_ENERGY_FLOOR))


def _nearest_peaks(energy, slope):
    """Energy of the local spectral peak reached by climbing from each band."""
    n_slopes = slope.shape[0]
    peaks = np.empty(n_slopes)
    for i in range(n_slopes):
        n = i
        if slope[i] > 0:
            while n < n_slopes and slope[n] > 0:
                n += 1
            peaks[i] = energy[n]
        else:
            while n >= 0 and slope[n] <= 0:
                n -= 1
            peaks[i] = energy[n + 1]
    return peaks


def _wss_weights(energy, slope):
    peaks = _nearest_peaks(energy, slope)
    e = energy[:-1]
    w_max = WSS_KMAX / (WSS_KMAX + energy.max() - e)
    w_loc = WSS_KLOCMAX / (WSS_KLOCMAX + peaks - e)
    return w_max * w_loc


def wss(clean, degraded, frame: int = SEG_FRAME) -> float:
    """Weighted spectral slope distance (lower is better)."""
    c, d = _pair(clean, degraded)
    bank = wss_filterbank(_rate(clean), frame)
    ce = _wss_band_energies(_frames(c, frame, frame // 2), bank)
    de = _wss_band_energies(_frames(d, frame, frame // 2), bank)
    cs = np.diff(ce, axis=1)
    ds = np.diff(de, axis=1)
    dist = np.empty(ce.shape[0])
    for t in range(ce.shape[0]):
        w = 0.5 * (_wss_weights(ce[t], cs[t]) + _wss_weights(de[t], ds[t]))
        dist[t] = np.sum(w * (cs[t] - ds[t]) ** 2) / np.sum(w)
    return float(np.mean(dist))


class SingularLpcError(MetricUndefinedError):
    pass


def levinson_durbin(r, order: int = LPC_ORDER):
    """Solve the autocorrelation normal equations.

    Returns ``(coeffs, error)`` where ``x[n] ~ sum_k coeffs[k] * x[n-1-k]``.
    Raises SingularLpcError when the recursion is numerically singular.
    """
    r = np.asarray(r, dtype=float)
    if r[0] <= 1e-20:
        raise SingularLpcError("zero-energy frame")
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1 : 0 : -1])
        k = -acc / err
        if not abs(k) < 1.0:
            raise SingularLpcError(f"reflection coefficient {k:.3g} at order {i}")
        a[1:i] = a[1:i] + k * a[i - 1 : 0 : -1]
        a[i] = k
        err *= 1.0 - k * k
        if err <= r[0] * 1e-12:
            raise SingularLpcError("prediction error vanished")
    return -a[1:], err


def autocorrelation(x, max_lag: int) -> np.ndarray:
    n = len(x)
    return np.array([np.dot(x[: n - k], x[k:]) for k in range(max_lag + 1)])


def lpc_to_cepstrum(coeffs, n_ceps: int | None = None) -> np.ndarray:
    """Cepstrum c_1..c_n of the all-pole model 1 / (1 - sum a_k z^-k)."""
    p = len(coeffs)
    n_ceps = n_ceps or p
    c = np.zeros(n_ceps + 1)
    for n in range(1, n_ceps + 1):
        acc = coeffs[n - 1] if n <= p else 0.0
        for k in range(max(1, n - p), n):
            acc += (k / n) * c[k] * coeffs[n - k - 1]
        c[n] = acc
    return c[1:]


def cepstral_distance(clean, degraded, frame: int = SEG_FRAME, order: int = LPC_ORDER) -> float:
    """Mean LPC-cepstrum distance, 10/ln10 * sqrt(2 * sum(dc^2)), over frames."""
    c, d = _pair(clean, degraded)
    w = sig.hann(frame)
    cf = _frames(c, frame, frame // 2)
    df = _frames(d, frame, frame // 2)
    dists = []
    for a, b in zip(cf, df):
        try:
            ca = lpc_to_cepstrum(levinson_durbin(autocorrelation(a * w, order), order)[0])
            cb = lpc_to_cepstrum(levinson_durbin(autocorrelation(b * w, order), order)[0])
        except SingularLpcError:
            continue
        dists.append(10.0 / np.log(10.0) * np.sqrt(2.0 * np.sum((ca - cb) ** 2)))
    if not dists:
        raise MetricUndefinedError("cepstral distance undefined: every frame is singular")
    return float(np.mean(dists))


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=float)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    bank = np.zeros((n_bands, f.shape[0]))
    for i in range(n_bands):
        a = np.argmin((f - lo[i]) ** 2)
        b = np.argmin((f - hi[i]) ** 2)
        bank[i, a:b] = 1.0
    return bank


def _stoi_window(n):
    return np.hanning(n + 2)[1:-1]


def _remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE, frame=STOI_FRAME, hop=STOI_FRAME // 2):
    w = _stoi_window(frame)
    starts = range(0, len(x) - frame + 1, hop)
    xf = np.array([w * x[i : i + frame] for i in starts])
    yf = np.array([w * y[i : i + frame] for i in starts])
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energies > energies.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = (xf.shape[0] - 1) * hop + frame
    xs, ys = np.zeros(n), np.zeros(n)
    for i in range(xf.shape[0]):
        xs[i * hop : i * hop + frame] += xf[i]
        ys[i * hop : i * hop + frame] += yf[i]
    return xs, ys


def _stoi_stft(x):
    w = _stoi_window(STOI_FRAME)
    starts = range(0, len(x) - STOI_FRAME + 1, STOI_FRAME // 2)
    frames = np.array([w * x[i : i + STOI_FRAME] for i in starts])
    return np.fft.rfft(frames, n=STOI_NFFT, axis=1)


def stoi(clean, degraded) -> float:
    """Short-time objective intelligibility in [0, 1]."""
    c, d = _pair(clean, degraded)
    rate = _rate(clean)
    if len(c) < rate:
        raise MetricError("STOI needs at least one second of audio")
    if rate != STOI_FS:
        c = sig.resample(Waveform(c, rate), STOI_FS).samples
        d = sig.resample(Waveform(d, rate), STOI_FS).samples
    c, d = _remove_silent_frames(c, d)
    bank = third_octave_bands()
    X = np.sqrt(bank @ (np.abs(_stoi_stft(c)) ** 2).T)
    Y = np.sqrt(bank @ (np.abs(_stoi_stft(d)) ** 2).T)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise MetricError(f"STOI needs {STOI_SEGMENT} active frames, got {n_frames}")
    clip = 10 ** (-STOI_BETA / 20)
    total = 0.0
    count = 0
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = X[:, m - STOI_SEGMENT : m]
        ys = Y[:, m - STOI_SEGMENT : m]
        alpha = np.sqrt(np.sum(xs ** 2, axis=1, keepdims=True) / (np.sum(ys ** 2, axis=1, keepdims=True) + EPS))
        yp = np.minimum(ys * alpha, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + EPS
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + EPS
        total += np.sum(xc * yc)
        count += xs.shape[0]
    return float(np.clip(total / count, 0.0, 1.0))


@dataclass(frozen=True)
class MetricVector:
    snr: float
    seg_snr: float
    spectral_mse: float
    mean_log_error: float
    wss: float
    cep: float
    stoi: float
    flags: tuple = field(default=())

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURES])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d

    @property
    def defined(self) -> bool:
        return not self.flags


def metric_vector(clean: Waveform, degraded: Waveform) -> MetricVector:
    """Compute all seven metrics with default parameters.

    Sub-metrics that are undefined for this pair are stored as
    ``UNDEFINED_SENTINEL`` and named in ``flags`` rather than raising.
    """
    _pair(clean, degraded)
    values = {}
    flags = []

    def run(name, fn, *args):
        try:
            values[name] = fn(*args)
        except MetricError:
            values[name] = UNDEFINED_SENTINEL
            flags.append(name)

    run("snr", global_snr, clean, degraded)
    run("seg_snr", segmental_snr, clean, degraded)
    try:
        C, D = sig.stft(clean), sig.stft(degraded)
    except sig.SignalError:
        C = D = None
    if C is None:
        for name in ("spectral_mse", "mean_log_error"):
            values[name] = UNDEFINED_SENTINEL
            flags.append(name)
    else:
        run("spectral_mse", spectral_mse, C, D)
        run("mean_log_error", mean_log_error, C, D)
    run("wss", wss, clean, degraded)
    run("cep", cepstral_distance, clean, degraded)
    run("stoi", stoi, clean, degraded)
    return MetricVector(**values, flags=tuple(flags))
