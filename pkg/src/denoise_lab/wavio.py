"""WAV (RIFF) reading and writing for 16-bit PCM and 32-bit float audio."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .signal import Waveform


class WavFormatError(ValueError):
    pass


def read_wav(path) -> Waveform:
    """Read a WAV file as a mono float waveform in [-1, 1]; stereo is averaged."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, rate)


def write_wav(path, x: Waveform, pcm16: bool = False) -> Path:
    """Write a mono waveform as float32, or as clipped 16-bit PCM when ``pcm16``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(x.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.samples.astype(np.float32)
    wavfile.write(str(path), x.sample_rate, data)
    return path
