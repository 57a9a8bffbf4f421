"""Training loop and waveform-level denoising for mask-estimating networks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import signal as sig
from .model import TOTAL_STRIDE
from .optim import AdamState, adam_step, mse

log = logging.getLogger(__name__)

TRAIN_SECONDS = 1.8


def _round_up(n, m=TOTAL_STRIDE):
    return -(-n // m) * m


def fixed_window_frames(seconds: float = TRAIN_SECONDS, sample_rate: int = sig.SAMPLE_RATE,
                        frame_len: int = sig.FRAME_LEN, frame_step: int = sig.FRAME_STEP) -> int:
    """Frames in a training crop, truncated to a multiple of the total stride.

    1.8 s at 22050 Hz gives 39690 samples -> 307 frames -> 304.
    """
    n = sig.n_frames(int(round(seconds * sample_rate)), frame_len, frame_step)
    return n - n % TOTAL_STRIDE


DEFAULT_WINDOW = fixed_window_frames()


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


def complex_to_tensor(z: np.ndarray, frames: int | None = None) -> np.ndarray:
    """[T, F] complex -> [T', F', 2] real/imag, zero-padded to stride multiples."""
    T, F = z.shape
    out = np.zeros((_round_up(frames or T), _round_up(F), 2))
    out[:T, :F, 0] = z.real
    out[:T, :F, 1] = z.imag
    return out


def tensor_to_complex(t: np.ndarray, shape) -> np.ndarray:
    T, F = shape
    return t[:T, :F, 0] + 1j * t[:T, :F, 1]


@dataclass
class TrainingExample:
    mix: np.ndarray     # [T, F', 2]
    target: np.ndarray  # [T, F', 2]
    weight: np.ndarray  # [T, F', 1], |mix|^2 for the spectrogram-domain loss


def make_example(mix: sig.Spectrogram, target: sig.ComplexMask) -> TrainingExample:
    if mix.shape != target.shape:
        raise ValueError(f"mixture {mix.shape} and mask {target.shape} differ in shape")
    x = complex_to_tensor(mix.data)
    w = np.zeros(x.shape[:2] + (1,))
    w[: mix.shape[0], : mix.shape[1], 0] = np.abs(mix.data) ** 2
    return TrainingExample(x, complex_to_tensor(target.data), w)


@dataclass
class TrainResult:
    model: object
    losses: list = field(default_factory=list)


def _crop(ex: TrainingExample, window: int, rng):
    T = ex.mix.shape[0]
    if T >= window:
        s = int(rng.integers(T - window + 1))
        return ex.mix[s:s + window], ex.target[s:s + window], ex.weight[s:s + window]
    pad = ((0, window - T), (0, 0), (0, 0))
    return np.pad(ex.mix, pad), np.pad(ex.target, pad), np.pad(ex.weight, pad)


def train_denoiser(model, dataset, steps: int, batch_size: int = 4, seed: int = 0, lr: float = 1e-4,
                   window: int = DEFAULT_WINDOW, loss_domain: str = "mask", state: AdamState | None = None):
    """Minibatch MSE training with Adam.

    ``dataset`` holds ``(mixture Spectrogram, target ComplexMask)`` pairs or
    prepared TrainingExamples. ``loss_domain`` is ``"mask"`` (MSE between
    predicted and target mask) or ``"spectrogram"`` (the same error weighted by
    |mixture|^2, i.e. MSE of the masked spectrograms).
    """
    if not dataset:
        raise ValueError("empty training set")
    if window % TOTAL_STRIDE:
        raise ValueError(f"window {window} must be a multiple of {TOTAL_STRIDE}")
    if loss_domain not in ("mask", "spectrogram"):
        raise ValueError(f"unknown loss domain {loss_domain!r}")
    examples = [d if isinstance(d, TrainingExample) else make_example(*d) for d in dataset]
    rng = np.random.default_rng(seed)
    state = state or AdamState(lr=lr)
    params = [p for _, p in model.parameters()]
    losses = []
    for step in range(steps):
        idx = rng.integers(len(examples), size=batch_size)
        crops = [_crop(examples[i], window, rng) for i in idx]
        x = np.stack([c[0] for c in crops])
        y = np.stack([c[1] for c in crops])
        w = np.stack([c[2] for c in crops]) if loss_domain == "spectrogram" else None
        pred = model.forward(x)
        loss, g = mse(pred, y, w)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        model.zero_grad()
        model.backward(g)
        adam_step(state, params, model.gradients())
        losses.append(loss)
        if step % 500 == 0:
            log.debug("step %d loss %.6g", step, loss)
    return TrainResult(model, losses)


def predict_mask(model, S: sig.Spectrogram, clip: float = sig.MASK_CLIP) -> sig.ComplexMask:
    x = complex_to_tensor(S.data)[None]
    out = model.forward(x)[0]
    M = tensor_to_complex(out, S.shape)
    mag = np.abs(M)
    over = mag > clip
    M[over] *= clip / mag[over]
    return sig.ComplexMask(M, clip)


def denoise(model, x: sig.Waveform) -> sig.Waveform:
    """STFT -> predicted mask -> masked mixture -> inverse STFT, padded back to len(x)."""
    S = sig.stft(x)
    y = sig.istft(sig.apply_mask(S, predict_mask(model, S))).samples
    out = np.zeros(len(x))
    out[: len(y)] = y
    return x.with_samples(out)
