"""MOS ratings, the metric-feature MLP, the spectrogram MOS network and delta-MOS.

Label pipeline: simulated human ratings (batches with two control items,
trimmed-mean aggregation) train an MLP on objective metrics; the MLP labels
a larger synthetic set; that set trains an intrusive MOS network. Either
estimator can score a (clean, degraded) pair through ``predict_pmos``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import signal as sig
from .neuralnet.layers import Conv2D, GlobalAvgPool, ReLU, Sequential, dense_projection, he_uniform
from .neuralnet.optim import AdamState, adam_step, mse

log = logging.getLogger(__name__)

MOS_MIN, MOS_MAX = 1.0, 5.0
BATCH_SIZE = 17
BASELINE_LOW, BASELINE_HIGH = 1.0, 5.0
N_MELS = 64
LOG_FLOOR = 1e-8
MAGIC = b"MOSM"
VERSION = 1


class QualityError(ValueError):
    pass


class BatchStructureError(QualityError):
    pass


# --------------------------------------------------------------------------
# ratings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Rating:
    file_id: str
    rater_id: str
    score: float

    def __post_init__(self):
        if not MOS_MIN <= self.score <= MOS_MAX:
            raise QualityError(f"score {self.score} outside [{MOS_MIN}, {MOS_MAX}]")


@dataclass(frozen=True)
class RatingBatch:
    ratings: tuple
    baseline_low_index: int
    baseline_high_index: int


@dataclass(frozen=True)
class MosLabel:
    file_id: str
    mos: float
    n_ratings: int = 0
    source: str = "human-aggregated"

    def __post_init__(self):
        if not MOS_MIN <= self.mos <= MOS_MAX:
            raise QualityError(f"MOS {self.mos} outside [{MOS_MIN}, {MOS_MAX}]")
        if self.source not in ("human-aggregated", "mlp-synthesized"):
            raise QualityError(f"unknown label source {self.source!r}")
        if self.source == "human-aggregated" and self.n_ratings < 1:
            raise QualityError("human-aggregated label needs at least one rating")


def validate_batch(batch: RatingBatch) -> bool:
    """Accept iff the low control scored exactly 1.0 and the high control exactly 5.0."""
    n = len(batch.ratings)
    lo, hi = batch.baseline_low_index, batch.baseline_high_index
    if n != BATCH_SIZE:
        raise BatchStructureError(f"batch has {n} items, expected {BATCH_SIZE}")
    if lo == hi or not (0 <= lo < n and 0 <= hi < n):
        raise BatchStructureError(f"baseline positions ({lo}, {hi}) invalid")
    return batch.ratings[lo].score == BASELINE_LOW and batch.ratings[hi].score == BASELINE_HIGH


def trimmed_mean(scores) -> float:
    s = np.sort(np.asarray(scores, dtype=float))
    if s.size == 0:
        raise QualityError("no ratings to aggregate")
    return float(s.mean() if s.size < 3 else s[1:-1].mean())


def aggregate_mos(ratings) -> MosLabel:
    """Drop one lowest and one highest rating and average the rest (plain mean below 3)."""
    ratings = list(ratings)
    if not ratings:
        raise QualityError("no ratings to aggregate")
    ids = {r.file_id for r in ratings}
    if len(ids) != 1:
        raise QualityError(f"ratings belong to several files: {sorted(ids)}")
    return MosLabel(ratings[0].file_id, trimmed_mean([r.score for r in ratings]), len(ratings))


def latent_quality(mv) -> float:
    """Ground-truth quality of the synthetic rater population: monotone in SNR and STOI."""
    snr_term = np.clip((mv.snr + 10.0) / 40.0, 0.0, 1.0)
    return float(np.clip(1.0 + 4.0 * (0.6 * mv.stoi + 0.4 * snr_term), MOS_MIN, MOS_MAX))


def simulate_campaign(latent: dict, seed: int = 0, raters_per_batch: int = 6, careless_rate: float = 0.1,
                      rater_sd: float = 0.5):
    """Simulated crowd rating of files with known latent quality.

    Files are packed 15 to a batch with two control items at random positions.
    Diligent raters score latent + noise (rounded to 0.1) and rate the
    controls correctly; careless raters score uniformly at random. Batches
    failing validation are discarded before aggregation.
    Returns ``(batches, accepted_mask, labels)``.
    """
    rng = np.random.default_rng(seed)
    ids = sorted(latent)
    if not ids:
        return [], [], []
    per = BATCH_SIZE - 2
    order = [ids[i] for i in rng.permutation(len(ids))]
    chunks = [order[i:i + per] for i in range(0, len(order), per)]
    batches, accepted = [], []
    rater = 0
    for chunk in chunks:
        chunk = chunk + [order[j % len(order)] for j in range(per - len(chunk))]
        lo, hi = rng.choice(BATCH_SIZE, 2, replace=False)
        for _ in range(raters_per_batch):
            careless = rng.random() < careless_rate
            items, it = [], iter(chunk)
            for pos in range(BATCH_SIZE):
                if pos in (lo, hi):
                    fid = "baseline-low" if pos == lo else "baseline-high"
                    target = BASELINE_LOW if pos == lo else BASELINE_HIGH
                    score = round(float(rng.uniform(1, 5)), 1) if careless else target
                else:
                    fid = next(it)
                    raw = rng.uniform(1, 5) if careless else latent[fid] + rng.normal(0, rater_sd)
                    score = round(float(np.clip(raw, MOS_MIN, MOS_MAX)), 1)
                items.append(Rating(fid, f"rater{rater:04d}", score))
            b = RatingBatch(tuple(items), int(lo), int(hi))
            batches.append(b)
            accepted.append(validate_batch(b))
            rater += 1
    by_file: dict = {}
    for b, ok in zip(batches, accepted):
        if not ok:
            continue
        for i, r in enumerate(b.ratings):
            if i not in (b.baseline_low_index, b.baseline_high_index):
                by_file.setdefault(r.file_id, []).append(r)
    labels = [aggregate_mos(by_file[f]) for f in ids if f in by_file]
    return batches, accepted, labels


# --------------------------------------------------------------------------
# MLP estimator on metric features
# --------------------------------------------------------------------------


def feature_matrix(features) -> np.ndarray:
    rows = []
    for f in features:
        if isinstance(f, metrics.MetricVector):
            if f.flags:
                raise QualityError(f"features undefined: {', '.join(f.flags)}")
            rows.append(f.as_array())
        else:
            rows.append(np.asarray(f, dtype=float))
    X = np.array(rows, dtype=float)
    if X.ndim != 2:
        raise QualityError("features must form a 2-D matrix")
    return X


def _label_values(labels) -> np.ndarray:
    return np.array([l.mos if isinstance(l, MosLabel) else float(l) for l in labels], dtype=float)


@dataclass
class MlpModel:
    widths: tuple
    weights: list
    biases: list
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    seed: int = 0
    losses: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise QualityError(f"layer {i} dimensions do not chain")
        if not (np.all(np.isfinite(self.feature_mean)) and np.all(np.isfinite(self.feature_scale))):
            raise QualityError("non-finite normalization statistics")

    def params(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def raw(self, X: np.ndarray) -> np.ndarray:
        h = (X - self.feature_mean) / self.feature_scale
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h[:, 0]


def init_mlp(n_features: int, hidden=(32, 32), seed: int = 0, output_bias: float = 0.0):
    rng = np.random.default_rng(seed)
    widths = (n_features, *hidden, 1)
    weights = [he_uniform(rng, (a, b), a, np.float64) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    # output starts as the constant label mean
    weights[-1][:] = 0.0
    biases[-1][:] = output_bias
    return widths, weights, biases


def _mlp_loss_grads(model: MlpModel, X, y):
    hs = [(X - model.feature_mean) / model.feature_scale]
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = hs[-1] @ W + b
        hs.append(np.maximum(z, 0.0) if i < len(model.weights) - 1 else z)
    loss, g = mse(hs[-1][:, 0], y)
    g = g[:, None]
    grads = []
    for i in reversed(range(len(model.weights))):
        if i < len(model.weights) - 1:
            g = g * (hs[i + 1] > 0)
        grads.append((hs[i].T @ g, g.sum(axis=0)))
        g = g @ model.weights[i].T
    grads.reverse()
    return loss, [p for pair in grads for p in pair]


def train_mos_mlp(features, labels, hidden=(32, 32), steps: int = 2000, lr: float = 1e-3,
                  batch_size: int = 32, seed: int = 0) -> MlpModel:
    """Standardize features and fit a ReLU MLP with MSE and Adam."""
    X = feature_matrix(features)
    y = _label_values(labels)
    if len(X) != len(y):
        raise QualityError(f"{len(X)} feature rows but {len(y)} labels")
    if len(X) < 10:
        raise QualityError(f"need at least 10 examples, got {len(X)}")
    mean, std = X.mean(axis=0), X.std(axis=0)
    if np.all(std == 0):
        raise QualityError("all features have zero variance")
    scale = np.where(std > 0, std, 1.0)
    widths, W, b = init_mlp(X.shape[1], hidden, seed, output_bias=float(y.mean()))
    model = MlpModel(widths, W, b, mean, scale, seed)
    rng = np.random.default_rng(seed + 1)
    state = AdamState(lr=lr)
    params = model.params()
    for _ in range(steps):
        idx = rng.choice(len(X), min(batch_size, len(X)), replace=False)
        loss, grads = _mlp_loss_grads(model, X[idx], y[idx])
        adam_step(state, params, grads)
        model.losses.append(loss)
    return model


def predict_mos_mlp(model: MlpModel, features) -> float | np.ndarray:
    single = isinstance(features, metrics.MetricVector) or (
        isinstance(features, np.ndarray) and features.ndim == 1)
    X = feature_matrix([features] if single else features)
    out = np.clip(model.raw(X), MOS_MIN, MOS_MAX)
    return float(out[0]) if single else out


def synthesize_labels(model: MlpModel, pairs, ids=None, return_failures: bool = False):
    """MLP-predicted MOS labels for (clean, degraded) pairs.

    Pairs whose metrics are undefined are left out and logged (returned as a
    second list of ``(file_id, reason)`` when ``return_failures``).
    """
    labels, failures = [], []
    for i, (clean, degraded) in enumerate(pairs):
        fid = ids[i] if ids is not None else f"pair{i:05d}"
        try:
            mv = metrics.metric_vector(clean, degraded)
            labels.append(MosLabel(fid, predict_mos_mlp(model, mv), 0, "mlp-synthesized"))
        except (QualityError, metrics.MetricError, sig.SignalError) as exc:
            log.warning("no label for %s: %s", fid, exc)
            failures.append((fid, str(exc)))
    return (labels, failures) if return_failures else labels


# --------------------------------------------------------------------------
# MOS network on spectrogram features
# --------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, float) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = sig.SAMPLE_RATE, n_fft: int = sig.FRAME_LEN, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """[n_mels, n_fft//2 + 1] triangular filters equally spaced on the HTK mel scale.

    A band too narrow to contain any bin centre takes the bin nearest its
    centre, so no band is empty.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
        if not bank[m].any():
            bank[m, int(np.argmin(np.abs(freqs - c)))] = 1.0
    return bank


def mos_features(clean, degraded) -> np.ndarray:
    """[T, 64, 4]: log-mel of clean and degraded, and log-magnitude STFT pooled to 64 bands."""
    C, D = sig.stft(clean), sig.stft(degraded)
    if C.shape != D.shape:
        raise QualityError(f"clean {C.shape} and degraded {D.shape} spectrograms differ")
    bank = mel_filterbank(C.sample_rate, C.frame_len)
    chans = []
    for S in (C, D):
        chans.append(np.log(np.abs(S.data) ** 2 @ bank.T + LOG_FLOOR))
    for S in (C, D):
        mag = np.abs(S.data[:, : N_MELS * (S.shape[1] // N_MELS)])
        chans.append(np.log(mag.reshape(S.shape[0], N_MELS, -1).mean(axis=2) + LOG_FLOOR))
    return np.stack(chans, axis=-1)


class MosNetModel:
    """Strided conv stack + global average pooling + linear head, predicting label_mean + output."""

    def __init__(self, channels=(8, 16), seed: int = 0, in_channels: int = 4):
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.seed = seed
        layers, c = [], in_channels
        for f in self.channels:
            layers += [Conv2D(c, f, (3, 3), (2, 2), rng=rng), ReLU()]
            c = f
        layers += [GlobalAvgPool(), dense_projection(c, 1, rng, zero=True)]
        self.net = Sequential(*layers)
        self.input_mean = np.zeros(in_channels)
        self.input_scale = np.ones(in_channels)
        self.label_mean = 3.0
        self.losses: list = []

    def parameters(self):
        return self.net.parameters()

    def forward(self, x):
        z = (x - self.input_mean) / self.input_scale
        return self.net.forward(z)[:, 0, 0, 0] + self.label_mean

    def predict(self, feats: np.ndarray) -> float:
        return float(np.clip(self.forward(feats[None])[0], MOS_MIN, MOS_MAX))


def train_mos_net(examples, labels, steps: int = 2000, batch_size: int = 8, lr: float = 1e-3,
                  seed: int = 0, channels=(8, 16)) -> MosNetModel:
    """Fit the MOS network with MSE/Adam.

    ``examples`` are ``[T, 64, 4]`` feature arrays (see ``mos_features``) or
    (clean, degraded) waveform pairs. All are cropped to the shortest length.
    """
    feats = [e if isinstance(e, np.ndarray) else mos_features(*e) for e in examples]
    y = _label_values(labels)
    if len(feats) != len(y):
        raise QualityError(f"{len(feats)} examples but {len(y)} labels")
    if len(feats) < batch_size:
        raise QualityError(f"dataset of {len(feats)} is smaller than one batch ({batch_size})")
    T = min(f.shape[0] for f in feats)
    X = np.stack([f[:T] for f in feats])
    model = MosNetModel(channels, seed, X.shape[-1])
    model.input_mean = X.mean(axis=(0, 1, 2))
    model.input_scale = X.std(axis=(0, 1, 2)) + 1e-8
    model.label_mean = float(y.mean())
    rng = np.random.default_rng(seed + 1)
    state = AdamState(lr=lr)
    params = [p for _, p in model.parameters()]
    for _ in range(steps):
        idx = rng.choice(len(X), batch_size, replace=False)
        pred = model.forward(X[idx])
        loss, g = mse(pred, y[idx])
        model.net.zero_grad()
        model.net.backward(g[:, None, None, None])
        adam_step(state, params, model.net.gradients())
        model.losses.append(loss)
    return model


# --------------------------------------------------------------------------
# pMOS and delta-MOS
# --------------------------------------------------------------------------


def predict_pmos(estimator, clean, degraded) -> float:
    """Predicted MOS in [1, 5] of ``degraded`` against ``clean`` for either estimator kind."""
    if isinstance(estimator, MlpModel):
        mv = metrics.metric_vector(sig._as_waveform(clean), sig._as_waveform(degraded))
        return predict_mos_mlp(estimator, mv)
    if isinstance(estimator, MosNetModel):
        return estimator.predict(mos_features(clean, degraded))
    if callable(estimator):
        return float(np.clip(estimator(clean, degraded), MOS_MIN, MOS_MAX))
    raise QualityError(f"unsupported estimator {type(estimator).__name__}")


def delta_mos(estimator, clean, mix, processed) -> float:
    return predict_pmos(estimator, clean, processed) - predict_pmos(estimator, clean, mix)


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------


def _arrays(model):
    if isinstance(model, MlpModel):
        return model.params()
    return [p for _, p in model.parameters()]


def save_estimator(path, model) -> Path:
    if isinstance(model, MlpModel):
        header = {"kind": "mlp", "widths": list(model.widths), "seed": model.seed,
                  "feature_mean": model.feature_mean.tolist(), "feature_scale": model.feature_scale.tolist()}
    elif isinstance(model, MosNetModel):
        header = {"kind": "net", "channels": list(model.channels), "seed": model.seed,
                  "input_mean": model.input_mean.tolist(), "input_scale": model.input_scale.tolist(),
                  "label_mean": model.label_mean}
    else:
        raise QualityError(f"cannot save {type(model).__name__}")
    blob = json.dumps(header, sort_keys=True).encode()
    arrays = _arrays(model)
    header_dims = [list(a.shape) for a in arrays]
    dims = json.dumps(header_dims).encode()
    flat = np.concatenate([a.ravel() for a in arrays]).astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, len(blob), len(dims)))
        f.write(blob)
        f.write(dims)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())
    return path


def load_estimator(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise QualityError(f"{path}: not a MOS estimator file")
    version, nh, nd = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise QualityError(f"{path}: unsupported format version {version}")
    off = 16
    header = json.loads(data[off:off + nh])
    dims = json.loads(data[off + nh:off + nh + nd])
    off += nh + nd
    (count,) = struct.unpack_from("<Q", data, off)
    flat = np.frombuffer(data, "<f4", count, off + 8).astype(np.float64)
    arrays, pos = [], 0
    for shape in dims:
        n = int(np.prod(shape))
        arrays.append(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    if pos != count:
        raise QualityError(f"{path}: weight count mismatch")
    if header["kind"] == "mlp":
        return MlpModel(tuple(header["widths"]), arrays[0::2], arrays[1::2],
                        np.array(header["feature_mean"]), np.array(header["feature_scale"]), header["seed"])
    model = MosNetModel(header["channels"], header["seed"])
    for (_, p), a in zip(model.parameters(), arrays):
        if p.shape != a.shape:
            raise QualityError(f"{path}: weight shape {a.shape} does not match {p.shape}")
        p[...] = a
    model.input_mean = np.array(header["input_mean"])
    model.input_scale = np.array(header["input_scale"])
    model.label_mean = header["label_mean"]
    return model
