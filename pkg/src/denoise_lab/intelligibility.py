"""Adaptive speech-reception-threshold (SRT) staircase with simulated listeners.

A listener repeats the words of each sentence with a probability given by a
logistic psychometric function of the effective SNR. The speech level then
moves by a table lookup on the number of words correct, and the SRT is the
mean presented SNR over the final sentences of a block.

SNR convention: speech level minus noise level, so raising the speech level
raises the SNR.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import metrics
from . import signal as sig
from .synth import noise_like, speech_like

log = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.17
LEVEL_TABLE = {0: 3.0, 1: 2.0, 2: 1.0, 3: -1.0, 4: -2.0, 5: -3.0}
SENTENCE_SECONDS = 2.0
CALIBRATION_GRID = tuple(np.arange(-30.0, 30.01, 2.5))
CALIBRATION_ITEMS = 3


class IntelligibilityError(ValueError):
    pass


@dataclass(frozen=True)
class ListenerModel:
    """Logistic psychometric listener; ``fixed_p`` overrides the curve (0 or 1 for test listeners)."""
    srt_true: float = -5.8
    slope: float = DEFAULT_SLOPE
    mode: str = "snr"  # "snr" | "stoi"
    seed: int = 0
    fixed_p: float | None = None

    def __post_init__(self):
        if not self.slope > 0:
            raise IntelligibilityError(f"slope must be positive, got {self.slope}")
        if self.mode not in ("snr", "stoi"):
            raise IntelligibilityError(f"unknown listener mode {self.mode!r}")
        if self.fixed_p is not None and not 0.0 <= self.fixed_p <= 1.0:
            raise IntelligibilityError("fixed_p must lie in [0, 1]")

    def p_correct(self, snr) -> float:
        if self.fixed_p is not None:
            return self.fixed_p
        a = 4.0 * self.slope * (float(snr) - self.srt_true)
        return float(0.5 * (1.0 + np.tanh(a / 2.0)))  # logistic without exp overflow

    def shifted(self, offset: float) -> "ListenerModel":
        return ListenerModel(self.srt_true + offset, self.slope, self.mode, self.seed, self.fixed_p)


@dataclass(frozen=True)
class SrtBlockConfig:
    n_sentences: int = 20
    words_per_sentence: int = 5
    noise_level: float = 65.0
    initial_speech_level: float = 65.0
    level_table: tuple = tuple(sorted(LEVEL_TABLE.items()))
    warmup_ignored: int = 10

    def __post_init__(self):
        if self.n_sentences <= self.warmup_ignored:
            raise IntelligibilityError("n_sentences must exceed warmup_ignored")
        if self.words_per_sentence < 1:
            raise IntelligibilityError("need at least one word per sentence")
        if sorted(dict(self.level_table)) != list(range(self.words_per_sentence + 1)):
            raise IntelligibilityError("level_table must cover 0..words_per_sentence")

    @property
    def table(self) -> dict:
        return dict(self.level_table)


@dataclass(frozen=True)
class SrtResult:
    srt: float
    levels: tuple
    words_correct: tuple
    effective_snrs: tuple

    def to_dict(self):
        return {"srt": self.srt, "levels": list(self.levels), "words_correct": list(self.words_correct),
                "effective_snrs": list(self.effective_snrs)}


# --------------------------------------------------------------------------
# STOI calibration for waveform-level processing
# --------------------------------------------------------------------------


def sentence_material(seed: int, seconds: float = SENTENCE_SECONDS, color: str | None = None):
    ss = np.random.SeedSequence(seed).generate_state(2)
    return speech_like(seconds, int(ss[0])), noise_like(seconds, int(ss[1]), color=color)


@lru_cache(maxsize=8)
def _calibration_curve(grid: tuple, n_items: int, seed: int, color):
    values = np.zeros(len(grid))
    for i in range(n_items):
        speech, noise = sentence_material(seed + i, color=color)
        clean = sig.normalize_rms(speech)
        for j, snr in enumerate(grid):
            mix, _ = sig.mix_at_snr(speech, noise, snr)
            values[j] += metrics.stoi(clean, mix)
    curve = np.maximum.accumulate(values / n_items)
    # strictly increasing so that the inverse is single-valued
    return curve + np.arange(len(grid)) * 1e-9


@dataclass(frozen=True)
class StoiCalibration:
    """Maps a STOI value to the SNR at which an unprocessed mixture scores the same."""
    grid: tuple = CALIBRATION_GRID
    n_items: int = CALIBRATION_ITEMS
    seed: int = 12345
    color: str | None = None

    def curve(self):
        return _calibration_curve(tuple(self.grid), self.n_items, self.seed, self.color)

    def equivalent_snr(self, stoi_value: float) -> float:
        return float(np.interp(stoi_value, self.curve(), np.asarray(self.grid)))


# --------------------------------------------------------------------------
# processing chains
# --------------------------------------------------------------------------

SNR_KINDS = ("identity", "fixed-snr-gain", "saturating-gain")
WAVEFORM_KINDS = ("oracle-mask", "trained-model")


@dataclass(frozen=True)
class ProcessingChain:
    """Maps a presented SNR (and optionally the waveform) to an effective SNR.

    ``saturating-gain`` gives ``gain_db`` below ``knee_db`` and decays
    exponentially with scale ``width_db`` above it.
    """
    kind: str = "identity"
    gain_db: float = 0.0
    knee_db: float = 0.0
    width_db: float = 3.0
    model: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in SNR_KINDS + WAVEFORM_KINDS:
            raise IntelligibilityError(f"unknown processing chain {self.kind!r}")
        if self.kind == "trained-model" and self.model is None:
            raise IntelligibilityError("trained-model chain needs a model")

    @property
    def waveform(self) -> bool:
        return self.kind in WAVEFORM_KINDS

    def snr_gain(self, snr: float) -> float:
        if self.kind == "fixed-snr-gain":
            return self.gain_db
        if self.kind == "saturating-gain":
            return self.gain_db * float(np.exp(-max(snr - self.knee_db, 0.0) / self.width_db))
        return 0.0

    def process(self, mixture: sig.Waveform, speech: sig.Waveform) -> sig.Waveform:
        """Waveform-level processing of a mixture whose clean component is ``speech``."""
        if self.kind == "oracle-mask":
            X = sig.stft(mixture)
            M = sig.ideal_complex_mask(sig.stft(speech), X)
            y = sig.istft(sig.apply_mask(X, M)).samples
            return mixture.with_samples(np.pad(y, (0, len(mixture) - len(y))))
        if self.kind == "trained-model":
            from .neuralnet.train import denoise
            return denoise(self.model, mixture)
        return mixture

    def to_dict(self):
        return {"kind": self.kind, "gain_db": self.gain_db, "knee_db": self.knee_db, "width_db": self.width_db}


IDENTITY = ProcessingChain()


def effective_snr(listener: ListenerModel, chain: ProcessingChain, snr: float, material_seed: int,
                  calibration: StoiCalibration | None = None) -> float:
    if not chain.waveform and listener.mode == "snr":
        return snr + chain.snr_gain(snr)
    calibration = calibration or StoiCalibration()
    speech, noise = sentence_material(material_seed, color=calibration.color)
    pre = snr + chain.snr_gain(snr)
    mixture, _ = sig.mix_at_snr(speech, noise, pre)
    clean = sig.normalize_rms(speech)
    processed = chain.process(mixture, clean)
    return calibration.equivalent_snr(metrics.stoi(clean, processed))


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_sentence(listener: ListenerModel, effective_snr: float, words: int = 5, seed=0) -> int:
    """Number of words repeated correctly: Binomial(words, p(effective_snr))."""
    if words < 1:
        raise IntelligibilityError("need at least one word")
    return int(_rng(seed).binomial(words, listener.p_correct(effective_snr)))


def run_block(listener: ListenerModel, config: SrtBlockConfig = SrtBlockConfig(),
              chain: ProcessingChain = IDENTITY, seed: int = 0,
              calibration: StoiCalibration | None = None) -> SrtResult:
    rng = np.random.default_rng(seed)
    table = config.table
    level = config.initial_speech_level
    levels, correct, effs = [], [], []
    for i in range(config.n_sentences):
        snr = level - config.noise_level
        material = int(rng.integers(2 ** 31)) if (chain.waveform or listener.mode == "stoi") else 0
        eff = effective_snr(listener, chain, snr, material, calibration)
        k = simulate_sentence(listener, eff, config.words_per_sentence, rng)
        levels.append(level)
        correct.append(k)
        effs.append(eff)
        level += table[k]
    srt = float(np.mean(levels[config.warmup_ignored:])) - config.noise_level
    return SrtResult(srt, tuple(levels), tuple(correct), tuple(effs))


@dataclass(frozen=True)
class NoiseCondition:
    """A masker condition; ``srt_offset`` shifts every listener's threshold in it."""
    name: str
    srt_offset: float = 0.0


def cell_seed(seed: int, listener: int, condition: int, processed: int) -> int:
    return int(np.random.SeedSequence([seed, listener, condition, processed]).generate_state(1)[0])


def _run_cell(args):
    li, ci, listener, cond, chain, config, seed, calibration = args
    lst = listener.shifted(cond.srt_offset)
    un = run_block(lst, config, IDENTITY, cell_seed(seed, li, ci, 0), calibration)
    pr = run_block(lst, config, chain, cell_seed(seed, li, ci, 1), calibration)
    return {"listener": li, "condition": cond.name, "chain": chain.to_dict(),
            "srt_true": lst.srt_true, "unprocessed": un.to_dict(), "processed": pr.to_dict(),
            "srt_unprocessed": un.srt, "srt_processed": pr.srt,
            "improvement": un.srt - pr.srt}


def run_study(listeners, conditions, chains, seed: int = 0, config: SrtBlockConfig = SrtBlockConfig(),
              workers: int = 1, calibration: StoiCalibration | None = None) -> list[dict]:
    """Unprocessed then processed block for every listener x condition.

    ``chains`` is one chain for all conditions or a mapping from condition
    name to chain. ``improvement`` is unprocessed minus processed SRT, so a
    helpful chain gives a positive value.
    """
    if not listeners or not conditions:
        raise IntelligibilityError("study needs listeners and conditions")
    conditions = [c if isinstance(c, NoiseCondition) else NoiseCondition(str(c)) for c in conditions]
    jobs = []
    for li, listener in enumerate(listeners):
        for ci, cond in enumerate(conditions):
            chain = chains.get(cond.name, IDENTITY) if isinstance(chains, dict) else chains
            jobs.append((li, ci, listener, cond, chain, config, seed, calibration))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def paired_srts(rows, condition: str | None = None):
    """(unprocessed, processed) SRT arrays in row order, for the stats module."""
    sel = [r for r in rows if condition is None or r["condition"] == condition]
    return (np.array([r["srt_unprocessed"] for r in sel]), np.array([r["srt_processed"] for r in sel]))


def cohort(n: int, srt_mean: float, srt_sd: float = 1.0, slope: float = DEFAULT_SLOPE, seed: int = 0):
    """Listeners with thresholds drawn from Normal(srt_mean, srt_sd)."""
    rng = np.random.default_rng(seed)
    return [ListenerModel(float(s), slope, seed=i) for i, s in enumerate(rng.normal(srt_mean, srt_sd, n))]
