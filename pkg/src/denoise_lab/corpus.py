"""Asset scanning and filtering, SNR sampling and deterministic mixture datasets."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import signal as sig
from .synth import noise_like, speech_like
from .wavio import WavFormatError, read_wav, write_wav

log = logging.getLogger(__name__)

EST_FRAME_S = 0.025
EST_HOP_S = 0.010
EST_FLOOR_DB = -60.0
EST_CEIL_DB = 60.0
MIN_EST_SECONDS = 1.0

SPEECH_MIN_SNR = 20.0
SPEECH_MIN_SECONDS = 8.0
NOISE_MAX_SNR = -12.0

DEFAULT_CROP_S = 4.0
DEFAULT_N_ITEMS = 32
MAX_REDRAWS = 100_000


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SnrDistribution:
    mean: float
    sd: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.sd > 0 and self.lo < self.hi and np.isfinite([self.mean, self.lo, self.hi]).all()):
            raise CorpusError(f"invalid SNR distribution {self}")


PRESETS = {
    "whamvox-easy": SnrDistribution(8.0, 7.0, -12.0, 27.0),
    "whamvox-hard": SnrDistribution(0.0, 7.0, -20.0, 20.0),
}


@dataclass(frozen=True)
class AudioAsset:
    id: str
    path: str
    kind: str  # "speech" | "noise"
    duration: float
    estimated_snr: float
    rms: float  # dBFS
    speaker: str | None = None

    def __post_init__(self):
        if self.kind not in ("speech", "noise"):
            raise CorpusError(f"asset kind must be speech or noise, got {self.kind!r}")
        if not self.duration > 0:
            raise CorpusError(f"asset {self.id} has non-positive duration")


@dataclass(frozen=True)
class MixtureRecipe:
    id: str
    speech: str
    noise: str
    target_snr: float
    crop_s: float
    norm_dbfs: float
    seed: int

    def __post_init__(self):
        if not self.crop_s > 0:
            raise CorpusError("crop must be positive")
        if not np.isfinite(self.target_snr):
            raise CorpusError("target SNR must be finite")


@dataclass
class Manifest:
    name: str
    config: dict
    items: list = field(default_factory=list)  # one dict per recipe, including skips

    @property
    def realized(self):
        return [it for it in self.items if not it.get("skipped")]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(it, sort_keys=True) + "\n" for it in self.items)


# --------------------------------------------------------------------------
# estimation, scanning and filtering
# --------------------------------------------------------------------------


def estimate_snr(x) -> float:
    """Frame-energy percentile SNR estimate: 10*log10(p90 / p10), clamped to [-60, 60] dB."""
    x = sig._as_waveform(x)
    if x.duration < MIN_EST_SECONDS:
        raise CorpusError(f"SNR estimation needs >= {MIN_EST_SECONDS} s, got {x.duration:.3f} s")
    frame = int(round(EST_FRAME_S * x.sample_rate))
    hop = int(round(EST_HOP_S * x.sample_rate))
    energy = np.sum(sig.frame_signal(x.samples, frame, hop) ** 2, axis=1)
    p10, p90 = np.percentile(energy, [10, 90])
    if p90 <= 0:
        return EST_FLOOR_DB
    if p10 <= 0:
        return EST_CEIL_DB
    return float(np.clip(10 * np.log10(p90 / p10), EST_FLOOR_DB, EST_CEIL_DB))


def describe(path, kind: str, root=None, speaker=None) -> AudioAsset:
    x = read_wav(path)
    asset_id = Path(os.path.relpath(path, root)).as_posix() if root else Path(path).name
    level = sig.rms_dbfs(x)
    return AudioAsset(asset_id, str(path), kind, x.duration,
                      estimate_snr(x) if x.duration >= MIN_EST_SECONDS else EST_FLOOR_DB,
                      float(level) if np.isfinite(level) else EST_FLOOR_DB, speaker)


def scan(directory, kind: str) -> list[AudioAsset]:
    """Annotate every WAV under ``directory`` (sorted by relative path)."""
    root = Path(directory)
    if not root.is_dir():
        raise CorpusError(f"{root} is not a directory")
    assets = []
    for path in sorted(root.rglob("*.wav")):
        try:
            assets.append(describe(path, kind, root))
        except (WavFormatError, sig.SignalError, CorpusError) as exc:
            log.warning("skipping %s: %s", path, exc)
    return assets


def passes(asset: AudioAsset, speech_min_snr=SPEECH_MIN_SNR, speech_min_s=SPEECH_MIN_SECONDS,
           noise_max_snr=NOISE_MAX_SNR) -> bool:
    if asset.kind == "speech":
        return asset.estimated_snr >= speech_min_snr and asset.duration >= speech_min_s
    return asset.estimated_snr <= noise_max_snr


def filter_assets(assets, **rules) -> list[AudioAsset]:
    """Keep assets that satisfy the speech/noise rules, preserving order."""
    return [a for a in assets if passes(a, **rules)]


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def truncated_normal(rng, dist: SnrDistribution, size: int) -> np.ndarray:
    """Normal draws, each redrawn until it falls inside [lo, hi]."""
    out = np.empty(size)
    for i in range(size):
        for _ in range(MAX_REDRAWS):
            v = rng.normal(dist.mean, dist.sd)
            if dist.lo <= v <= dist.hi:
                out[i] = v
                break
        else:
            raise CorpusError(f"could not draw inside [{dist.lo}, {dist.hi}] from {dist}")
    return out


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sample_recipes(speech_pool, noise_pool, n: int, dist: SnrDistribution,
                   crop_s: float = DEFAULT_CROP_S, seed: int = 0,
                   norm_dbfs: float = sig.NORM_DBFS) -> list[MixtureRecipe]:
    if not speech_pool or not noise_pool:
        raise CorpusError("speech and noise pools must be nonempty")
    rng = np.random.default_rng(seed)
    recipes = []
    for i in range(n):
        snr = float(truncated_normal(rng, dist, 1)[0])
        s = speech_pool[int(rng.integers(len(speech_pool)))]
        z = noise_pool[int(rng.integers(len(noise_pool)))]
        recipes.append(MixtureRecipe(f"item{i:04d}", _asset_key(s), _asset_key(z),
                                     snr, crop_s, norm_dbfs, item_seed(seed, i)))
    return recipes


def _asset_key(a) -> str:
    return a.path if isinstance(a, AudioAsset) else str(a)


# --------------------------------------------------------------------------
# building
# --------------------------------------------------------------------------


def _load_crop(path, crop_s):
    x = read_wav(path)
    if x.sample_rate != sig.SAMPLE_RATE:
        x = sig.resample(x, sig.SAMPLE_RATE)
    n = int(round(crop_s * x.sample_rate))
    if len(x) < n:
        raise CorpusError(f"{path} is shorter ({x.duration:.2f} s) than the {crop_s} s crop")
    return x.with_samples(x.samples[:n])


def _rel(path, base):
    return Path(os.path.relpath(path, base)).as_posix()


def realize(recipe: MixtureRecipe, out_dir, pcm16: bool = False, source_root=None) -> dict:
    """Crop, normalize, mix and write one item; returns its manifest record."""
    out_dir = Path(out_dir)
    base = source_root or out_dir
    record = {"id": recipe.id, "target_snr": recipe.target_snr, "crop_s": recipe.crop_s,
              "norm_dbfs": recipe.norm_dbfs, "seed": recipe.seed,
              "speech_source": _rel(recipe.speech, base), "noise_source": _rel(recipe.noise, base)}
    try:
        speech = sig.normalize_rms(_load_crop(recipe.speech, recipe.crop_s), recipe.norm_dbfs)
        noise = sig.normalize_rms(_load_crop(recipe.noise, recipe.crop_s), recipe.norm_dbfs)
        mixture, scaled = sig.mix_at_snr(speech, noise, recipe.target_snr, recipe.norm_dbfs)
        paths = {k: out_dir / k / f"{recipe.id}.wav" for k in ("mixture", "clean", "noise")}
        write_wav(paths["clean"], speech, pcm16)
        write_wav(paths["noise"], scaled, pcm16)
        write_wav(paths["mixture"], mixture, pcm16)
        # re-measure from what was written
        realized = sig.rms_dbfs(read_wav(paths["clean"])) - sig.rms_dbfs(read_wav(paths["noise"]))
    except (OSError, WavFormatError, sig.SignalError, CorpusError) as exc:
        log.warning("skipping %s: %s", recipe.id, exc)
        return {**record, "skipped": True, "reason": str(exc)}
    record.update({"mixture": _rel(paths["mixture"], out_dir), "speech": _rel(paths["clean"], out_dir),
                   "noise": _rel(paths["noise"], out_dir), "realized_snr": float(realized),
                   "clipped": bool(pcm16 and np.max(np.abs(mixture.samples)) > 1.0)})
    return record


def _realize_args(args):
    return realize(*args)


def build_dataset(recipes, out_dir, name: str = "dataset", config: dict | None = None,
                  pcm16: bool = False, workers: int = 1, source_root=None) -> Manifest:
    """Realize every recipe, then write ``manifest.jsonl`` and ``config.json`` last."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(r, out_dir, pcm16, source_root) for r in recipes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            items = list(ex.map(_realize_args, jobs))
    else:
        items = [realize(*j) for j in jobs]
    manifest = Manifest(name, dict(config or {}), items)
    (out_dir / "manifest.jsonl").write_text(manifest.to_jsonl())
    summary = {"name": name, "config": manifest.config, "n_items": len(items),
               "n_skipped": sum(1 for it in items if it.get("skipped"))}
    (out_dir / "config.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return manifest


def synthetic_pools(pool_dir, n_speech: int = 8, n_noise: int = 8, duration: float = 8.5,
                    seed: int = 0, pcm16: bool = False):
    """Write seeded speech-like and noise-like WAVs and return their annotated assets."""
    pool_dir = Path(pool_dir)
    for i in range(n_speech):
        write_wav(pool_dir / "speech" / f"spk{i:03d}.wav", speech_like(duration, item_seed(seed, 2 * i)), pcm16)
    for i in range(n_noise):
        write_wav(pool_dir / "noise" / f"noise{i:03d}.wav", noise_like(duration, item_seed(seed, 2 * i + 1)), pcm16)
    return scan(pool_dir / "speech", "speech"), scan(pool_dir / "noise", "noise")


@dataclass(frozen=True)
class CorpusConfig:
    name: str = "whamvox-easy"
    preset: str | None = "whamvox-easy"
    mean: float | None = None
    sd: float | None = None
    lo: float | None = None
    hi: float | None = None
    n: int = DEFAULT_N_ITEMS
    crop_s: float = DEFAULT_CROP_S
    norm_dbfs: float = sig.NORM_DBFS
    seed: int = 0
    apply_filter: bool = False
    speech_dir: str | None = None
    noise_dir: str | None = None
    pool_size: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def distribution(self) -> SnrDistribution:
        base = PRESETS.get(self.preset) if self.preset else None
        if self.preset and base is None:
            raise CorpusError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        vals = {k: getattr(self, k) for k in ("mean", "sd", "lo", "hi")}
        if base is not None:
            vals = {k: (v if v is not None else getattr(base, k)) for k, v in vals.items()}
        if any(v is None for v in vals.values()):
            raise CorpusError("SNR distribution needs a preset or all of mean, sd, lo, hi")
        return SnrDistribution(**vals)


def build_from_config(cfg: CorpusConfig, out_dir, pcm16: bool = False, workers: int = 1) -> Manifest:
    out_dir = Path(out_dir)
    dist = cfg.distribution()
    if cfg.speech_dir and cfg.noise_dir:
        speech, noise = scan(cfg.speech_dir, "speech"), scan(cfg.noise_dir, "noise")
        root = Path(os.path.commonpath([os.path.abspath(cfg.speech_dir), os.path.abspath(cfg.noise_dir)]))
    else:
        duration = max(cfg.crop_s, SPEECH_MIN_SECONDS) + 0.5
        speech, noise = synthetic_pools(out_dir / "pool", cfg.pool_size, cfg.pool_size, duration, cfg.seed, pcm16)
        root = out_dir
    if cfg.apply_filter:
        speech, noise = filter_assets(speech), filter_assets(noise)
    recipes = sample_recipes(speech, noise, cfg.n, dist, cfg.crop_s, cfg.seed, cfg.norm_dbfs)
    config = {**asdict(cfg), "distribution": asdict(dist), "pcm16": pcm16}
    return build_dataset(recipes, out_dir, cfg.name, config, pcm16, workers, source_root=root)


def load_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
