"""Command-line entry point: ``denoise-lab <command> [subcommand] [options]``.

Every command resolves its options as defaults < ``--config`` JSON < explicit
flags, logs the result and stores it, together with the master seed, in each
JSON artifact it writes. Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as corp
from . import intelligibility as intel
from . import metrics
from . import quality as Q
from . import search
from . import signal as sig
from . import stats
from .neuralnet import build_from_genome, denoise, minimal_genome, train_denoiser
from .neuralnet.genome import BOUNDS, GENE_NAMES, SLOTS, Genome, GenomeError
from .neuralnet.io import ModelFormatError, load_model, save_model
from .neuralnet.model import ShapeError
from .neuralnet.optim import OptimizerError
from .neuralnet.train import TrainingDiverged
from .synth import noisy_pairs
from .wavio import WavFormatError, read_wav, write_wav

log = logging.getLogger("denoise_lab.cli")
log.setLevel(logging.INFO)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

NUMERICAL_ERRORS = (TrainingDiverged, OptimizerError, FloatingPointError, search.EvolutionAborted)
DATA_ERRORS = (corp.CorpusError, WavFormatError, Q.QualityError, stats.StatsError, intel.IntelligibilityError,
               GenomeError, ModelFormatError, ShapeError, metrics.MetricError, search.SearchError,
               sig.SignalError, OSError, json.JSONDecodeError, KeyError, ValueError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config resolution and output
# --------------------------------------------------------------------------


def resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags; unknown config keys are a usage error."""
    cfg = dict(defaults)
    cfg.update(seed=0, workers=os.cpu_count() or 1, pcm16=False)
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = value
    if cfg["workers"] < 1:
        raise UsageError("--workers must be at least 1")
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
    return cfg


def provenance(cfg: dict) -> dict:
    return {"config": cfg, "seed": cfg["seed"], "version": __version__}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return o.as_posix()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def write_jsonl(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True, default=_json_default) + "\n" for r in rows))
    return path


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def out_dir(args, default: str) -> Path:
    return Path(args.out or default)


# --------------------------------------------------------------------------
# shared data helpers
# --------------------------------------------------------------------------


def manifest_pairs(path):
    """(id, clean, mixture) for every realized item of a corpus manifest."""
    base = Path(path).parent
    out = []
    for item in corp.load_manifest(path):
        if item.get("skipped"):
            continue
        out.append((item["id"], read_wav(base / item["speech"]), read_wav(base / item["mixture"])))
    if not out:
        raise corp.CorpusError(f"{path}: no realized items")
    return out


def load_pairs(cfg):
    if cfg.get("manifest"):
        return manifest_pairs(cfg["manifest"])
    triples = noisy_pairs(cfg["n_synthetic"], cfg["seed"], (cfg["snr_lo"], cfg["snr_hi"]), cfg["duration"])
    return [(f"pair{i:05d}", c, m) for i, (c, m, _) in enumerate(triples)]


def load_genome(cfg) -> Genome:
    if cfg.get("genome"):
        return Genome.from_dict(json.loads(Path(cfg["genome"]).read_text())).validate()
    return minimal_genome(cfg["filters"])


def stoi_labels(features):
    return [float(np.clip(1.0 + 4.0 * f.stoi, Q.MOS_MIN, Q.MOS_MAX)) for f in features]


def quick_estimator(seed: int, n: int = 60, steps: int = 1000):
    """Monotone MLP estimator trained on clamp(1 + 4 stoi) labels of synthetic pairs."""
    pairs = noisy_pairs(n, seed, duration=1.0)
    feats = [metrics.metric_vector(c, m) for c, m, _ in pairs]
    return Q.train_mos_mlp(feats, stoi_labels(feats), steps=steps, seed=seed)


def load_estimator_or_default(path, seed):
    return Q.load_estimator(path) if path else quick_estimator(seed)


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------

SCAN_DEFAULTS = {"kind": "speech"}
FILTER_DEFAULTS = {"speech_min_snr": corp.SPEECH_MIN_SNR, "speech_min_s": corp.SPEECH_MIN_SECONDS,
                   "noise_max_snr": corp.NOISE_MAX_SNR}
BUILD_DEFAULTS = {k: v.default for k, v in corp.CorpusConfig.__dataclass_fields__.items() if k != "seed"}


def cmd_corpus_scan(args, cfg):
    assets = [asdict(a) for a in corp.scan(args.directory, cfg["kind"])]
    if args.out:
        write_jsonl(args.out, assets)
        write_json(str(args.out) + ".json", provenance(cfg))
    return {"n_assets": len(assets), "assets": assets, **provenance(cfg)}


def cmd_corpus_filter(args, cfg):
    with open(args.assets) as fh:
        assets = [corp.AudioAsset(**json.loads(line)) for line in fh if line.strip()]
    rules = {k: cfg[k] for k in FILTER_DEFAULTS}
    kept = [asdict(a) for a in corp.filter_assets(assets, **rules)]
    if args.out:
        write_jsonl(args.out, kept)
        write_json(str(args.out) + ".json", provenance(cfg))
    return {"n_in": len(assets), "n_kept": len(kept), "assets": kept, **provenance(cfg)}


def cmd_corpus_build(args, cfg):
    fields = {k: cfg[k] for k in BUILD_DEFAULTS}
    manifest = corp.build_from_config(corp.CorpusConfig(seed=cfg["seed"], **fields), out_dir(args, "corpus"),
                                      cfg["pcm16"], cfg["workers"])
    d = out_dir(args, "corpus")
    snrs = [it["realized_snr"] for it in manifest.realized]
    return {"name": manifest.name, "n_items": len(manifest.items), "n_realized": len(snrs),
            "mean_realized_snr": float(np.mean(snrs)) if snrs else None,
            "manifest_sha256": sha256(d / "manifest.jsonl"), **provenance(cfg)}


# --------------------------------------------------------------------------
# net
# --------------------------------------------------------------------------

PAIR_DEFAULTS = {"manifest": None, "n_synthetic": 16, "duration": 2.0, "snr_lo": -5.0, "snr_hi": 5.0}
TRAIN_DEFAULTS = {**PAIR_DEFAULTS, "genome": None, "filters": 8, "steps": 2000, "lr": 1e-4, "batch_size": 4,
                  "window": 64, "loss_domain": "mask", "dtype": "float32"}


def cmd_net_train(args, cfg):
    pairs = load_pairs(cfg)
    data = search.training_examples([(c, m) for _, c, m in pairs])
    model = build_from_genome(load_genome(cfg), seed=cfg["seed"], dtype=cfg["dtype"])
    result = train_denoiser(model, data, cfg["steps"], cfg["batch_size"], cfg["seed"], cfg["lr"],
                            cfg["window"], cfg["loss_domain"])
    d = out_dir(args, "net")
    save_model(d / "model.bin", model, provenance(cfg))
    L = np.asarray(result.losses)
    summary = {"n_examples": len(data), "n_params": model.n_params,
               "initial_loss": float(L[:10].mean()) if L.size else None,
               "final_loss": float(L[-10:].mean()) if L.size else None, **provenance(cfg)}
    write_json(d / "train.json", {**summary, "losses": L.tolist()})
    return summary


def cmd_net_denoise(args, cfg):
    model, header = load_model(args.model)
    x = read_wav(args.input)
    if x.sample_rate != sig.SAMPLE_RATE:
        x = sig.resample(x, sig.SAMPLE_RATE)
    y = denoise(model, x)
    path = Path(args.out or "denoised.wav")
    write_wav(path, y, cfg["pcm16"])
    summary = {"input": str(args.input), "output": path.as_posix(), "model_seed": header["seed"],
               "rms_in_dbfs": sig.rms_dbfs(x), "rms_out_dbfs": sig.rms_dbfs(y), **provenance(cfg)}
    write_json(str(path) + ".json", summary)
    return summary


def cmd_net_info(args, cfg):
    model, header = load_model(args.model)
    return {"genome": model.genome.to_dict(), "n_params": model.n_params, "model_seed": header["seed"],
            "meta": header["meta"], **provenance(cfg)}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def cmd_metrics(args, cfg):
    clean, degraded = read_wav(args.clean), read_wav(args.degraded)
    result = {**metrics.metric_vector(clean, degraded).to_dict(), **provenance(cfg)}
    if args.out:
        write_json(args.out, result)
    return result


# --------------------------------------------------------------------------
# mos
# --------------------------------------------------------------------------

MOS_PAIR_DEFAULTS = {**PAIR_DEFAULTS, "n_synthetic": 200, "duration": 1.5, "snr_lo": -15.0, "snr_hi": 20.0}
MLP_DEFAULTS = {**MOS_PAIR_DEFAULTS, "ratings": None, "labels": "stoi", "hidden": [32, 32], "steps": 2000,
                "lr": 1e-3, "batch_size": 32}
NET_DEFAULTS = {**MOS_PAIR_DEFAULTS, "labels": None, "steps": 500, "lr": 1e-3, "batch_size": 8,
                "channels": [8, 16]}


def read_ratings(path):
    by_file: dict = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                by_file.setdefault(d["file_id"], []).append(Q.Rating(d["file_id"], str(d["rater_id"]),
                                                                      float(d["score"])))
    return {f: Q.aggregate_mos(rs) for f, rs in by_file.items()}


def read_labels(path) -> dict:
    with open(path) as fh:
        return {d["file_id"]: float(d["mos"]) for d in map(json.loads, filter(str.strip, fh))}


def cmd_mos_train_mlp(args, cfg):
    pairs = load_pairs(cfg)
    feats = {pid: metrics.metric_vector(c, m) for pid, c, m in pairs}
    feats = {pid: f for pid, f in feats.items() if f.defined}
    if cfg["ratings"]:
        labels = {f: lab.mos for f, lab in read_ratings(cfg["ratings"]).items()}
    elif cfg["labels"] == "stoi":
        labels = dict(zip(feats, stoi_labels(feats.values())))
    elif cfg["labels"] == "campaign":
        _, _, labs = Q.simulate_campaign({p: Q.latent_quality(f) for p, f in feats.items()}, cfg["seed"])
        labels = {lab.file_id: lab.mos for lab in labs}
    else:
        raise UsageError(f"labels must be 'stoi' or 'campaign', got {cfg['labels']!r}")
    ids = [p for p in feats if p in labels]
    model = Q.train_mos_mlp([feats[p] for p in ids], [labels[p] for p in ids], tuple(cfg["hidden"]),
                            cfg["steps"], cfg["lr"], cfg["batch_size"], cfg["seed"])
    pred = Q.predict_mos_mlp(model, [feats[p] for p in ids])
    d = out_dir(args, "mos")
    Q.save_estimator(d / "mlp.mosm", model)
    summary = {"n_train": len(ids), "train_rmse": float(np.sqrt(np.mean((pred - [labels[p] for p in ids]) ** 2))),
               "final_loss": float(np.mean(model.losses[-50:])), **provenance(cfg)}
    write_json(d / "mlp.json", summary)
    return summary


def cmd_mos_synthesize(args, cfg):
    model = Q.load_estimator(args.model)
    if not isinstance(model, Q.MlpModel):
        raise Q.QualityError("label synthesis needs an MLP estimator")
    pairs = load_pairs(cfg)
    labels, failures = Q.synthesize_labels(model, [(c, m) for _, c, m in pairs], [p for p, _, _ in pairs],
                                           return_failures=True)
    path = Path(args.out or "labels.jsonl")
    write_jsonl(path, [asdict(lab) for lab in labels])
    summary = {"n_labels": len(labels), "failures": [list(f) for f in failures],
               "labels_path": path.as_posix(), **provenance(cfg)}
    write_json(str(path) + ".json", summary)
    return summary


def cmd_mos_train_net(args, cfg):
    if not cfg["labels"]:
        raise UsageError("mos train-net needs --labels (a labels JSONL from 'mos synthesize')")
    labels = read_labels(cfg["labels"])
    pairs = [(p, c, m) for p, c, m in load_pairs(cfg) if p in labels]
    if not pairs:
        raise Q.QualityError("no pair ids match the labels file")
    model = Q.train_mos_net([(c, m) for _, c, m in pairs], [labels[p] for p, _, _ in pairs], cfg["steps"],
                            cfg["batch_size"], cfg["lr"], cfg["seed"], tuple(cfg["channels"]))
    d = out_dir(args, "mos")
    Q.save_estimator(d / "net.mosm", model)
    summary = {"n_train": len(pairs), "final_loss": float(np.mean(model.losses[-20:])), **provenance(cfg)}
    write_json(d / "net.json", summary)
    return summary


def cmd_mos_predict(args, cfg):
    est = Q.load_estimator(args.model)
    return {"pmos": Q.predict_pmos(est, read_wav(args.clean), read_wav(args.degraded)), **provenance(cfg)}


def cmd_mos_delta(args, cfg):
    est = Q.load_estimator(args.model)
    d = Q.delta_mos(est, read_wav(args.clean), read_wav(args.mix), read_wav(args.processed))
    return {"delta_mos": d, **provenance(cfg)}


# --------------------------------------------------------------------------
# nas
# --------------------------------------------------------------------------

NAS_DEFAULTS = {"population": 8, "sample": 4, "cycles": 16, "budget": 50, "n_train": 8, "n_eval": 4,
                "duration": 1.0, "snr_lo": -5.0, "snr_hi": 5.0, "lr": 1e-3, "loss_domain": "spectrogram",
                "window": 32, "batch_size": 4, "estimator": None, "space": "full"}

# reduced genome space for quick runs: small widths, single repeats
SMALL_BOUNDS = {**BOUNDS, "repeats": (1,), "filters": (4, 8)}
SMALL_SPACE = search.GeneSpace(search.GENOME_SPACE.names,
                               tuple(SMALL_BOUNDS[g] for _ in SLOTS for g in GENE_NAMES), Genome.from_genes)
SPACES = {"full": search.GENOME_SPACE, "small": SMALL_SPACE}


def _finite(v):
    return float(v) if np.isfinite(v) else None


def nas_search(cfg, estimator, train_pairs, eval_pairs, out: Path, workers: int):
    space = SPACES.get(cfg["space"])
    if space is None:
        raise UsageError(f"space must be one of {sorted(SPACES)}")
    setup = search.FitnessSetup(eval_pairs, estimator, search.training_examples(train_pairs), cfg["budget"],
                                cfg["batch_size"], cfg["window"], cfg["lr"], cfg["loss_domain"])
    conf = search.EvolutionConfig(cfg["population"], cfg["sample"], cfg["cycles"], cfg["seed"])
    try:
        result = search.evolve(conf, setup, space, workers=workers)
    except search.EvolutionAborted as exc:
        (out / "history.jsonl").parent.mkdir(parents=True, exist_ok=True)
        (out / "history.jsonl").write_text(search.history_jsonl(exc.history, space))
        raise
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.jsonl").write_text(search.history_jsonl(result.history, space))
    best = result.best
    genome = Genome.from_genes(best.genes)
    # retraining with the candidate's own seed reproduces the evaluated model
    value, model = search.fitness(genome, eval_pairs, estimator, cfg["budget"], best.seed, setup.train_set,
                                  batch_size=cfg["batch_size"], window=cfg["window"], lr=cfg["lr"],
                                  loss_domain=cfg["loss_domain"], return_model=True)
    save_model(out / "best_model.bin", model, {**provenance(cfg), "fitness": value})
    statuses = {}
    for c in result.history:
        statuses[c.status] = statuses.get(c.status, 0) + 1
    return {"best_fitness": _finite(best.fitness), "best_age": best.age, "best_genome": genome.to_dict(),
            "n_evaluated": len(result.history), "statuses": statuses,
            "best_so_far": [_finite(v) for v in result.best_so_far]}, model


def cmd_nas_run(args, cfg):
    triples = noisy_pairs(cfg["n_train"] + cfg["n_eval"], cfg["seed"], (cfg["snr_lo"], cfg["snr_hi"]),
                          cfg["duration"])
    pairs = [(c, m) for c, m, _ in triples]
    estimator = load_estimator_or_default(cfg["estimator"], cfg["seed"])
    d = out_dir(args, "nas")
    summary, _ = nas_search(cfg, estimator, pairs[:cfg["n_train"]], pairs[cfg["n_train"]:], d, cfg["workers"])
    summary = {**summary, **provenance(cfg)}
    write_json(d / "nas.json", summary)
    return summary


# --------------------------------------------------------------------------
# srt
# --------------------------------------------------------------------------

CHAIN_DEFAULTS = {"chain": "identity", "gain_db": 0.0, "knee_db": 0.0, "width_db": 3.0, "model": None}
BLOCK_DEFAULTS = {**CHAIN_DEFAULTS, "srt_true": -5.8, "slope": intel.DEFAULT_SLOPE, "listener_mode": "snr",
                  "n_sentences": 20}
STUDY_DEFAULTS = {**CHAIN_DEFAULTS, "n_listeners": 12, "srt_mean": -5.8, "srt_sd": 1.0,
                  "slope": intel.DEFAULT_SLOPE, "conditions": ["stationary"], "n_sentences": 20}


def make_chain(cfg) -> intel.ProcessingChain:
    model = load_model(cfg["model"])[0] if cfg["model"] else None
    return intel.ProcessingChain(cfg["chain"], cfg["gain_db"], cfg["knee_db"], cfg["width_db"], model)


def cmd_srt_block(args, cfg):
    listener = intel.ListenerModel(cfg["srt_true"], cfg["slope"], cfg["listener_mode"], cfg["seed"])
    res = intel.run_block(listener, intel.SrtBlockConfig(n_sentences=cfg["n_sentences"]), make_chain(cfg),
                          cfg["seed"])
    result = {**res.to_dict(), **provenance(cfg)}
    if args.out:
        write_json(args.out, result)
    return result


def _conditions(spec):
    out = []
    for c in spec:
        out.append(intel.NoiseCondition(c["name"], float(c.get("srt_offset", 0.0))) if isinstance(c, dict)
                   else intel.NoiseCondition(str(c)))
    return out


def study_summary(rows, conditions):
    summary = {}
    for cond in conditions:
        un, pr = intel.paired_srts(rows, cond.name)
        change = pr - un
        test = stats.wilcoxon_signed_rank(pr, un)
        summary[cond.name] = {"n": int(un.size), "mean_srt_change": float(change.mean()),
                              "median_unprocessed": stats.median_mad(un)[0],
                              "median_processed": stats.median_mad(pr)[0],
                              "change_box": stats.box_summary(change), "wilcoxon": test.to_dict()}
    return summary


def cmd_srt_study(args, cfg):
    listeners = intel.cohort(cfg["n_listeners"], cfg["srt_mean"], cfg["srt_sd"], cfg["slope"], cfg["seed"])
    conditions = _conditions(cfg["conditions"])
    rows = intel.run_study(listeners, conditions, make_chain(cfg), cfg["seed"],
                           intel.SrtBlockConfig(n_sentences=cfg["n_sentences"]), cfg["workers"])
    summary = {"conditions": study_summary(rows, conditions), **provenance(cfg)}
    if args.out:
        d = Path(args.out)
        write_jsonl(d / "rows.jsonl", rows)
        write_json(d / "study.json", summary)
    return summary


# --------------------------------------------------------------------------
# stats
# --------------------------------------------------------------------------

STATS_DEFAULTS = {"method": "auto"}


def cmd_stats(args, cfg):
    payload = json.loads(Path(args.input).read_text())
    if args.test == "describe":
        result = {"box": stats.box_summary(payload["values"]), "median_mad": stats.median_mad(payload["values"])}
    else:
        result = stats.run_test(args.test, {**payload, "method": cfg["method"]}).to_dict()
    result = {**result, **provenance(cfg)}
    if args.out:
        write_json(args.out, result)
    return result


# --------------------------------------------------------------------------
# demo
# --------------------------------------------------------------------------

DEMO_DEFAULTS = {
    "corpus_items": 24, "crop_s": 2.0, "preset": "whamvox-easy", "pool_size": 4, "n_train": 16,
    "mlp_steps": 2000, "nas_population": 4, "nas_sample": 2, "nas_cycles": 8, "nas_budget": 30,
    "nas_eval": 4, "nas_window": 32, "train_steps": 300, "lr": 1e-3, "loss_domain": "spectrogram",
    "srt_listeners": 48, "srt_gain_db": 4.0,
}


def _demo_corpus(st, cfg, out):
    ccfg = corp.CorpusConfig(name="demo", preset=cfg["preset"], n=cfg["corpus_items"], crop_s=cfg["crop_s"],
                             seed=cfg["seed"], pool_size=cfg["pool_size"])
    manifest = corp.build_from_config(ccfg, out / "corpus", cfg["pcm16"], cfg["workers"])
    st["pairs"] = manifest_pairs(out / "corpus" / "manifest.jsonl")
    snrs = [it["realized_snr"] for it in manifest.realized]
    return {"n_items": len(manifest.items), "n_realized": len(snrs), "mean_realized_snr": float(np.mean(snrs)),
            "manifest_sha256": sha256(out / "corpus" / "manifest.jsonl")}


def _demo_ratings(st, cfg, out):
    # mixtures plus their oracle-enhanced versions, so labels span both ends of the scale
    feats = {}
    for pid, clean, mix in st["pairs"]:
        feats[f"{pid}/mix"] = metrics.metric_vector(clean, mix)
        feats[f"{pid}/oracle"] = metrics.metric_vector(clean, search.oracle_denoiser(clean, mix))
    feats = {k: v for k, v in feats.items() if v.defined}
    batches, accepted, labels = Q.simulate_campaign({k: Q.latent_quality(v) for k, v in feats.items()},
                                                    cfg["seed"])
    write_jsonl(out / "ratings.jsonl", [asdict(r) for b in batches for r in b.ratings])
    st["features"], st["labels"] = feats, labels
    return {"n_files": len(feats), "n_batches": len(batches), "accepted_fraction": float(np.mean(accepted)),
            "n_labels": len(labels), "mean_label": float(np.mean([lab.mos for lab in labels]))}


def _demo_mlp(st, cfg, out):
    labels = st["labels"]
    feats = [st["features"][lab.file_id] for lab in labels]
    model = Q.train_mos_mlp(feats, labels, steps=cfg["mlp_steps"], seed=cfg["seed"])
    Q.save_estimator(out / "mlp.mosm", model)
    pred = Q.predict_mos_mlp(model, feats)
    st["mlp"] = model
    return {"n_train": len(labels), "train_rmse": float(np.sqrt(np.mean((pred - [lab.mos for lab in labels]) ** 2)))}


def _demo_nas(st, cfg, out):
    pairs = [(c, m) for _, c, m in st["pairs"]]
    n = cfg["n_train"]
    ncfg = {**NAS_DEFAULTS, "population": cfg["nas_population"], "sample": cfg["nas_sample"],
            "cycles": cfg["nas_cycles"], "budget": cfg["nas_budget"], "window": cfg["nas_window"],
            "batch_size": 2, "lr": cfg["lr"], "loss_domain": cfg["loss_domain"], "space": "small",
            "seed": cfg["seed"]}
    summary, _ = nas_search(ncfg, st["mlp"], pairs[:n], pairs[n:n + cfg["nas_eval"]], out / "nas",
                            cfg["workers"])
    st["genome"] = Genome.from_dict(summary["best_genome"])
    return summary


def _demo_train(st, cfg, out):
    n = cfg["n_train"]
    data = search.training_examples([(c, m) for _, c, m in st["pairs"][:n]])
    model = build_from_genome(st["genome"], seed=cfg["seed"], dtype="float32")
    res = train_denoiser(model, data, cfg["train_steps"], 4, cfg["seed"], cfg["lr"], 64, cfg["loss_domain"])
    save_model(out / "winner.bin", model, provenance(cfg))
    st["model"] = model
    L = np.asarray(res.losses)
    return {"n_params": model.n_params, "initial_loss": float(L[:10].mean()), "final_loss": float(L[-10:].mean())}


def _demo_delta(st, cfg, out):
    held = st["pairs"][cfg["n_train"]:]
    deltas, gains = [], []
    for _, clean, mix in held:
        y = denoise(st["model"], mix)
        deltas.append(search._scored_delta(st["mlp"], clean, mix, y))
        gains.append(metrics.global_snr(clean, y) - metrics.global_snr(clean, mix))
    return {"n_eval": len(held), "mean_delta_mos": float(np.mean(deltas)), "delta_mos": deltas,
            "mean_snr_gain_db": float(np.mean(gains))}


def _demo_srt(st, cfg, out):
    listeners = intel.cohort(cfg["srt_listeners"], -5.8, 1.0, seed=cfg["seed"])
    cond = intel.NoiseCondition("stationary")
    chain = intel.ProcessingChain("fixed-snr-gain", cfg["srt_gain_db"])
    rows = intel.run_study(listeners, [cond], chain, cfg["seed"], workers=cfg["workers"])
    summary = study_summary(rows, [cond])["stationary"]
    return {"chain": chain.to_dict(), **summary}


DEMO_STAGES = (("corpus", _demo_corpus), ("ratings", _demo_ratings), ("mlp", _demo_mlp), ("nas", _demo_nas),
               ("train", _demo_train), ("delta-mos", _demo_delta), ("srt", _demo_srt))


def run_demo(cfg, out: Path):
    """Run every stage in order; a failing stage ends the run with a partial report."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    st, stages, error = {}, [], None
    for name, fn in DEMO_STAGES:
        if error is not None:
            stages.append({"stage": name, "status": "skipped"})
            continue
        try:
            stages.append({"stage": name, "status": "ok", **fn(st, cfg, out)})
        except Exception as exc:  # noqa: BLE001 - reported in the partial report, re-raised below
            log.error("demo stage %s failed: %s", name, exc)
            stages.append({"stage": name, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            error = exc
    report = {"stages": stages, "ok": error is None, **provenance(cfg)}
    write_json(out / "report.json", report)
    return report, error


def cmd_demo(args, cfg):
    d = out_dir(args, "demo")
    report, error = run_demo(cfg, d)
    if error is not None:
        raise error
    return {"report": (d / "report.json").as_posix(), "report_sha256": sha256(d / "report.json"),
            "stages": {s["stage"]: s["status"] for s in report["stages"]}}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = Parser(add_help=False)
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--workers", type=int, help="parallel workers (default: CPU count)")
    p.add_argument("--pcm16", action="store_true", help="write 16-bit PCM instead of float WAV")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _options(p, defaults: dict):
    """One --flag per default; typed from the default value, None meaning 'not given'."""
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, dest=key, action="store_true", default=None)
        elif isinstance(default, (list, tuple)):
            elem = type(default[0]) if default else str
            p.add_argument(flag, dest=key, nargs="+", type=elem)
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            p.add_argument(flag, dest=key, type=type(default))
        elif key in ("mean", "sd", "lo", "hi"):
            p.add_argument(flag, dest=key, type=float)
        elif key in ("n_synthetic", "pool_size"):
            p.add_argument(flag, dest=key, type=int)
        else:
            p.add_argument(flag, dest=key)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = Parser(prog="denoise-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"denoise-lab {__version__}")
    top = parser.add_subparsers(dest="command", parser_class=Parser)

    def leaf(sub, name, fn, defaults, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        _options(p, defaults)
        p.set_defaults(func=fn, defaults=defaults)
        return p

    c = top.add_parser("corpus", help="dataset construction").add_subparsers(dest="sub", parser_class=Parser)
    p = leaf(c, "scan", cmd_corpus_scan, SCAN_DEFAULTS, "annotate WAV assets in a directory")
    p.add_argument("directory")
    p = leaf(c, "filter", cmd_corpus_filter, FILTER_DEFAULTS, "apply speech/noise selection rules")
    p.add_argument("assets", help="JSONL written by 'corpus scan'")
    leaf(c, "build", cmd_corpus_build, BUILD_DEFAULTS, "sample and realize a mixture dataset")

    n = top.add_parser("net", help="denoiser training and inference").add_subparsers(dest="sub", parser_class=Parser)
    leaf(n, "train", cmd_net_train, TRAIN_DEFAULTS, "train a genome-built U-Net")
    p = leaf(n, "denoise", cmd_net_denoise, {}, "denoise a WAV file")
    p.add_argument("model")
    p.add_argument("input")
    p = leaf(n, "info", cmd_net_info, {}, "describe a model file")
    p.add_argument("model")

    p = leaf(top, "metrics", cmd_metrics, {}, "objective metrics of a degraded file against its clean reference")
    p.add_argument("clean")
    p.add_argument("degraded")

    m = top.add_parser("mos", help="MOS estimators").add_subparsers(dest="sub", parser_class=Parser)
    leaf(m, "train-mlp", cmd_mos_train_mlp, MLP_DEFAULTS, "fit the metric-feature MLP")
    p = leaf(m, "synthesize", cmd_mos_synthesize, MOS_PAIR_DEFAULTS, "label pairs with an MLP")
    p.add_argument("model")
    leaf(m, "train-net", cmd_mos_train_net, NET_DEFAULTS, "fit the spectrogram MOS network")
    p = leaf(m, "predict", cmd_mos_predict, {}, "predicted MOS of one file")
    for a in ("model", "clean", "degraded"):
        p.add_argument(a)
    p = leaf(m, "delta", cmd_mos_delta, {}, "delta-MOS of a processed file")
    for a in ("model", "clean", "mix", "processed"):
        p.add_argument(a)

    s = top.add_parser("nas", help="architecture search").add_subparsers(dest="sub", parser_class=Parser)
    leaf(s, "run", cmd_nas_run, NAS_DEFAULTS, "regularized evolution over U-Net genomes")

    r = top.add_parser("srt", help="simulated SRT measurements").add_subparsers(dest="sub", parser_class=Parser)
    leaf(r, "block", cmd_srt_block, BLOCK_DEFAULTS, "one adaptive block")
    leaf(r, "study", cmd_srt_study, STUDY_DEFAULTS, "listeners x conditions study")

    p = leaf(top, "stats", cmd_stats, STATS_DEFAULTS, "nonparametric tests on a JSON payload")
    p.add_argument("test", choices=("wilcoxon", "mann-whitney", "friedman", "describe"))
    p.add_argument("input")

    leaf(top, "demo", cmd_demo, DEMO_DEFAULTS, "end-to-end pipeline on synthetic data")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args, args.defaults)
        result = args.func(args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - mapped to the exit-code taxonomy
        code = exit_code(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    sys.stdout.write(dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
