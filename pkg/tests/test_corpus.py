"""Corpus: SNR estimation, filtering, truncated sampling and dataset building."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from denoise_lab import corpus as C
from denoise_lab import signal as sig
from denoise_lab.wavio import read_wav, write_wav

SR = sig.SAMPLE_RATE


def asset(kind, snr, dur, i=0):
    return C.AudioAsset(f"a{i}", f"/x/a{i}.wav", kind, dur, snr, -20.0)


class TestEstimateSnr:
    def test_white_noise_low(self):
        x = np.random.default_rng(0).standard_normal(2 * SR) * 0.1
        assert C.estimate_snr(x) < 6

    def test_gated_tone_high(self):
        t = np.arange(3 * SR) / SR
        gate = (np.floor(t * 4) % 2 == 0).astype(float)  # 50% duty
        amp = np.where(gate > 0, 1.0, 10 ** (-40 / 20))
        x = 0.3 * amp * np.sin(2 * np.pi * 440 * t)
        assert C.estimate_snr(x) > 20

    def test_silence_floor(self):
        assert C.estimate_snr(np.zeros(SR)) == C.EST_FLOOR_DB

    def test_too_short(self):
        with pytest.raises(C.CorpusError):
            C.estimate_snr(np.ones(SR // 2))

    def test_bounded(self):
        x = np.zeros(2 * SR)
        x[: SR // 2] = 1.0  # p10 energy zero, p90 nonzero
        assert C.estimate_snr(x) == C.EST_CEIL_DB


class TestFilter:
    @pytest.mark.parametrize("a,kept", [
        (asset("speech", 25, 10), True),
        (asset("speech", 25, 6), False),
        (asset("speech", 15, 10), False),
        (asset("speech", 20, 8), True),
        (asset("noise", -5, 10), False),
        (asset("noise", -15, 3), True),
    ])
    def test_rules(self, a, kept):
        assert (C.filter_assets([a]) == [a]) == kept

    @given(st.lists(st.tuples(st.sampled_from(["speech", "noise"]), st.floats(-60, 60), st.floats(0.1, 20)), max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_order_and_conformance(self, specs):
        assets = [asset(k, s, d, i) for i, (k, s, d) in enumerate(specs)]
        kept = C.filter_assets(assets)
        ids = [a.id for a in assets]
        assert [ids.index(a.id) for a in kept] == sorted(ids.index(a.id) for a in kept)
        for a in kept:
            if a.kind == "speech":
                assert a.estimated_snr >= 20 and a.duration >= 8
            else:
                assert a.estimated_snr <= -12
        assert len(kept) == sum(C.passes(a) for a in assets)


class TestSampling:
    @pytest.mark.parametrize("preset", ["whamvox-easy", "whamvox-hard"])
    def test_never_out_of_range(self, preset):
        d = C.PRESETS[preset]
        x = C.truncated_normal(np.random.default_rng(1), d, 10_000)
        assert np.all((x >= d.lo) & (x <= d.hi))

    def test_preset_values(self):
        assert C.PRESETS["whamvox-easy"] == C.SnrDistribution(8, 7, -12, 27)
        assert C.PRESETS["whamvox-hard"] == C.SnrDistribution(0, 7, -20, 20)

    @pytest.mark.parametrize("preset,target", [("whamvox-easy", 8.0), ("whamvox-hard", 0.0)])
    def test_mean_of_1000(self, preset, target):
        d = C.PRESETS[preset]
        # the truncated mean itself, from scipy's truncnorm, sits close to the nominal mean
        a, b = (d.lo - d.mean) / d.sd, (d.hi - d.mean) / d.sd
        assert abs(sps.truncnorm.mean(a, b, loc=d.mean, scale=d.sd) - target) < 0.1
        recipes = C.sample_recipes(["s"], ["n"], 1000, d, seed=11)
        assert abs(np.mean([r.target_snr for r in recipes]) - target) < 0.7

    def test_deterministic_and_uniform_assets(self):
        d = C.PRESETS["whamvox-easy"]
        a = C.sample_recipes(["s0", "s1", "s2"], ["n0", "n1"], 300, d, seed=3)
        b = C.sample_recipes(["s0", "s1", "s2"], ["n0", "n1"], 300, d, seed=3)
        assert a == b
        counts = np.bincount([int(r.speech[1]) for r in a], minlength=3)
        assert counts.min() > 60

    def test_empty_pool(self):
        with pytest.raises(C.CorpusError):
            C.sample_recipes([], ["n"], 3, C.PRESETS["whamvox-easy"])

    def test_bad_distribution(self):
        with pytest.raises(C.CorpusError):
            C.SnrDistribution(0, 0, -1, 1)


@pytest.fixture(scope="module")
def pools(tmp_path_factory):
    root = tmp_path_factory.mktemp("pool")
    return root, C.synthetic_pools(root, 3, 3, duration=4.5, seed=5)


class TestBuild:
    def test_synthetic_speech_passes_filter(self, pools):
        _, (speech, noise) = pools
        assert all(a.estimated_snr >= 20 for a in speech)
        assert all(a.kind == "noise" for a in noise)

    def test_items(self, pools, tmp_path):
        root, (speech, noise) = pools
        recipes = C.sample_recipes(speech, noise, 6, C.PRESETS["whamvox-hard"], crop_s=4.0, seed=2)
        m = C.build_dataset(recipes, tmp_path, "t", source_root=root)
        assert len(m.realized) == 6
        for it in m.realized:
            clean = read_wav(tmp_path / it["speech"])
            noise_ = read_wav(tmp_path / it["noise"])
            mix = read_wav(tmp_path / it["mixture"])
            assert len(clean) == len(noise_) == len(mix) == 88200
            assert sig.rms_dbfs(clean) == pytest.approx(-20, abs=1e-4)
            # the noise file holds the scaled component
            assert sig.rms_dbfs(noise_) + it["target_snr"] == pytest.approx(-20, abs=1e-4)
            realized = sig.rms_dbfs(clean) - sig.rms_dbfs(noise_)
            assert abs(realized - it["target_snr"]) < 0.01
            assert it["realized_snr"] == pytest.approx(realized)
            np.testing.assert_allclose(mix.samples, clean.samples + noise_.samples, atol=1e-6)

    def test_manifest_jsonl(self, pools, tmp_path):
        root, (speech, noise) = pools
        recipes = C.sample_recipes(speech, noise, 3, C.PRESETS["whamvox-easy"], crop_s=1.0, seed=4)
        C.build_dataset(recipes, tmp_path, "t", {"seed": 4}, source_root=root)
        rows = C.load_manifest(tmp_path / "manifest.jsonl")
        keys = {"id", "speech", "noise", "mixture", "target_snr", "realized_snr", "crop_s", "norm_dbfs", "seed"}
        assert all(keys <= set(r) for r in rows)
        assert json.loads((tmp_path / "config.json").read_text())["config"] == {"seed": 4}

    def test_byte_identical(self, pools, tmp_path):
        root, (speech, noise) = pools
        recipes = C.sample_recipes(speech, noise, 3, C.PRESETS["whamvox-hard"], crop_s=1.0, seed=9)
        C.build_dataset(recipes, tmp_path / "a", source_root=root)
        C.build_dataset(recipes, tmp_path / "b", source_root=root)
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
        assert (tmp_path / "a/mixture/item0000.wav").read_bytes() == (tmp_path / "b/mixture/item0000.wav").read_bytes()

    def test_unreadable_asset_skipped(self, pools, tmp_path):
        root, (speech, noise) = pools
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"not a wav")
        recipes = [C.MixtureRecipe("item0000", str(bad), noise[0].path, 0.0, 1.0, -20.0, 1),
                   C.MixtureRecipe("item0001", speech[0].path, noise[0].path, 0.0, 1.0, -20.0, 2)]
        m = C.build_dataset(recipes, tmp_path / "out", source_root=root)
        assert m.items[0]["skipped"] and "reason" in m.items[0]
        assert len(m.realized) == 1

    def test_short_asset_skipped(self, pools, tmp_path):
        root, (speech, noise) = pools
        write_wav(tmp_path / "short.wav", sig.Waveform(np.ones(SR) * 0.1))
        r = C.MixtureRecipe("item0000", str(tmp_path / "short.wav"), noise[0].path, 0.0, 4.0, -20.0, 1)
        assert C.realize(r, tmp_path / "out")["skipped"]

    def test_resamples_foreign_rate(self, tmp_path):
        rng = np.random.default_rng(0)
        write_wav(tmp_path / "s.wav", sig.Waveform(rng.standard_normal(16000 * 2) * 0.1, 16000))
        write_wav(tmp_path / "n.wav", sig.Waveform(rng.standard_normal(16000 * 2) * 0.1, 16000))
        r = C.MixtureRecipe("i", str(tmp_path / "s.wav"), str(tmp_path / "n.wav"), 5.0, 1.5, -20.0, 0)
        rec = C.realize(r, tmp_path / "out")
        assert len(read_wav(tmp_path / "out" / rec["mixture"])) == int(1.5 * SR)

    def test_parallel_matches_serial(self, pools, tmp_path):
        root, (speech, noise) = pools
        recipes = C.sample_recipes(speech, noise, 3, C.PRESETS["whamvox-easy"], crop_s=1.0, seed=6)
        C.build_dataset(recipes, tmp_path / "a", source_root=root)
        C.build_dataset(recipes, tmp_path / "b", workers=2, source_root=root)
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(C.CorpusError, match="unknown"):
            C.CorpusConfig.from_dict({"n": 3, "colour": "red"})

    def test_preset_override(self):
        cfg = C.CorpusConfig.from_dict({"preset": "whamvox-hard", "mean": 2.0})
        assert cfg.distribution() == C.SnrDistribution(2.0, 7.0, -20.0, 20.0)

    def test_unknown_preset(self):
        with pytest.raises(C.CorpusError):
            C.CorpusConfig(preset="nope").distribution()

    def test_build_from_config_deterministic(self, tmp_path):
        cfg = C.CorpusConfig(preset="whamvox-hard", n=4, crop_s=1.0, seed=7, pool_size=2)
        C.build_from_config(cfg, tmp_path / "a")
        C.build_from_config(cfg, tmp_path / "b")
        for f in ("manifest.jsonl", "config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
