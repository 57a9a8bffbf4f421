"""Command routing, config resolution, exit codes and artifacts of the CLI."""

import json

import numpy as np
import pytest

from denoise_lab import __version__, cli
from denoise_lab.synth import noise_like, speech_like
from denoise_lab.wavio import read_wav, write_wav


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 and out.startswith("{") else out)


@pytest.fixture
def wavs(tmp_path):
    clean = speech_like(1.5, 0)
    write_wav(tmp_path / "clean.wav", clean)
    write_wav(tmp_path / "noise.wav", noise_like(1.5, 1))
    mix = clean.with_samples(clean.samples + 0.3 * noise_like(1.5, 1).samples)
    write_wav(tmp_path / "mix.wav", mix)
    return tmp_path


class TestRouting:
    def test_version(self, capsys):
        assert cli.main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["corpus"], ["srt", "block", "--slope", "steep"],
                                      ["stats", "anova", "x.json"], ["srt", "block", "--workers", "0"]])
    def test_usage_errors(self, argv, capsys):
        assert cli.main(argv) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_file_is_data_error(self, capsys):
        assert cli.main(["metrics", "nope.wav", "nope.wav"]) == 2
        assert "Traceback" not in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::scipy.io.wavfile.WavFileWarning")
    def test_corrupt_wav_is_data_error(self, tmp_path, capsys):
        (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
        assert cli.main(["metrics", str(tmp_path / "bad.wav"), str(tmp_path / "bad.wav")]) == 2


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"srt_true": -3, "typo": 1}')
        assert cli.main(["srt", "block", "--config", str(tmp_path / "c.json")]) == 1
        assert "typo" in capsys.readouterr().err

    def test_precedence(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"srt_true": -3.0, "slope": 0.2, "seed": 4}')
        code, out = run(["srt", "block", "--config", tmp_path / "c.json", "--slope", "0.1"], capsys)
        assert code == 0
        assert out["config"]["srt_true"] == -3.0 and out["config"]["slope"] == 0.1
        assert out["seed"] == 4 and out["config"]["seed"] == 4

    def test_non_object_config(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("[1, 2]")
        assert cli.main(["srt", "block", "--config", str(tmp_path / "c.json")]) == 1


class TestMetricsAndStats:
    def test_identity_pair(self, wavs, capsys):
        code, out = run(["metrics", wavs / "clean.wav", wavs / "clean.wav"], capsys)
        assert code == 0
        assert out["stoi"] == pytest.approx(1.0, abs=1e-12)
        assert out["flags"] == [] and out["seed"] == 0

    def test_writes_out(self, wavs, capsys):
        code, out = run(["metrics", wavs / "clean.wav", wavs / "mix.wav", "--out", wavs / "m.json"], capsys)
        assert code == 0 and json.loads((wavs / "m.json").read_text()) == out

    def test_stats(self, tmp_path, capsys):
        (tmp_path / "w.json").write_text(json.dumps({"values_a": [1, 2, 3, 4, 5], "values_b": [0] * 5}))
        code, out = run(["stats", "wilcoxon", tmp_path / "w.json"], capsys)
        assert code == 0 and out["p_value"] == pytest.approx(2 / 32) and out["method"] == "exact"
        (tmp_path / "d.json").write_text(json.dumps({"values": [1, 2, 3, 4, 5]}))
        code, out = run(["stats", "describe", tmp_path / "d.json"], capsys)
        assert out["median_mad"] == [3.0, 1.0]
        (tmp_path / "f.json").write_text(json.dumps({"blocks": [[1, 2], [3, 4]]}))
        assert cli.main(["stats", "friedman", str(tmp_path / "f.json")]) == 2


class TestCorpus:
    def build(self, out, capsys, *extra):
        return run(["corpus", "build", "--preset", "whamvox-hard", "--n", 8, "--seed", 7, "--crop-s", 1.0,
                    "--pool-size", 3, "--workers", 1, "--out", out, *extra], capsys)

    def test_build_deterministic(self, tmp_path, capsys):
        c1, o1 = self.build(tmp_path / "a", capsys)
        c2, o2 = self.build(tmp_path / "b", capsys)
        assert c1 == c2 == 0
        a, b = (tmp_path / "a" / "manifest.jsonl").read_bytes(), (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b and o1["manifest_sha256"] == o2["manifest_sha256"]
        saved = json.loads((tmp_path / "a" / "config.json").read_text())
        assert saved["config"]["seed"] == 7 and saved["config"]["preset"] == "whamvox-hard"

    def test_unknown_preset(self, tmp_path, capsys):
        assert cli.main(["corpus", "build", "--preset", "nope", "--out", str(tmp_path)]) == 2

    def test_scan_and_filter(self, tmp_path, capsys):
        self.build(tmp_path / "c", capsys)
        code, out = run(["corpus", "scan", tmp_path / "c" / "pool" / "noise", "--kind", "noise",
                         "--out", tmp_path / "assets.jsonl"], capsys)
        assert code == 0 and out["n_assets"] == 3
        code, out = run(["corpus", "filter", tmp_path / "assets.jsonl", "--noise-max-snr", 60,
                         "--out", tmp_path / "kept.jsonl"], capsys)
        assert code == 0 and out["n_kept"] == 3
        assert len((tmp_path / "kept.jsonl").read_text().splitlines()) == 3


class TestNetAndMos:
    def test_train_info_denoise(self, tmp_path, wavs, capsys):
        code, out = run(["net", "train", "--n-synthetic", 2, "--duration", 1.0, "--steps", 3, "--filters", 4,
                         "--window", 16, "--seed", 2, "--out", tmp_path / "net"], capsys)
        assert code == 0 and out["seed"] == 2
        model = tmp_path / "net" / "model.bin"
        code, info = run(["net", "info", model], capsys)
        assert info["n_params"] == out["n_params"] and info["meta"]["seed"] == 2
        code, res = run(["net", "denoise", model, wavs / "mix.wav", "--out", tmp_path / "y.wav"], capsys)
        assert code == 0
        assert len(read_wav(tmp_path / "y.wav")) == len(read_wav(wavs / "mix.wav"))
        assert json.loads((tmp_path / "y.wav.json").read_text())["seed"] == 0

    def test_divergence_is_numerical_error(self, tmp_path, capsys):
        with np.errstate(all="ignore"):
            code = cli.main(["net", "train", "--n-synthetic", "2", "--duration", "1.0", "--steps", "20",
                             "--filters", "4", "--window", "16", "--lr", "1e30", "--out", str(tmp_path)])
        assert code == 3

    def test_mos_pipeline(self, tmp_path, wavs, capsys):
        common = ["--n-synthetic", 16, "--duration", 1.0, "--seed", 3]
        code, out = run(["mos", "train-mlp", *common, "--steps", 50, "--out", tmp_path], capsys)
        assert code == 0 and out["n_train"] == 16
        mlp = tmp_path / "mlp.mosm"
        code, out = run(["mos", "synthesize", mlp, *common, "--out", tmp_path / "labels.jsonl"], capsys)
        assert code == 0 and out["n_labels"] == 16
        code, out = run(["mos", "train-net", *common, "--labels", tmp_path / "labels.jsonl", "--steps", 3,
                         "--batch-size", 4, "--out", tmp_path], capsys)
        assert code == 0 and (tmp_path / "net.mosm").exists()
        for est in (mlp, tmp_path / "net.mosm"):
            code, out = run(["mos", "predict", est, wavs / "clean.wav", wavs / "mix.wav"], capsys)
            assert 1 <= out["pmos"] <= 5
            code, out = run(["mos", "delta", est, wavs / "clean.wav", wavs / "mix.wav", wavs / "mix.wav"], capsys)
            assert out["delta_mos"] == 0.0

    def test_campaign_labels(self, tmp_path, capsys):
        code, out = run(["mos", "train-mlp", "--n-synthetic", 30, "--duration", 1.0, "--labels", "campaign",
                         "--steps", 20, "--out", tmp_path], capsys)
        assert code == 0 and 10 <= out["n_train"] <= 30

    def test_ratings_file(self, tmp_path, capsys):
        rows = [{"file_id": f"pair{i:05d}", "rater_id": r, "score": 1 + (i % 5)} for i in range(12) for r in range(3)]
        (tmp_path / "r.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
        code, out = run(["mos", "train-mlp", "--n-synthetic", 12, "--duration", 1.0, "--ratings",
                         tmp_path / "r.jsonl", "--steps", 10, "--out", tmp_path], capsys)
        assert code == 0 and out["n_train"] == 12


class TestNasAndSrt:
    def test_nas_run(self, tmp_path, capsys):
        run(["mos", "train-mlp", "--n-synthetic", 16, "--duration", 1.0, "--steps", 50, "--out", tmp_path], capsys)
        code, out = run(["nas", "run", "--population", 2, "--sample", 1, "--cycles", 1, "--budget", 1,
                         "--n-train", 2, "--n-eval", 1, "--space", "small", "--window", 16, "--batch-size", 1,
                         "--estimator", tmp_path / "mlp.mosm", "--workers", 1, "--out", tmp_path / "nas"], capsys)
        assert code == 0 and out["n_evaluated"] == 3
        rows = (tmp_path / "nas" / "history.jsonl").read_text().splitlines()
        assert len(rows) == 3 and "genome" in json.loads(rows[0])
        assert (tmp_path / "nas" / "best_model.bin").exists()
        assert json.loads((tmp_path / "nas" / "nas.json").read_text())["config"]["population"] == 2

    def test_nas_bad_space(self, tmp_path, capsys):
        assert cli.main(["nas", "run", "--space", "huge", "--out", str(tmp_path)]) == 1

    def test_srt_block_gain(self, capsys):
        _, a = run(["srt", "block", "--seed", 1], capsys)
        _, b = run(["srt", "block", "--seed", 1, "--chain", "fixed-snr-gain", "--gain-db", 4], capsys)
        assert len(a["levels"]) == 20 and b["srt"] < a["srt"]

    def test_srt_block_bad_chain(self, capsys):
        assert cli.main(["srt", "block", "--chain", "magic"]) == 2

    def test_srt_study(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"conditions": ["a", {"name": "b", "srt_offset": 3.0}],
                                                     "n_listeners": 6, "chain": "fixed-snr-gain", "gain_db": 4.0}))
        code, out = run(["srt", "study", "--config", tmp_path / "c.json", "--workers", 1,
                         "--out", tmp_path / "study"], capsys)
        assert code == 0 and set(out["conditions"]) == {"a", "b"}
        assert out["conditions"]["a"]["mean_srt_change"] < 0
        assert len((tmp_path / "study" / "rows.jsonl").read_text().splitlines()) == 12


class TestDemo:
    def test_partial_report_on_failure(self, tmp_path, capsys, monkeypatch):
        def broken(st, cfg, out):
            raise cli.Q.QualityError("no labels")

        stages = list(cli.DEMO_STAGES)
        stages[0] = ("corpus", lambda st, cfg, out: {"n_items": 0})
        stages[1] = ("ratings", broken)
        monkeypatch.setattr(cli, "DEMO_STAGES", tuple(stages))
        code = cli.main(["demo", "--seed", "7", "--out", str(tmp_path)])
        assert code == 2
        report = json.loads((tmp_path / "report.json").read_text())
        status = [(s["stage"], s["status"]) for s in report["stages"]]
        assert status[:2] == [("corpus", "ok"), ("ratings", "failed")]
        assert all(s == "skipped" for _, s in status[2:]) and len(status) == 7
        assert report["seed"] == 7 and not report["ok"]
        assert "no labels" in report["stages"][1]["error"]
