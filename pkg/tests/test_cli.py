"""End-to-end CLI tests through main(argv); exercises the exit-code map."""

import json

import numpy as np
import pytest

import aredit.cli as cli
import aredit.imageio as imageio


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny gen-data -> fit-tokenizer -> train pipeline shared by the
    checkpoint-consuming tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert run("gen-data", "--out", str(data_dir), "--count", "12",
               "--seed", "3") == cli.EXIT_OK
    cb_path = root / "codebook.bin"
    assert run("fit-tokenizer", "--data", str(data_dir), "--k", "256",
               "--out", str(cb_path)) == cli.EXIT_OK
    config = root / "config.json"
    config.write_text(json.dumps({
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "k_img": 256,
                  "v_text": 35, "l_text": 16, "n_img": 64, "d_teacher": 8},
        "train": {"steps": 2, "batch_size": 4, "checkpoint_interval": 0},
    }))
    run_dir = root / "run"
    assert run("train", "--data", str(data_dir), "--codebook", str(cb_path),
               "--config", str(config), "--out", str(run_dir)) == cli.EXIT_OK
    return {"root": root, "data": data_dir, "codebook": cb_path,
            "config": config, "ckpt": run_dir / "ckpt-final.bin"}


class TestGenData:
    def test_manifest_counts(self, pipeline):
        manifest = json.loads(
            (pipeline["data"] / "manifest.json").read_text())
        assert manifest["count"] == 12
        assert sum(manifest["counts_per_task"].values()) == 12
        corpus = imageio.read_corpus(pipeline["data"] / "corpus.bin")
        assert len(corpus) == 12

    def test_bad_mix_is_usage_error(self, tmp_path):
        assert run("gen-data", "--out", str(tmp_path), "--count", "2",
                   "--mix", "edit=banana") == cli.EXIT_USAGE
        assert run("gen-data", "--out", str(tmp_path), "--count", "2",
                   "--mix", "edit=0.5,canny=0.1") == cli.EXIT_USAGE

    def test_mix_parser(self):
        mix = cli.parse_mix("edit=0.7,seg=0.3")
        assert mix == {"edit": 0.7, "seg": 0.3}
        assert cli.parse_mix(None) == {"edit": 0.55, "canny": 0.15,
                                       "depth": 0.15, "seg": 0.15}


class TestFitTokenizer:
    def test_k_below_two_is_usage_error(self, pipeline, tmp_path):
        assert run("fit-tokenizer", "--data", str(pipeline["data"]),
                   "--k", "1", "--out", str(tmp_path / "cb.bin")) \
            == cli.EXIT_USAGE

    def test_missing_corpus_is_data_error(self, tmp_path):
        assert run("fit-tokenizer", "--data", str(tmp_path),
                   "--out", str(tmp_path / "cb.bin")) == cli.EXIT_DATA

    def test_prints_final_distortion(self, pipeline, capsys):
        assert run("fit-tokenizer", "--data", str(pipeline["data"]),
                   "--out", str(pipeline["root"] / "cb2.bin")) == cli.EXIT_OK
        assert "final distortion:" in capsys.readouterr().out


class TestTrain:
    def test_codebook_size_mismatch_is_compat_error(self, pipeline, tmp_path):
        small_cb = tmp_path / "small.bin"
        assert run("fit-tokenizer", "--data", str(pipeline["data"]),
                   "--k", "8", "--out", str(small_cb)) == cli.EXIT_OK
        assert run("train", "--data", str(pipeline["data"]),
                   "--codebook", str(small_cb),
                   "--config", str(pipeline["config"]),
                   "--out", str(tmp_path / "run")) == cli.EXIT_COMPAT

    def test_unknown_config_section_is_usage_error(self, pipeline, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {}, "optimizer": {}}))
        assert run("train", "--data", str(pipeline["data"]),
                   "--codebook", str(pipeline["codebook"]),
                   "--config", str(bad),
                   "--out", str(tmp_path / "run")) == cli.EXIT_USAGE

    def test_unknown_config_key_is_usage_error(self, pipeline, tmp_path):
        bad = tmp_path / "bad2.json"
        bad.write_text(json.dumps({"train": {"learning_rate": 1e-4}}))
        assert run("train", "--data", str(pipeline["data"]),
                   "--codebook", str(pipeline["codebook"]),
                   "--config", str(bad),
                   "--out", str(tmp_path / "run")) == cli.EXIT_USAGE

    def test_writes_log_and_checkpoints(self, pipeline):
        assert pipeline["ckpt"].exists()
        log = (pipeline["ckpt"].parent / "train-log.ndjson").read_text()
        assert len(log.strip().split("\n")) == 2


class TestGenerate:
    def test_roundtrip(self, pipeline, tmp_path):
        corpus = imageio.read_corpus(pipeline["data"] / "corpus.bin")
        src = tmp_path / "in.ppm"
        out = tmp_path / "out.ppm"
        imageio.ppm_write(src, corpus[0].condition)
        assert run("generate", "--ckpt", str(pipeline["ckpt"]),
                   "--image", str(src), "--instruction", "keep the scene",
                   "--eta", "1.0", "--seed", "4",
                   "--out", str(out)) == cli.EXIT_OK
        img = imageio.ppm_read(out)
        assert img.shape == (32, 32, 3)

    def test_translation_kind_renders_instruction(self, pipeline, tmp_path):
        corpus = imageio.read_corpus(pipeline["data"] / "corpus.bin")
        src = tmp_path / "in.ppm"
        imageio.ppm_write(src, corpus[0].condition)
        assert run("generate", "--ckpt", str(pipeline["ckpt"]),
                   "--image", str(src), "--kind", "seg",
                   "--instruction", "a red square on light background",
                   "--out", str(tmp_path / "o.ppm")) == cli.EXIT_OK

    def test_wrong_size_image_is_input_error(self, pipeline, tmp_path):
        src = tmp_path / "big.ppm"
        imageio.ppm_write(src, np.zeros((64, 64, 3)))
        assert run("generate", "--ckpt", str(pipeline["ckpt"]),
                   "--image", str(src), "--instruction", "x",
                   "--out", str(tmp_path / "o.ppm")) == cli.EXIT_INPUT

    def test_missing_image_is_input_error(self, pipeline, tmp_path):
        assert run("generate", "--ckpt", str(pipeline["ckpt"]),
                   "--image", str(tmp_path / "nope.ppm"),
                   "--instruction", "x",
                   "--out", str(tmp_path / "o.ppm")) == cli.EXIT_INPUT

    def test_codebook_only_checkpoint_is_compat_error(self, pipeline,
                                                      tmp_path):
        assert run("generate", "--ckpt", str(pipeline["codebook"]),
                   "--image", str(tmp_path / "x.ppm"), "--instruction", "x",
                   "--out", str(tmp_path / "o.ppm")) == cli.EXIT_COMPAT

    def test_corrupt_checkpoint_is_data_error(self, pipeline, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"AREDITCK" + b"\x00" * 16)
        assert run("generate", "--ckpt", str(bad),
                   "--image", str(tmp_path / "x.ppm"), "--instruction", "x",
                   "--out", str(tmp_path / "o.ppm")) == cli.EXIT_DATA


class TestEval:
    def test_report_and_summary_line(self, pipeline, tmp_path, capsys):
        report = tmp_path / "report.json"
        assert run("eval", "--ckpt", str(pipeline["ckpt"]),
                   "--data", str(pipeline["data"]),
                   "--report", str(report)) == cli.EXIT_OK
        out = capsys.readouterr().out
        for col in cli.AGGREGATE_COLUMNS:
            assert col in out
        doc = json.loads(report.read_text())
        assert "per_task" in doc and "substitutions" in doc
