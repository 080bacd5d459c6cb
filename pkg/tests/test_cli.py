import csv
import hashlib
import io
import json

import numpy as np
import pytest

from ctcprobe import cli, plots
from ctcprobe.cli import ExperimentConfig, load_config, main
from ctcprobe.model import preset
from ctcprobe.probing import ProbeReport


def small_config(out_dir, **overrides):
    cfg = {
        "seed": 5,
        "out_dir": str(out_dir),
        "corpus": {"synthetic": {"n_utterances": 16,
                                 "phone_inventory_size": 4,
                                 "phones_per_utterance": [3, 4],
                                 "segment_frames": [8, 10]}},
        "model": {"preset": "ds2-light-mini"},
        "train": {"epochs": 1, "batch_size": 8},
        "probe": {"layers": [0, 2], "strides": [True], "windows": [0],
                  "schemes": ["full", "sound_class"], "epochs": 2},
        "clustering": {"enabled": True, "layer": 2, "k": 6, "method": "pca"},
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfigValidation:
    def test_bad_layer_rejected_before_work(self, tmp_path):
        cfg = small_config(tmp_path / "out")
        cfg["probe"]["layers"] = [99]
        rc = main(["run", "--config", write_config(tmp_path, cfg)])
        assert rc == 2
        assert not (tmp_path / "out").exists()

    def test_unknown_scheme_rejected(self, tmp_path):
        cfg = small_config(tmp_path / "out")
        cfg["probe"]["schemes"] = ["phonemes"]
        assert main(["run", "--config", write_config(tmp_path, cfg)]) == 2

    def test_corpus_source_must_be_exactly_one(self, tmp_path):
        cfg = small_config(tmp_path / "out")
        cfg["corpus"] = {}
        assert main(["run", "--config", write_config(tmp_path, cfg)]) == 2

    def test_unknown_top_level_key_rejected(self, tmp_path):
        cfg = small_config(tmp_path / "out")
        cfg["extra"] = 1
        assert main(["run", "--config", write_config(tmp_path, cfg)]) == 2

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path)]) == 2

    def test_set_overrides(self, tmp_path):
        cfg_path = write_config(tmp_path, small_config(tmp_path / "out"))
        cfg = load_config(cfg_path, ["seed=9", "train.epochs=3"])
        assert cfg.seed == 9
        assert cfg.train["epochs"] == 3


class TestStageFailure:
    def test_import_failure_reports_stage(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg = small_config(tmp_path / "out")
        cfg["corpus"] = {"import_path": str(empty)}
        rc = main(["run", "--config", write_config(tmp_path, cfg)])
        assert rc == 3
        assert "corpus" in capsys.readouterr().err


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "out"
    cfg = small_config(out)
    cfg_path = tmp / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["run", "--config", str(cfg_path)])
    assert rc == 0
    return out, cfg, str(cfg_path)


class TestRunArtifacts:
    def test_expected_files_exist(self, finished_run):
        out, _cfg, _path = finished_run
        for name in ("corpus_train.jsonl", "corpus_dev.jsonl", "model.ckpt",
                     "asr_loss.csv", "layer_accuracy.csv", "clusters.csv",
                     "manifest.json", "accuracy_strides_on.svg",
                     "centroids.svg", "inter_intra_f1.csv"):
            assert (out / name).exists(), name

    def test_manifest_hashes_are_correct(self, finished_run):
        out, _cfg, _path = finished_run
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["files"]
        for rel, digest in manifest["files"].items():
            actual = hashlib.sha256((out / rel).read_bytes()).hexdigest()
            assert actual == digest, rel

    def test_rerun_is_byte_identical(self, finished_run, tmp_path):
        out, cfg, _path = finished_run
        cfg2 = dict(cfg, out_dir=str(tmp_path / "out2"))
        rc = main(["run", "--config", write_config(tmp_path, cfg2)])
        assert rc == 0
        for rel in sorted(p.name for p in out.iterdir()):
            if rel in ("config.json", "manifest.json"):
                continue
            assert (out / rel).read_bytes() == \
                (tmp_path / "out2" / rel).read_bytes(), rel

    def test_clusters_csv_columns(self, finished_run):
        out, _cfg, _path = finished_run
        rows = list(csv.reader(io.StringIO((out / "clusters.csv").read_text())))
        assert rows[0] == ["cluster_id", "majority_label", "coverage", "x", "y"]
        for row in rows[1:]:
            assert 0.0 < float(row[2]) <= 1.0

    def test_csv_round_trip(self, finished_run):
        out, _cfg, _path = finished_run
        text = (out / "layer_accuracy.csv").read_text()
        rows = list(csv.reader(io.StringIO(text)))
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        assert buf.getvalue() == text

    def test_env_var_overrides_out_dir(self, tmp_path, monkeypatch):
        target = tmp_path / "env-out"
        monkeypatch.setenv(cli.OUT_ROOT_ENV, str(target))
        cfg = small_config(tmp_path / "ignored")
        cfg["probe"] = {"layers": [0], "strides": [True], "windows": [0],
                        "schemes": ["full"], "epochs": 1}
        cfg["clustering"] = {"enabled": False}
        rc = main(["run", "--config", write_config(tmp_path, cfg)])
        assert rc == 0
        assert target.exists()
        assert not (tmp_path / "ignored").exists()


def report_with_accuracy(acc, layer, strides=True):
    return ProbeReport(acc, {}, {}, {}, np.zeros((2, 2), dtype=np.int64),
                       ["a", "b"], 4,
                       {"layer": layer, "strides_enabled": strides})


def parse_svg_data(svg):
    body = svg.split("<!--data\n")[1].split("\n-->")[0]
    return [line.split(",") for line in body.splitlines()]


class TestPlots:
    def test_layer_accuracy_ordering_and_heights(self):
        cfg = preset("ds2-mini")
        reports = {(k, True, 0, "full"): report_with_accuracy(0.1 * k, k)
                   for k in (0, 1, 2, 3)}
        charts = cli.plot_layer_accuracy(reports, cfg)
        data = parse_svg_data(charts[True])
        assert [row[0] for row in data[1:]] == ["input", "cnn1", "cnn2",
                                                "rnn1"]
        assert [float(row[1]) for row in data[1:]] == pytest.approx(
            [0.0, 0.1, 0.2, 0.3])

    def test_single_report_single_bar(self):
        cfg = preset("ds2-mini")
        charts = cli.plot_layer_accuracy(
            {(0, True, 0, "full"): report_with_accuracy(0.5, 0)}, cfg)
        assert len(parse_svg_data(charts[True])) == 2

    def test_empty_reports_rejected(self):
        with pytest.raises(ValueError):
            cli.plot_layer_accuracy({}, preset("ds2-mini"))

    def test_heatmap_cell_shades_follow_row_shares(self):
        svg = plots.svg_heatmap([[3, 1], [0, 2]], ["a", "b"], ["a", "b"])
        rects = [line for line in svg.splitlines()
                 if line.startswith("<rect") and "rgb" in line]
        shades = [int(r.split("rgb(")[1].split(",")[0]) for r in rects]
        # row shares 0.75, 0.25, 0.0, 1.0 -> darker cell = higher share
        assert shades[0] < shades[1]
        assert shades[2] > shades[3]
        assert shades[3] == 0 and shades[2] == 255

    def test_identity_heatmap_diagonal_only(self):
        svg = plots.svg_heatmap(np.eye(3, dtype=int))
        data = parse_svg_data(svg)
        matrix = np.array([[float(v) for v in row[1:]] for row in data[1:]])
        np.testing.assert_array_equal(matrix, np.eye(3))

    def test_scatter_point_count(self):
        rng = np.random.default_rng(0)
        coords = rng.normal(size=(7, 2))
        svg = plots.svg_scatter(coords, [f"c{i}" for i in range(7)])
        assert svg.count("<circle") == 7

    def test_bar_chart_requires_matching_labels(self):
        with pytest.raises(ValueError):
            plots.svg_bar_chart(["a"], [1.0, 2.0])


class TestSubcommands:
    def test_staged_pipeline_matches_run(self, finished_run, tmp_path):
        out, cfg, _ = finished_run
        cfg2 = dict(cfg, out_dir=str(tmp_path / "staged"))
        cfg_path = write_config(tmp_path, cfg2)
        for command in ("synth", "train-asr", "extract", "probe", "cluster",
                        "report"):
            assert main([command, "--config", cfg_path]) == 0, command
        for rel in ("asr_loss.csv", "layer_accuracy.csv", "clusters.csv"):
            assert (tmp_path / "staged" / rel).read_bytes() == \
                (out / rel).read_bytes(), rel
