import csv
import json

import numpy as np
import pytest

from norank import cli
from norank.cli import (
    METRIC_HEADER,
    PALETTE,
    ConfigError,
    DatasetSpec,
    EncoderSpec,
    ReportRow,
    RunConfig,
    apply_env_seed,
    emit_report,
    main,
    parse_method,
    read_report,
    run_benchmark,
    scatter_svg,
)
from norank.data import LabeledDataset, save_dataset
from norank.metrics import MetricsReport
from norank.trainer import TrainConfig


def small_config(out, **kw):
    base = dict(dataset=DatasetSpec("blobs", n=40, seed=1),
                methods=("metric-learning", "pca", "tsne", "raw", "umap"),
                train=TrainConfig(epochs=3, batch_size=20),
                encoder=EncoderSpec(hidden=(16,), embed_dim=4),
                output_dir=str(out), k_neighbors=5)
    base.update(kw)
    return RunConfig(**base)


def read_csv(path):
    return list(csv.reader(open(path)))


def test_parse_method():
    assert parse_method("cp:5") == ("cp", 5)
    assert parse_method("tucker:20") == ("tucker", 20)
    assert parse_method("pca") == ("pca", None)
    for bad in ("cp", "cp:0", "cp:x", "umap:3", "lda"):
        with pytest.raises(ConfigError):
            parse_method(bad)


def test_pca_only_crystals_gives_one_row(tmp_path):
    cfg = RunConfig(dataset=DatasetSpec("crystals", n=64), methods=("pca",),
                    output_dir=str(tmp_path), formats=("csv",))
    run_benchmark(cfg)
    rows = read_csv(tmp_path / "metrics.csv")
    assert tuple(rows[0]) == METRIC_HEADER
    assert len(rows) == 2 and len(rows[1]) == 3 + 8
    assert rows[1][:2] == ["crystals", "pca"]


def test_decompositions_on_random_tensor_carry_variance_identity(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.normal(size=(8, 64)), np.repeat([0, 1], 4), sample_shape=(8, 8))
    save_dataset(ds, tmp_path / "cube.dtn", tmp_path / "cube.csv")
    cfg = RunConfig(dataset=DatasetSpec(None, tensor=str(tmp_path / "cube.dtn"),
                                        labels=str(tmp_path / "cube.csv")),
                    methods=("cp:5", "tucker:5"), output_dir=str(tmp_path / "out"),
                    formats=("csv",), k_neighbors=3)
    run_benchmark(cfg)
    rows = read_csv(tmp_path / "out" / "reconstruction.csv")[1:]
    assert [r[1] for r in rows] == ["cp:5", "tucker:5"]
    for _, _, eps, var in rows:
        eps, var = float(eps), float(var)
        assert 0.0 <= eps < 1.0
        assert abs(var - (1.0 - eps * eps)) <= 1e-12


def test_benchmark_outputs_and_manifest(tmp_path):
    manifest = run_benchmark(small_config(tmp_path))
    rows = read_csv(tmp_path / "metrics.csv")
    assert [r[1] for r in rows[1:]] == ["metric-learning", "pca", "tsne", "raw", "umap"]
    assert rows[-1][3:] == ["n/a"] * 8
    recon = read_csv(tmp_path / "reconstruction.csv")
    assert recon[-1][2:] == ["n/a", "n/a"]
    assert recon[4][1:] == ["raw", "0", "1"]
    hist = read_csv(tmp_path / "histograms.csv")
    assert len(hist) == 1 + 4 * cli.HIST_BINS
    for name in ("metrics.csv", "metrics.json", "metrics.svg", "reconstruction.csv",
                 "histograms.csv", "scatter_metric-learning_tsne.svg", "scatter_raw_pca.svg"):
        assert name in manifest["files"]
    assert json.loads((tmp_path / "manifest.json").read_text())["seeds"]["train"] == 0


def test_benchmark_is_byte_deterministic(tmp_path):
    run_benchmark(small_config(tmp_path / "a"))
    run_benchmark(small_config(tmp_path / "b"))
    for name in ("metrics.csv", "metrics.json", "reconstruction.csv", "histograms.csv",
                 "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() != b""
        if name == "manifest.json":
            ma = json.loads((tmp_path / "a" / name).read_text())
            mb = json.loads((tmp_path / "b" / name).read_text())
            assert ma["files"] == mb["files"]
        else:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def _row(method="pca", sil=0.123456789012345678):
    rep = MetricsReport(sil, 0.5, 12.25, 3.0, 0.9, 0.95, 1.0, 1.0 / 3.0, 10)
    return ReportRow("crystals", method, rep)


def test_empty_report_errors_without_files(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], "csv", tmp_path / "m.csv")
    assert list(tmp_path.iterdir()) == []


def test_csv_json_csv_round_trip(tmp_path):
    rows = [_row(), _row("tsne", -0.1 / 3), ReportRow("crystals", "umap", None, 10)]
    emit_report(rows, "csv", tmp_path / "a.csv")
    emit_report(read_report(tmp_path / "a.csv"), "json", tmp_path / "b.json")
    emit_report(read_report(tmp_path / "b.json"), "csv", tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()
    assert read_report(tmp_path / "c.csv")[0].report == rows[0].report


def test_single_row_golden(tmp_path):
    emit_report([_row()], "csv", tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "dataset,method,k,Sil.,DB,CH,SR,Cont.,Trust.,ARI,NMI"
    assert lines[1] == ("crystals,pca,10,0.12345678901234568,0.5,12.25,3,0.90000000000000002,"
                        "0.94999999999999996,1,0.33333333333333331")
    assert len(lines) == 2


def test_unknown_format_and_bad_schema(tmp_path):
    with pytest.raises(ValueError):
        emit_report([_row()], "xlsx", tmp_path / "m.xlsx")
    (tmp_path / "m.json").write_text(json.dumps({"schema": "other", "rows": []}))
    with pytest.raises(ValueError):
        read_report(tmp_path / "m.json")


def test_scatter_svg_uses_palette():
    svg = scatter_svg(np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]]), [0, 1, 11], "t")
    assert svg.count("<circle") == 3
    assert PALETTE[0] in svg and PALETTE[1] in svg
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_config_round_trip_and_top_level_loss():
    cfg = small_config("out")
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    d = cfg.to_dict()
    d["loss"] = {"margin": 0.7}
    assert RunConfig.from_dict(d).train.loss.margin == 0.7
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})


def test_env_seed_overrides_everything(monkeypatch):
    monkeypatch.setenv("NORANK_SEED", "42")
    cfg = apply_env_seed(small_config("out"))
    assert set(cfg.seeds().values()) == {42}
    monkeypatch.setenv("NORANK_SEED", "abc")
    with pytest.raises(ConfigError):
        apply_env_seed(small_config("out"))
    monkeypatch.delenv("NORANK_SEED")
    assert apply_env_seed(small_config("out")).seeds()["dataset"] == 1


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("NORANK_SEED", raising=False)
    assert main(["benchmark", "--generator", "blobs", "--methods", "lda",
                 "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert main(["benchmark", "--tensor", str(tmp_path / "none.dtn"), "--labels",
                 str(tmp_path / "none.csv"), "--methods", "pca",
                 "--out", str(tmp_path / "y")]) == cli.EXIT_STAGE
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text("{not json")
    assert main(["benchmark", "--config", str(cfg_path)]) == cli.EXIT_CONFIG
    monkeypatch.setenv("NORANK_SEED", "x")
    assert main(["benchmark", "--generator", "blobs", "--methods", "pca",
                 "--out", str(tmp_path / "z")]) == cli.EXIT_CONFIG


def test_stage_error_names_stage(tmp_path):
    ds = LabeledDataset(np.random.default_rng(1).normal(size=(12, 3)), np.repeat([0, 1], 6))
    save_dataset(ds, tmp_path / "flat.dtn", tmp_path / "flat.csv")
    cfg = RunConfig(dataset=DatasetSpec(None, tensor=str(tmp_path / "flat.dtn"),
                                        labels=str(tmp_path / "flat.csv")),
                    methods=("pca", "raw"), output_dir=str(tmp_path / "o"), k_neighbors=50,
                    formats=("csv",))
    with pytest.raises(cli.StageError, match="evaluate:pca"):
        run_benchmark(cfg)


def test_subcommands_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("NORANK_SEED", raising=False)
    d = tmp_path / "data"
    assert main(["generate", "blobs", "--n", "24", "--seed", "3", "--out", str(d)]) == 0
    assert json.loads((d / "manifest.json").read_text())["class_counts"] == [12, 12]
    m = tmp_path / "model"
    assert main(["train", "--tensor", str(d / "tensor.dtn"), "--labels", str(d / "labels.csv"),
                 "--epochs", "2", "--batch-size", "12", "--hidden", "8", "--embed-dim", "3",
                 "--k", "3", "--out", str(m)]) == 0
    assert len(read_csv(m / "train_log.csv")) == 3
    emb = tmp_path / "z.dtn"
    assert main(["embed", "--model", str(m / "encoder"), "--tensor", str(d / "tensor.dtn"),
                 "--out", str(emb)]) == 0
    assert main(["evaluate", "--tensor", str(d / "tensor.dtn"), "--labels", str(d / "labels.csv"),
                 "--embedding", str(emb), "--k", "3", "--out", str(tmp_path / "e.json")]) == 0
    assert read_report(tmp_path / "e.json")[0].report.k_neighbors == 3
    capsys.readouterr()
    assert main(["decompose", "--tensor", str(d / "tensor.dtn"), "--method", "tucker",
                 "--rank", "2", "--out", str(tmp_path / "tk")]) == 0
    assert "explained_variance=" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "e.json"), "--format", "csv",
                 "--out", str(tmp_path / "e.csv")]) == 0
    assert len(read_csv(tmp_path / "e.csv")) == 2
