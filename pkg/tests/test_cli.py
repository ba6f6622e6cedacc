import json
import logging

import numpy as np
import pytest

from unlearn_recon import experiment
from unlearn_recon.cli import main
from unlearn_recon.datasets import write_idx
from unlearn_recon.evaluation import read_pnm, read_records
from unlearn_recon.experiment import ConfigError, load_config, parse_config, run_experiment
from unlearn_recon.models import TrainReport

RIDGE = {
    "dataset": {"source": "synthetic", "n": 200, "d": 6, "task": "regression", "seed": 1},
    "loss": {"kind": "ridge", "lambda": 0.1},
    "deletions": {"first": 20},
    "attack": {"assume_known_lambda": True},
    "output_dir": "out",
    "seed": 3,
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", "--config", str(_write(tmp_path, RIDGE))]) == 0
    assert not list(tmp_path.glob("out"))


def test_validate_missing_dataset_path(tmp_path, capsys):
    cfg = {"dataset": {"source": "csv", "target_column": "y"}, "loss": {"kind": "ridge"}}
    assert main(["validate", "--config", str(_write(tmp_path, cfg))]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["config error: dataset.path: required for csv source"]


def test_validate_nonexistent_file_path(tmp_path):
    cfg = {"dataset": {"source": "csv", "path": "nope.csv", "target_column": "y"}, "loss": {"kind": "ridge"}}
    with pytest.raises(ConfigError) as info:
        load_config(_write(tmp_path, cfg))
    assert info.value.diagnostics == ["dataset.path: file not found: nope.csv"]


def test_validate_rejects_small_rff(tmp_path):
    cfg = dict(RIDGE, embedding={"kind": "rff", "output_dim": 1})
    with pytest.raises(ConfigError) as info:
        load_config(_write(tmp_path, cfg))
    assert any(d.startswith("embedding.output_dim") for d in info.value.diagnostics)


def test_validate_dimension_mismatch(tmp_path):
    cfg = dict(RIDGE, embedding={"kind": "identity", "input_dim": 5})
    with pytest.raises(ConfigError) as info:
        load_config(_write(tmp_path, cfg))
    assert info.value.diagnostics == ["embedding.input_dim: 5 does not match dataset dimension 6"]


def test_validate_collects_every_problem():
    with pytest.raises(ConfigError) as info:
        parse_config({"dataset": {"source": "synthetic", "n": 1, "d": 2}, "loss": {"kind": "logistic"},
                      "methods": ["hrec", "oracle"], "jobs": 0, "bogus": 1})
    fields = {d.split(":")[0] for d in info.value.diagnostics}
    assert {"bogus", "dataset.n", "methods", "jobs"} <= fields


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["validate", "--config", str(p)]) == 2


def test_run_ridge_oracle_is_exact(tmp_path, capsys):
    assert main(["run", "--config", str(_write(tmp_path, RIDGE))]) == 0
    recs = read_records(tmp_path / "out" / "records.jsonl")
    hrec = [r for r in recs if r.method == "hrec"]
    assert len(hrec) == 20 and sorted(r.index for r in hrec) == list(range(20))
    assert all(r.cosine >= 1 - 1e-6 for r in hrec)
    summary = json.loads(capsys.readouterr().out)
    assert summary["summary"]["hrec"]["n"] == 20
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config_digest"] == summary["config_digest"]
    assert all(r.config_digest == manifest["config_digest"] for r in recs)


def test_methods_subset_gives_one_curve(tmp_path):
    cfg = dict(RIDGE, methods=["avg"])
    cfg = load_config(_write(tmp_path, cfg))
    result = run_experiment(cfg)
    assert list(result.curves) == ["avg"]
    assert sorted(p.name for p in cfg.output_dir.glob("cdf_*.csv")) == ["cdf_avg.csv"]


def test_rerun_and_parallel_are_byte_identical(tmp_path):
    p = _write(tmp_path, dict(RIDGE, attack={}, deletions="all"))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "b")]) == 0
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "c"), "--jobs", "4"]) == 0
    ref = (tmp_path / "a" / "records.jsonl").read_bytes()
    assert (tmp_path / "b" / "records.jsonl").read_bytes() == ref
    for name in ("records.jsonl", "cdf.svg", "cdf_hrec.csv"):
        assert (tmp_path / "c" / name).read_bytes() == (tmp_path / "a" / name).read_bytes()


def test_seed_override_changes_digest(tmp_path):
    p = _write(tmp_path, RIDGE)
    assert load_config(p).digest != load_config(p, seed=4).digest
    assert load_config(p).digest == load_config(p).digest
    assert load_config(p).digest == load_config(p, jobs=4, out=str(tmp_path / "x")).digest


def test_output_dir_precedence(tmp_path, monkeypatch):
    p = _write(tmp_path, RIDGE)
    assert load_config(p).output_dir == tmp_path / "out"
    monkeypatch.setenv(experiment.OUTPUT_ENV, str(tmp_path / "env"))
    assert load_config(p).output_dir == tmp_path / "env"
    assert load_config(p, out=str(tmp_path / "flag")).output_dir == tmp_path / "flag"


def test_stage_failure_exit_code(tmp_path, capsys):
    cfg = dict(RIDGE, deletions={"indices": [500]})
    assert main(["run", "--config", str(_write(tmp_path, cfg))]) == 1
    assert "[deletions]" in capsys.readouterr().err


def test_nonconverged_retrain_is_flagged(tmp_path, monkeypatch):
    real = experiment.retrain_without

    def flaky(Z, y, index, loss, **kw):
        params, rep = real(Z, y, index, loss, **kw)
        if index == 2:
            rep = TrainReport(rep.objective, 1.0, 500, "max_iter")
        return params, rep

    monkeypatch.setattr(experiment, "retrain_without", flaky)
    cfg = dict(RIDGE, dataset=dict(RIDGE["dataset"], task="binary"), loss={"kind": "logistic", "lambda": 0.01},
               deletions={"first": 4})
    result = run_experiment(load_config(_write(tmp_path, cfg)))
    flagged = {r.index for r in result.records if "retrain_max_iter" in r.flags}
    assert flagged == {2}
    assert len(result.records) == 12


def test_grid_lambda_and_rff(tmp_path):
    cfg = {
        "dataset": {"source": "synthetic", "n": 240, "d": 3, "task": "multiclass", "n_classes": 3, "seed": 2,
                    "noise_std": 0.3},
        "embedding": {"kind": "rff", "output_dim": 33, "bandwidth": "median", "seed": 1},
        "loss": {"kind": "softmax_ce", "lambda": "grid", "grid": [0.1, 0.01]},
        "deletions": {"sample": 5, "seed": 0},
        "output_dir": "out",
    }
    result = run_experiment(load_config(_write(tmp_path, cfg)))
    assert result.prepared.loss.lam in (0.1, 0.01)
    hrec = [r for r in result.records if r.method == "hrec"]
    assert len(hrec) == 5 and all(r.predicted_label is not None for r in hrec)
    assert all(r.inversion_residual is not None for r in hrec)


def _tiny_images(tmp_path, labels):
    rng = np.random.default_rng(0)
    n = len(labels)
    imgs = np.clip(rng.normal(128, 40, size=(n, 4, 4)) + 60 * np.asarray(labels)[:, None, None] % 255, 0, 255)
    write_idx(imgs.astype(np.uint8), labels, tmp_path / "img.gz", tmp_path / "lab.gz")


def _image_cfg(**over):
    cfg = {
        "dataset": {"source": "idx", "images": "img.gz", "labels": "lab.gz"},
        "loss": {"kind": "softmax_ce", "lambda": 0.01},
        "deletions": "all",
        "output_dir": "out",
    }
    cfg.update(over)
    return cfg


def test_montage_layout(tmp_path):
    _tiny_images(tmp_path, np.arange(200) % 10)
    p = _write(tmp_path, _image_cfg())
    assert main(["run", "--config", str(p)]) == 0
    assert main(["montage", "--config", str(p)]) == 0
    img = read_pnm(tmp_path / "out" / "montage.pgm")
    pad = 2
    assert img.shape == (3 * (4 + pad) + pad, 10 * (4 + pad) + pad)
    assert (tmp_path / "out" / "montage.pgm").read_bytes().startswith(b"P5\n# config ")


def test_montage_original_row_matches_raw_bytes(tmp_path):
    _tiny_images(tmp_path, np.arange(40) % 2)
    p = _write(tmp_path, _image_cfg(methods=["hrec"]))
    cfg = load_config(p)
    run_experiment(cfg)
    out = experiment.montage(cfg)
    img = read_pnm(out)
    prep = experiment.load_dataset(cfg)
    raw = np.rint(prep.scaling.inverse(prep.features)).astype(np.uint8)
    tile = img[2:6, 2:6].ravel()
    assert any(np.array_equal(tile, r) for r in raw)
    assert img.shape[0] == 2 * 6 + 2  # original + hrec rows only


def test_montage_skips_absent_label(tmp_path, caplog):
    labels = np.arange(60) % 3
    _tiny_images(tmp_path, labels)
    cfg = load_config(_write(tmp_path, _image_cfg()))
    prep_priv, _ = experiment.ds.split_private_public(experiment.load_dataset(cfg), cfg.split)
    keep = [i for i in range(prep_priv.n) if prep_priv.targets[i] != 1]
    cfg = load_config(_write(tmp_path, _image_cfg(deletions={"indices": keep})))
    run_experiment(cfg)
    with caplog.at_level(logging.WARNING):
        img = read_pnm(experiment.montage(cfg))
    assert "label 1" in caplog.text
    assert img.shape[1] == 2 * 6 + 2


def test_montage_rejects_non_image(tmp_path, capsys):
    p = _write(tmp_path, RIDGE)
    assert main(["run", "--config", str(p)]) == 0
    assert main(["montage", "--config", str(p)]) == 1
    assert "not an image dataset" in capsys.readouterr().err


def test_csv_source_end_to_end(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(80, 3))
    y = X @ [1.0, -2.0, 0.5]
    rows = ["a,b,c,y"] + [",".join(map(repr, map(float, [*x, t]))) for x, t in zip(X, y)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    cfg = {"dataset": {"source": "csv", "path": "d.csv", "target_column": "y"},
           "loss": {"kind": "ridge", "lambda": 0.5}, "attack": {"assume_known_lambda": True},
           "deletions": {"first": 5}, "output_dir": "out"}
    result = run_experiment(load_config(_write(tmp_path, cfg)))
    assert all(r.cosine >= 1 - 1e-9 for r in result.records if r.method == "hrec")
