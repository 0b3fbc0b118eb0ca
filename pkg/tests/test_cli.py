import builtins
import json

import numpy as np
import pytest

from arft import cli
from arft import data as D
from arft import experiment as X
from arft.errors import ConfigError, StageError

TINY = ["--epochs", "1", "--d-token", "8", "--n-heads", "2", "--n-layers", "1", "--seeds", "0,1"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert cli.main(["gen-synth", "--n-source", "150", "--n-target", "60", "--p", "5",
                     "--positive-rate", "0.15", "--seed", "4", "--out", str(out)]) == 0
    return out


def _run(synth, out, *extra, truth=True):
    args = ["run", "--source", str(synth / "source.csv"), "--target", str(synth / "target.csv"),
            "--out", str(out), *TINY, *extra]
    if truth:
        args += ["--truth", str(synth / "target_truth.csv")]
    return cli.main(args)


def test_gen_synth_outputs(synth, tmp_path):
    src = D.load_csv(synth / "source.csv", label_column="label")
    tgt = D.load_csv(synth / "target.csv")
    truth = X.read_labels(synth / "target_truth.csv", "label")
    assert src.n == 150 and tgt.n == 60 and tgt.labels is None
    assert truth.shape == (60,)
    meta = json.loads((synth / "synth.json").read_text())
    assert meta["target_positives"] == int(truth.sum())
    cli.main(["gen-synth", "--n-source", "150", "--n-target", "60", "--p", "5",
              "--positive-rate", "0.15", "--seed", "4", "--out", str(tmp_path)])
    for name in ("source.csv", "target.csv", "target_truth.csv"):
        assert (tmp_path / name).read_bytes() == (synth / name).read_bytes()


def test_analyze_writes_report(synth, tmp_path, capsys):
    assert cli.main(["analyze", str(synth / "source.csv"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("p=5, pairs=10, significant=")
    assert (tmp_path / "correlations.csv").read_text().count("\n") == 11


def test_run_without_truth_skips_evaluation(synth, tmp_path):
    assert _run(synth, tmp_path, truth=False) == 0
    (gdir,) = [p.parent for p in tmp_path.glob("*/arft/manifest.json")]
    assert sorted(p.name for p in gdir.glob("predictions_seed*.csv")) == ["predictions_seed0.csv",
                                                                          "predictions_seed1.csv"]
    assert not (gdir / "metrics.csv").exists()
    man = json.loads((gdir / "manifest.json").read_text())
    assert man["aggregate"] is None and man["reports"] == []


def test_training_never_opens_truth(synth, tmp_path, monkeypatch):
    truth = str(synth / "target_truth.csv")
    real_open = builtins.open

    def guarded(path, *a, **k):
        assert str(path) != truth, "truth file opened during training"
        return real_open(path, *a, **k)

    monkeypatch.setattr(builtins, "open", guarded)
    cfg = X.resolve_config({"groups": [{"sources": [str(synth / "source.csv")],
                                        "target": str(synth / "target.csv"), "truth": truth}],
                            "train": {"epochs": 1}, "model": {"d_token": 8, "n_heads": 2, "n_layers": 1}})
    X.run_cell(cfg, cfg["groups"][0], "arft", 0, str(tmp_path))


def test_evaluate_step_matches_run_with_truth(synth, tmp_path):
    assert _run(synth, tmp_path / "a") == 0
    assert _run(synth, tmp_path / "b", truth=False) == 0
    (adir,) = [p.parent for p in (tmp_path / "a").glob("*/arft/manifest.json")]
    (bdir,) = [p.parent for p in (tmp_path / "b").glob("*/arft/manifest.json")]
    assert cli.main(["evaluate", str(bdir), "--truth", str(synth / "target_truth.csv")]) == 0
    assert (adir / "metrics.csv").read_bytes() == (bdir / "metrics.csv").read_bytes()


def test_manifest_aggregate_and_replay(synth, tmp_path):
    assert _run(synth, tmp_path / "first") == 0
    (mpath,) = list((tmp_path / "first").glob("*/arft/manifest.json"))
    man = json.loads(mpath.read_text())
    for key in ("pd", "pf", "bal"):
        vals = [r[key] for r in man["reports"]]
        assert abs(man["aggregate"][f"{key}_mean"] - np.mean(vals)) <= 1e-12
    assert man["seeds"] == [0, 1] and man["version"]
    # every knob is spelled out in the snapshot
    assert set(man["config"]["train"]) == set(X.DEFAULT_CONFIG["train"])
    assert cli.main(["run", "--config", str(mpath), "--out", str(tmp_path / "replay")]) == 0
    (again,) = list((tmp_path / "replay").glob("*/arft/metrics.csv"))
    assert again.read_bytes() == (mpath.parent / "metrics.csv").read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"train": {"epochs": 7, "lr0": 0.5}, "loss": {"gamma": 3.0}}))
    args = cli.build_parser().parse_args(["run", "--config", str(cfg_path), "--epochs", "2",
                                          "--source", "a.csv", "--target", "b.csv", "--out", "x"])
    cfg = cli.config_from_args(args)
    assert cfg["train"]["epochs"] == 2
    assert cfg["train"]["lr0"] == 0.5
    assert cfg["loss"]["gamma"] == 3.0
    assert cfg["model"]["n_heads"] == 8


def test_config_errors(tmp_path, capsys):
    with pytest.raises(ConfigError, match="unknown keys"):
        X.resolve_config({"train": {"epoch": 3}})
    with pytest.raises(ConfigError, match="also a source"):
        X.resolve_config({"groups": [{"sources": ["a.csv"], "target": "a.csv"}]})
    with pytest.raises(ConfigError, match="variant"):
        X.resolve_config({"experiment": {"variant": "fancy"}})
    rc = cli.main(["run", "--source", "s.csv", "--target", "t.csv", "--n-heads", "5", "--out", str(tmp_path)])
    assert rc == 2 and "does not divide" in capsys.readouterr().err


def test_stage_errors_name_the_stage(synth, tmp_path):
    cfg = X.resolve_config({"groups": [{"sources": [str(synth / "target.csv")],
                                        "target": str(synth / "source.csv")}]})
    with pytest.raises(StageError, match="stage 'load' failed"):
        X.run(cfg, str(tmp_path))


def test_multi_source_group(synth, tmp_path):
    rng = np.random.default_rng(0)
    extra = D.Dataset("extra", D.default_metric_names(5), rng.normal(size=(40, 5)),
                      (rng.random(40) < 0.3).astype(int))
    D.write_csv(extra, tmp_path / "extra.csv")
    cfg = X.resolve_config({"groups": [{"sources": [str(synth / "source.csv"), str(tmp_path / "extra.csv")],
                                        "target": str(synth / "target.csv")}],
                            "train": {"epochs": 1}, "experiment": {"seeds": [0]},
                            "model": {"d_token": 8, "n_heads": 2, "n_layers": 1}})
    (man,) = X.run(cfg, str(tmp_path / "out"))
    assert man.group == "SE=>T"
    src, _ = X.prepare_group(cfg, cfg["groups"][0])
    assert src.n == 190 and src.project_id == "source+extra"


def test_workers_do_not_change_results(synth, tmp_path):
    assert _run(synth, tmp_path / "w1", "--workers", "1") == 0
    assert _run(synth, tmp_path / "w2", "--workers", "2") == 0
    (a,) = list((tmp_path / "w1").glob("*/arft/metrics.csv"))
    (b,) = list((tmp_path / "w2").glob("*/arft/metrics.csv"))
    assert a.read_bytes() == b.read_bytes()


def test_ablate_reports_formula_and_shared_seeds(synth, tmp_path, capsys):
    args = ["ablate", "--source", str(synth / "source.csv"), "--target", str(synth / "target.csv"),
            "--truth", str(synth / "target_truth.csv"), "--out", str(tmp_path), *TINY]
    assert cli.main(args) == 0
    text = (tmp_path / "ablation.txt").read_text()
    assert text.splitlines()[0] == X.IMPV_FORMULA
    mans = [json.loads(p.read_text()) for p in tmp_path.glob("*/*/manifest.json")]
    assert sorted(m["variant"] for m in mans) == sorted(X.VARIANTS)
    assert all(m["seeds"] == [0, 1] for m in mans)
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    base = next(r for r in rows if ",baseline," in r)
    assert base.endswith(",0.0")


def test_improvement_formula():
    assert X.improvement(0.531, 0.812) == pytest.approx(0.52919, abs=1e-5)
    assert X.improvement(0.4, 0.4) == 0.0


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ConfigError):
        X.sweep_values(X.resolve_config(), "layers")
