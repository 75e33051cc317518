import csv
import json

import numpy as np
import pytest

from graphmc import ConvergenceError
from graphmc.cli import main
from graphmc.experiment import (
    ConfigError,
    ExperimentConfig,
    RunFailure,
    cmd_compare,
    cmd_gen,
    cmd_run,
    cmd_sweep,
    derive_seed,
    manifest_path,
    prepare_dataset,
    read_results_csv,
    run_experiment,
    steps_to_within,
)
from graphmc.tracker import OnlineTracker

SMALL_NETFLIX = {"user_communities": 3, "movie_communities": 4, "users": 24, "movies": 40}
SMALL_CONT = {"m": 20, "n": 60, "rank": 2}


def small(**kw):
    base = dict(dataset="netflix", netflix=SMALL_NETFLIX, seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(lambda1=-1.0)
    with pytest.raises(ConfigError):
        ExperimentConfig(tracker="fancy")
    with pytest.raises(ConfigError):
        ExperimentConfig(dataset="traffic-file")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"lambda4": 1.0})
    with pytest.raises(ConfigError):
        ExperimentConfig(netflix={"noise_level": 9})


def test_baseline_forces_graph_term_off_and_online_ignores_lambda3():
    cfg = ExperimentConfig(tracker="baseline-nograph", lambda2=10.0, lambda3=3.0)
    hp = cfg.hyperparameters(4)
    assert hp.lambda2 == 0.0 and hp.lambda3 == 0.0
    assert ExperimentConfig(tracker="robust", lambda3=3.0).hyperparameters(4).lambda3 == 3.0


def test_derived_seeds_differ_per_stream():
    seeds = {derive_seed(0, k) for k in range(4)}
    assert len(seeds) == 4
    assert derive_seed(7, 2) == derive_seed(7, 2)


def test_config_file_round_trip(tmp_path):
    cfg = small(lambda2=10.0, out=str(tmp_path / "r.csv"))
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_file(p) == cfg


def test_gen_manifest_round_trips(tmp_path):
    cfg = ExperimentConfig(out=str(tmp_path / "ds"))
    out = cmd_gen(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    assert ExperimentConfig.from_dict(manifest["config"]) == cfg
    assert manifest["dataset"]["m"] == 100 and manifest["dataset"]["n"] == 200
    for name in ("data.csv", "truth.csv", "data.graph"):
        assert (out / name).exists()


def test_gen_is_byte_identical(tmp_path):
    a = cmd_gen(small(out=str(tmp_path / "a")))
    b = cmd_gen(small(out=str(tmp_path / "b")))
    for name in ("data.csv", "truth.csv", "data.graph"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = cmd_gen(small(seed=6, out=str(tmp_path / "c")))
    assert (a / "data.csv").read_bytes() != (c / "data.csv").read_bytes()


def test_gen_continuous_records_outlier_count(tmp_path):
    cfg = ExperimentConfig(dataset="continuous", continuous={"m": 50, "n": 80, "rank": 3,
                                                             "outlier_density": 0.01},
                           out=str(tmp_path / "c"))
    out = cmd_gen(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["dataset"]["planted_outliers"] == round(0.01 * 50 * 80)
    assert (out / "outliers.csv").exists()


def test_prepared_stream_masks_and_truncation():
    ds = prepare_dataset(small(missing=0.2, steps=25))
    assert ds.shape == (24, 25)
    assert 0.6 < ds.mask.mean() < 0.95
    assert ds.rank == 3


def test_run_writes_one_row_per_step_and_manifest(tmp_path):
    out = tmp_path / "r.csv"
    res = cmd_run(small(out=str(out)))
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["t", "rel_error", "err_db"]
    assert len(rows) == 41
    manifest = json.loads(manifest_path(out).read_text())
    assert manifest["resolved"]["hyperparameters"]["lambda1"] == 0.1
    assert manifest["resolved"]["steps"] == 40
    assert ExperimentConfig.from_dict(manifest["config"]) == small(out=str(out))
    assert manifest["final_err_db"] == pytest.approx(res.final_err_db)


def test_run_is_byte_identical(tmp_path):
    cmd_run(small(out=str(tmp_path / "a.csv")))
    cmd_run(small(out=str(tmp_path / "b.csv")))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_lambda2_triple_gives_comparable_csvs(tmp_path):
    paths = []
    for lam in (0.0, 1.0, 10.0):
        p = tmp_path / f"l{lam:g}.csv"
        cmd_run(small(lambda2=lam, out=str(p)))
        paths.append(p)
    rows = cmd_compare(paths)
    assert len({len(read_results_csv(p)) for p in paths}) == 1
    finals = [r["final_err_db"] for r in rows]
    assert finals == sorted(finals)
    assert rows[0]["delta_db"] == 0.0


def test_robust_with_zero_penalty_matches_online(tmp_path):
    cfg = ExperimentConfig(dataset="continuous", continuous=SMALL_CONT, steps=50, lambda1=1.0, seed=3)
    a = run_experiment(cfg)
    b = run_experiment(cfg.replace(tracker="robust", lambda3=0.0))
    np.testing.assert_allclose(b.rel_error, a.rel_error, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(b.U, a.U, rtol=1e-8, atol=1e-10)


def test_traffic_file_run(tmp_path):
    ds_dir = cmd_gen(ExperimentConfig(dataset="continuous", continuous=SMALL_CONT, out=str(tmp_path / "ds")))
    out = tmp_path / "traffic.csv"
    code = main(["run", "--data", str(ds_dir / "data.csv"), "--lambda1", "0.1", "--rank", "2",
                 "--out", str(out)])
    assert code == 0
    manifest = json.loads(manifest_path(out).read_text())
    assert manifest["config"]["dataset"] == "traffic-file"
    assert manifest["resolved"]["hyperparameters"]["lambda1"] == 0.1
    assert len(read_results_csv(out)) == 60


def test_traffic_file_missing_readings_are_not_scored(tmp_path):
    data = tmp_path / "loads.csv"
    data.write_text("links 2\n0, 1.0, 2.0\n1, 2.0, \n2, 3.0, 6.0\n3, 1.0, 2.0\n")
    (tmp_path / "loads.graph").write_text("nodes 2\n0 1 1.0\n")
    res = run_experiment(ExperimentConfig(dataset="traffic-file", data_path=str(data), rank=1, missing=0.0))
    assert np.all(np.isfinite(res.rel_error))


def test_compare_identical_inputs_have_zero_delta(tmp_path):
    p = tmp_path / "a.csv"
    cmd_run(small(out=str(p)))
    q = tmp_path / "b.csv"
    q.write_bytes(p.read_bytes())
    rows = cmd_compare([p, q])
    assert [r["delta_db"] for r in rows] == [0.0, 0.0]
    assert rows[0]["final_err_db"] == rows[1]["final_err_db"]


def test_compare_rejects_mismatched_lengths(tmp_path):
    cmd_run(small(out=str(tmp_path / "a.csv")))
    cmd_run(small(steps=10, out=str(tmp_path / "b.csv")))
    with pytest.raises(ConfigError):
        cmd_compare([tmp_path / "a.csv", tmp_path / "b.csv"])
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 2


def test_steps_to_within():
    assert steps_to_within(np.array([0.0, -5.0, -9.5, -10.0])) == 3
    assert steps_to_within(np.array([-1.0, -1.0])) == 1


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert main(["run", "--lambda1", "-1", "--out", str(tmp_path / "x.csv")]) == 2
    assert main(["run", "--data", str(tmp_path / "missing.csv"), "--rank", "1",
                 "--out", str(tmp_path / "x.csv")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2

    def boom(self, sample):
        raise ConvergenceError("forced", achieved=1.0, iterations=1)

    monkeypatch.setattr(OnlineTracker, "step", boom)
    with pytest.raises(RunFailure) as info:
        run_experiment(small(steps=3))
    assert info.value.step == 1
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"netflix": SMALL_NETFLIX}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "y.csv")]) == 3


def test_cli_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"netflix": SMALL_NETFLIX, "lambda2": 10.0, "seed": 1}))
    out = tmp_path / "r.csv"
    assert main(["run", "--config", str(cfg), "--lambda2", "0", "--solver", "cg", "--diagnostics",
                 "--diagnostics-every", "10", "--steps", "20", "--out", str(out)]) == 0
    manifest = json.loads(manifest_path(out).read_text())
    assert manifest["config"]["lambda2"] == 0.0
    assert manifest["config"]["seed"] == 1
    assert manifest["resolved"]["solver"]["method"] == "conjugate_gradient"
    diag = list(csv.DictReader((tmp_path / "r.diagnostics.csv").open()))
    assert [int(r["t"]) for r in diag] == [10, 20]
    for r in diag:
        assert float(r["c_hat"]) >= float(r["c_true"]) - 1e-8 * (1 + abs(float(r["c_true"])))
        assert float(r["stat_residual"]) <= 1e-6


def test_cli_gen_and_compare_output(tmp_path, capsys):
    assert main(["gen", "--dataset", "continuous", "--set", "continuous=" + json.dumps(SMALL_CONT),
                 "--out", str(tmp_path / "ds")]) == 0
    assert (tmp_path / "ds" / "outliers.csv").exists()
    for name, lam in (("a", "0"), ("b", "1")):
        assert main(["run", "--set", "netflix=" + json.dumps(SMALL_NETFLIX), "--lambda2", lam,
                     "--out", str(tmp_path / f"{name}.csv")]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                 "--out", str(tmp_path / "summary.csv")]) == 0
    text = capsys.readouterr().out
    assert "final_err_db" in text and "a.csv" in text
    rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert len(rows) == 2


def test_sweep_selects_on_holdout_seed(tmp_path):
    cfg = small(steps=20)
    rows, best = cmd_sweep(cfg, [0.1, 1.0], [0.0, 1.0], [0.0])
    assert len(rows) == 4
    winner = min(rows, key=lambda r: r["final_err_db"])
    assert (best.lambda1, best.lambda2) == (winner["lambda1"], winner["lambda2"])
    assert best.seed == cfg.seed
    direct = run_experiment(cfg.replace(seed=cfg.seed + 1, lambda1=0.1, lambda2=0.0)).final_err_db
    assert rows[0]["final_err_db"] == direct


def test_sweep_cli_parallel(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--set", "netflix=" + json.dumps(SMALL_NETFLIX), "--steps", "15",
                 "--grid-lambda2", "0,1", "--jobs", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2
    best = json.loads((tmp_path / "sweep.best.json").read_text())
    assert best["lambda2"] in (0.0, 1.0)
