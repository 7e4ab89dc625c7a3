import json
from pathlib import Path

import numpy as np
import pytest

from sfml.cli import KEYS, build_parser, main, parse_signal
from sfml.dataset import load
from sfml.errors import ConfigurationError
from sfml.expr import ExpressionError, parse_expression
from sfml.flow import FlowModel, save_flow
from sfml.predict import TrajectoryEnsemble
from sfml.systems import builtin_system
from sfml.training import resume

A1_THRESHOLDS = {"mean": 0.06, "std": 0.04, "w1": 0.05}
A1_SCENARIO = {"x0": [2.0], "u": "0.5*sin(6*t)", "T": 5.0, "n_ens": 4000,
               "snapshot_times": [2.0, 4.0]}


def run(tmp_path, command, cfg, *extra, name=None):
    path = tmp_path / (name or f"{command}.json")
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *extra])


@pytest.fixture
def ou_data(tmp_path):
    assert run(tmp_path, "gen-data", {"seed": 1, "system": "ou_drift", "M": 400}) == 0
    return tmp_path / "dataset.sfml"


def test_gen_data_smoke(tmp_path, capsys):
    assert run(tmp_path, "gen-data", {"seed": 0, "system": "ou_drift", "M": 10,
                                      "dataset": "d/small.sfml"}) == 0
    ts = load(tmp_path / "d" / "small.sfml")
    assert ts.M == 10 and ts.name == "ou_drift"
    assert "M=10 d=1 n_gamma=3 dt=0.01" in capsys.readouterr().out


def test_gen_data_box_overrides(tmp_path):
    cfg = {"seed": 0, "system": "ou_drift", "M": 20, "x_box": [[0.5], [0.5]],
           "gamma_box": [[1, 0, 0], [1, 0, 0]]}
    assert run(tmp_path, "gen-data", cfg) == 0
    ts = load(tmp_path / "dataset.sfml")
    assert np.all(ts.x0 == 0.5) and np.all(ts.gamma == [1, 0, 0])


def test_gen_data_missing_system(tmp_path, capsys):
    assert run(tmp_path, "gen-data", {"seed": 0, "M": 10}) == 2
    assert "system" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [{"system": "ou_drift", "M": 10},
                                 {"seed": 0, "system": "nope", "M": 10},
                                 {"seed": 0, "system": "ou_drift", "M": 0},
                                 {"seed": 0, "system": "ou_drift", "M": 5, "x_box": [1]}])
def test_gen_data_config_errors(tmp_path, cfg):
    assert run(tmp_path, "gen-data", cfg) == 2


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "absent.json")]) == 2


def test_seed_flag_overrides_config(tmp_path):
    assert run(tmp_path, "gen-data", {"system": "ou_drift", "M": 5}, "--seed", "3") == 0
    assert load(tmp_path / "dataset.sfml").seed == 3


def test_out_directory(tmp_path):
    out = tmp_path / "elsewhere"
    assert run(tmp_path, "gen-data", {"seed": 0, "system": "ou_drift", "M": 5},
               "--out", str(out)) == 0
    assert (out / "dataset.sfml").exists()


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SFML_THREADS", "zero")
    assert run(tmp_path, "gen-data", {"seed": 0, "system": "ou_drift", "M": 5}) == 2
    monkeypatch.setenv("SFML_THREADS", "2")
    assert run(tmp_path, "gen-data", {"seed": 0, "system": "ou_drift", "M": 5}) == 0


def test_train_zero_epochs(tmp_path, ou_data):
    cfg = {"seed": 0, "dataset": "dataset.sfml", "train": {"epochs": 0}}
    assert run(tmp_path, "train", cfg) == 0
    flow, state, _ = resume(tmp_path / "model.sfmc")
    assert state.epoch == 0
    np.testing.assert_array_equal(flow.weights_vector()[-2:], 0.0)
    assert (tmp_path / "history.jsonl").read_text() == ""


def test_train_writes_history(tmp_path, ou_data):
    cfg = {"seed": 0, "dataset": "dataset.sfml", "model": {"n_layers": 2, "hidden": [8, 8]},
           "train": {"epochs": 3, "batch_size": 100}}
    assert run(tmp_path, "train", cfg) == 0
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [0, 1, 2]
    flow, _, _ = resume(tmp_path / "model.sfmc")
    assert flow.n_layers == 2 and flow.hidden_sizes == (8, 8)


def test_train_unknown_key(tmp_path, ou_data):
    assert run(tmp_path, "train", {"seed": 0, "dataset": "dataset.sfml",
                                   "train": {"epoch": 3}}) == 2
    assert run(tmp_path, "train", {"seed": 0, "dataset": "missing.sfml"}) == 2


def test_train_resume_reproduces_straight_run(tmp_path, ou_data):
    base = {"seed": 0, "dataset": "dataset.sfml", "model": {"n_layers": 2},
            "train": {"epochs": 4, "batch_size": 100}}
    assert run(tmp_path, "train", dict(base, checkpoint="straight.sfmc")) == 0

    half = dict(base, checkpoint="resumed.sfmc", train={"epochs": 2, "batch_size": 100})
    assert run(tmp_path, "train", half, name="half.json") == 0
    assert run(tmp_path, "train", dict(base, checkpoint="resumed.sfmc"), "--resume",
               name="rest.json") == 0
    assert (tmp_path / "straight.sfmc").read_bytes() == (tmp_path / "resumed.sfmc").read_bytes()


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_train_divergence_exit_code(tmp_path):
    ts = load_or_make_nan_set(tmp_path)
    assert run(tmp_path, "train", {"seed": 0, "dataset": ts, "train": {"epochs": 1}}) == 4


def load_or_make_nan_set(tmp_path):
    from sfml.dataset import TrainingSet, save
    from sfml.excitation import BasisSpec
    x1 = np.ones((10, 1))
    x1[3] = np.inf
    ts = TrainingSet(np.zeros((10, 1)), np.arange(10.0)[:, None], x1, 1,
                     BasisSpec.piecewise_constant(0.1))
    save(ts, tmp_path / "nan.sfml")
    return "nan.sfml"


def _identity_checkpoint(tmp_path):
    system = builtin_system("ou_drift")
    save_flow(FlowModel(1, 3, basis=system.basis, x_box=system.x_box), tmp_path / "id.sfmc")
    return "id.sfmc"


def test_predict_smoke(tmp_path):
    cfg = {"seed": 0, "checkpoint": _identity_checkpoint(tmp_path),
           "scenario": {"x0": [0.5], "u": "0.5*sin(6*t)", "T": 0.01, "n_ens": 1}}
    assert run(tmp_path, "predict", cfg) == 0
    ens = TrajectoryEnsemble.load(tmp_path / "ensemble.sfme")
    assert ens.states.shape == (1, 2, 1) and ens.states[0, 0, 0] == 0.5
    # a single member has no spread, so no moment table is written
    assert not (tmp_path / "plots" / "model_moments.txt").exists()


def test_predict_sampled_signal_file(tmp_path):
    t = np.linspace(0, 0.2, 21)
    np.savetxt(tmp_path / "u.txt", np.column_stack([t, np.cos(t)]))
    cfg = {"seed": 0, "checkpoint": _identity_checkpoint(tmp_path),
           "scenario": {"x0": [0.0], "u": {"file": "u.txt"}, "T": 0.1, "n_ens": 200,
                        "snapshot_times": [0.05]}}
    assert run(tmp_path, "predict", cfg) == 0
    assert TrajectoryEnsemble.load(tmp_path / "ensemble.sfme").n_steps == 10
    hist = list((tmp_path / "plots").glob("*hist*"))
    assert len(hist) == 1
    table = np.loadtxt(tmp_path / "plots" / "model_moments.txt")
    assert table.shape == (11, 3)


@pytest.mark.parametrize("u", ["0.5*sin(6*t", "__import__('os')", "t.real", "q*t", "sin(t, t)"])
def test_predict_bad_expression(tmp_path, u, capsys):
    cfg = {"seed": 0, "checkpoint": _identity_checkpoint(tmp_path),
           "scenario": {"x0": [0.5], "u": u, "T": 0.01, "n_ens": 1}}
    assert run(tmp_path, "predict", cfg) == 2
    assert "configuration error" in capsys.readouterr().err


def test_predict_scenario_errors(tmp_path):
    ck = _identity_checkpoint(tmp_path)
    for sc in ({"x0": [0.5, 1.0], "u": "0", "T": 1, "n_ens": 1},
               {"x0": [0.5], "u": "0", "T": 1},
               {"x0": [0.5], "u": "0", "T": -1, "n_ens": 1},
               {"x0": [0.5], "u": ["0", "1"], "T": 1, "n_ens": 1},
               {"x0": [0.5], "u": {"file": "nope.txt"}, "T": 1, "n_ens": 1}):
        assert run(tmp_path, "predict", {"seed": 0, "checkpoint": ck, "scenario": sc}) == 2


def test_validate_oracle_passes(tmp_path):
    cfg = {"seed": 0, "checkpoint": "oracle", "system": "ou_drift",
           "scenario": {"x0": [2.0], "u": "0.5*sin(6*t)", "T": 1.0, "n_ens": 2000,
                        "snapshot_times": [0.5, 1.0]},
           "thresholds": A1_THRESHOLDS}
    assert run(tmp_path, "validate", cfg) == 0
    recs = [json.loads(line) for line in (tmp_path / "report.jsonl").read_text().splitlines()]
    assert sum(r["metric"] == "w1" for r in recs) == 2
    assert (tmp_path / "plots" / "validation_moments.txt").exists()


def test_validate_identity_flow_fails_thresholds(tmp_path, capsys):
    cfg = {"seed": 0, "checkpoint": _identity_checkpoint(tmp_path), "system": "ou_drift",
           "scenario": dict(A1_SCENARIO, n_ens=500), "thresholds": A1_THRESHOLDS}
    assert run(tmp_path, "validate", cfg) == 6
    assert "FAIL" in capsys.readouterr().out


def test_validate_trained_model_passes(tmp_path, ou_model):
    save_flow(ou_model, tmp_path / "ou.sfmc")
    cfg = {"seed": 0, "checkpoint": "ou.sfmc", "system": "ou_drift",
           "scenario": A1_SCENARIO, "thresholds": A1_THRESHOLDS}
    assert run(tmp_path, "validate", cfg) == 0


def test_reruns_are_byte_identical(tmp_path):
    outputs = []
    for rep in range(2):
        d = tmp_path / f"r{rep}"
        d.mkdir()
        assert run(d, "gen-data", {"seed": 5, "system": "ou_drift", "M": 300}) == 0
        assert run(d, "train", {"seed": 5, "dataset": "dataset.sfml", "model": {"n_layers": 2},
                                "train": {"epochs": 2, "batch_size": 100}}) == 0
        assert run(d, "predict", {"seed": 5, "checkpoint": "model.sfmc",
                                  "scenario": {"x0": [1.0], "u": "cos(t)", "T": 0.2,
                                               "n_ens": 50}}) == 0
        outputs.append([(d / f).read_bytes() for f in
                        ("dataset.sfml", "model.sfmc", "ensemble.sfme")])
    assert outputs[0] == outputs[1]


@pytest.mark.parametrize("command", list(KEYS))
def test_help_lists_config_keys(command, capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args([command, "--help"])
    text = capsys.readouterr().out
    keys = {"gen-data": ["seed", "system", "M", "x_box", "gamma_box", "n_sub", "dataset"],
            "train": ["seed", "dataset", "checkpoint", "history", "model.n_layers",
                      "model.hidden", "model.s_max", "epochs", "batch_size", "base_lr",
                      "max_lr", "gamma", "step_size", "cycle_epochs", "weight_decay",
                      "checkpoint_every", "precision"],
            "predict": ["seed", "checkpoint", "scenario.x0", "scenario.u", "scenario.T",
                        "scenario.n_ens", "scenario.snapshot_times", "ensemble", "plot_dir"],
            "validate": ["seed", "checkpoint", "system", "n_sub", "scenario.x0", "thresholds",
                         "report", "plot_dir"]}[command]
    for key in keys:
        assert key in text, key
    for flag in ("--config", "--seed", "--threads", "--out"):
        assert flag in text


def test_expression_values():
    f = parse_expression("0.5*sin(6*t) + exp(-t)/2 - t**2 + pi")
    t = np.array([0.0, 0.3])
    np.testing.assert_allclose(f(t), 0.5 * np.sin(6 * t) + np.exp(-t) / 2 - t ** 2 + np.pi)
    assert parse_expression("2")(np.zeros(3)).shape == (3,)


@pytest.mark.parametrize("src", ["", "x", "t if t else 1", "[t]", "sin", "open('f')",
                                 "lambda: 1", "t // 2"])
def test_expression_rejects(src):
    with pytest.raises(ExpressionError):
        parse_expression(src)
    assert issubclass(ExpressionError, ConfigurationError)


def test_parse_signal_multichannel(tmp_path):
    u = parse_signal(["1", "2*t"], tmp_path, 2)
    np.testing.assert_allclose(u(np.array([0.5])), [[1.0, 1.0]])


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_shipped_smoke_config_runs_all_commands(tmp_path):
    cfg = str(CONFIG_DIR / "smoke.json")
    for command in ("gen-data", "train", "predict"):
        assert main([command, "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "out/smoke/ensemble.sfme").exists()


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.json")))
def test_shipped_configs_are_consistent(name):
    cfg = json.loads((CONFIG_DIR / name).read_text())
    system = builtin_system(cfg["system"])
    sc = cfg["scenario"]
    assert len(sc["x0"]) == system.d
    parse_signal(sc["u"], CONFIG_DIR, system.n_u)
    steps = sc["T"] / system.dt
    assert abs(steps - round(steps)) < 1e-9
    assert all(0 < t <= sc["T"] for t in sc["snapshot_times"])
