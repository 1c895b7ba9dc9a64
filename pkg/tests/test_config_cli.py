import json

import numpy as np
import pytest

from ddmpc.cli import main, trace_csv
from ddmpc.config import KINDS, bundled_configs, load_config, parse_config
from ddmpc.errors import ConfigError
from ddmpc.modelio import dumps, load_model, model_from_dict, model_to_dict
from ddmpc.mpc import ClosedLoopTrace
from ddmpc.neural import RnnModel, SsnnModel
from ddmpc.pem import PemParams
from ddmpc.plants import LinearModel

SPC = """
[experiment]
kind = spc
system = lti4
[data]
length = 500
use = 500
[identification]
N = 30
M = 20
H = 400
[controller]
N = 30
Q = 5
R = 0.1
replay = 20
"""


def _err(text) -> ConfigError:
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    return e.value


def test_every_kind_has_a_bundled_config():
    names = bundled_configs()
    for kind in KINDS:
        cfg = load_config(names[f"{kind}_paper.cfg"])
        assert cfg.kind == kind


def test_valid_spc_config():
    cfg = parse_config(SPC)
    assert (cfg.ident.N, cfg.ident.M, cfg.ident.H) == (30, 20, 400)
    assert cfg.controller.Q == (5.0,)


def test_data_length_inequality_is_reported():
    e = _err(SPC.replace("H = 400", "H = 460"))
    assert e.field == "identification.H"
    assert "N + M + H - 1 <= D" in str(e)


def test_deepc_requires_alpha():
    assert _err(SPC.replace("kind = spc", "kind = deepc")).field == "controller.alpha"


@pytest.mark.parametrize(
    "edit,field",
    [
        (("Q = 5", "Q = 5\nbogus = 1"), "controller.bogus"),
        (("[data]", "[extra]\nx = 1\n[data]"), "extra"),
        (("kind = spc", "kind = lqr"), "experiment.kind"),
        (("system = lti4", "system = lti9"), "experiment.system"),
        (("Q = 5", "Q = -5"), "controller.Q"),
        (("N = 30\nQ", "N = 10\nQ"), "controller.N"),
        (("replay = 20", "replay = 3"), "controller.replay"),
        (("H = 400", "H = four hundred"), "identification.H"),
        (("length = 500\nuse = 500", "length = 400\nuse = 500"), "data.use"),
    ],
)
def test_invalid_fields_are_named(edit, field):
    assert _err(SPC.replace(*edit)).field == field


def test_missing_required_field():
    assert _err(SPC.replace("R = 0.1\n", "")).field == "controller.R"


def test_neural_kinds_need_the_reactor():
    text = "[experiment]\nkind = rnn\nsystem = lti4\n[controller]\nN = 10\nQ = 2\nR = 3\n"
    assert _err(text).field == "experiment.system"


def test_unreadable_config():
    assert isinstance(_err("not an ini file ["), ConfigError)


def test_malformed_config_exits_without_files(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(SPC.replace("H = 400", "H = 460"))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    assert "identification.H" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_validate_command(capsys):
    assert main(["validate", "--config", "spc_paper"]) == 0
    assert "spc" in capsys.readouterr().out


def test_list_command(capsys):
    assert main(["list"]) == 0
    assert "hokalman_paper.cfg" in capsys.readouterr().out.split()


def test_run_writes_outputs_reproducibly(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", "hokalman_paper", "--out", str(a)]) == 0
    assert main(["run", "--config", "hokalman_paper.cfg", "--out", str(b)]) == 0
    for name in ("trace.csv", "model.json", "summary.json"):
        assert (a / name).exists()
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    header = (a / "trace.csv").read_text().splitlines()[0].split(",")
    assert header == ["k", "u_1", "y_1", "yr_1", "x_1", "x_2", "x_3", "cost", "status"]
    summary = json.loads((a / "summary.json").read_text())
    assert summary["identification"]["order"] == 3
    model = load_model(a / "model.json")
    assert model.A.shape == (3, 3)


def test_ident_command(tmp_path, capsys):
    assert main(["ident", "--config", "spc_paper", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.json").exists() and not (tmp_path / "trace.csv").exists()
    assert json.loads(capsys.readouterr().out)["identification"]["predictor_residual"] <= 1e-6


def test_seed_override(tmp_path, capsys):
    assert main(["ident", "--config", "hokalman_paper", "--seed", "9", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["seed"] == 9


def test_trace_csv_round_trips_floats():
    tr = ClosedLoopTrace(U=np.array([[0.1], [1 / 3]]), Y=np.array([[np.pi], [2.0]]), R=np.ones((2, 1)), X=None,
                         cost=np.array([1e-17, np.nan]), status=["optimal", "max_iterations"])
    rows = [r.split(",") for r in trace_csv(tr).splitlines()]
    assert rows[0] == ["k", "u_1", "y_1", "yr_1", "cost", "status"]
    assert float(rows[2][1]) == 1 / 3 and float(rows[1][2]) == np.pi
    assert rows[2][-1] == "max_iterations"


@pytest.mark.parametrize("kind", ["hokalman", "pem", "rnn", "ssnn"])
def test_model_json_round_trip(kind, rng):
    if kind == "hokalman":
        model = LinearModel(rng.standard_normal((2, 2)), rng.standard_normal((2, 1)), rng.standard_normal((1, 2)))
    elif kind == "pem":
        model = PemParams(rng.standard_normal((2, 2)), rng.standard_normal((2, 1)), rng.standard_normal((1, 2)),
                          rng.standard_normal(2))
    elif kind == "rnn":
        model = RnnModel.init(1, 1, (5,), rng)
    else:
        model = SsnnModel.init(2, 1, 1, (5,), (3,), rng)
    back = model_from_dict(json.loads(dumps(model_to_dict(kind, model))))
    assert type(back) is type(model)
    assert model_to_dict(kind, back)["dims"] == model_to_dict(kind, model)["dims"]
    if kind in ("rnn", "ssnn"):
        np.testing.assert_array_equal(back.pack(), model.pack())
    else:
        np.testing.assert_array_equal(back.A, model.A)


def test_malformed_model_file():
    with pytest.raises(ConfigError):
        model_from_dict({"kind": "rnn", "dims": {}})
