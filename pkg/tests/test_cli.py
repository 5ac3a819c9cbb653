import json

import pytest

from odernn import cli
from odernn.channel import read_dataset
from odernn.models import load_checkpoint

SMALL = {"generation": {"n_samples": 10, "n_obs": 3}, "ofdm": {"n_c": 2}, "array": {"n_t": 2},
         "model": {"hidden": 4, "dyn_hidden": [4]}, "training": {"batch_size": 4, "eval_every": 5}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "small.json").write_text(json.dumps(SMALL))
    return tmp_path


def gen(path="d.csi", *extra):
    return cli.main(["gen", "small.json", "--out", path, *extra])


def test_gen_minimal_config_and_split(workdir, capsys):
    assert gen() == 0
    raw = (workdir / "d.csi").read_bytes()
    assert raw[:4] == b"CSI1" and raw[4:6] == b"\x01\x00"
    side = json.loads((workdir / "d.csi.json").read_text())
    assert len(side["split"]["train"]) == 8 and len(side["split"]["test"]) == 2
    assert "8/2" in capsys.readouterr().out


def test_gen_is_byte_reproducible(workdir):
    assert gen("a.csi", "--seed", "3") == 0
    assert gen("b.csi", "--seed", "3") == 0
    assert (workdir / "a.csi").read_bytes() == (workdir / "b.csi").read_bytes()
    assert gen("c.csi", "--seed", "4") == 0
    assert (workdir / "a.csi").read_bytes() != (workdir / "c.csi").read_bytes()


def test_config_errors_name_the_field(workdir, capsys):
    (workdir / "bad.json").write_text(json.dumps({"generation": {"n_sampels": 3}}))
    assert cli.main(["gen", "bad.json", "--out", "x"]) == 1
    assert "generation.n_sampels" in capsys.readouterr().err
    (workdir / "bad2.json").write_text(json.dumps({"ofdm": {"n_c": 0}}))
    assert cli.main(["gen", "bad2.json", "--out", "x"]) == 1
    assert "ofdm" in capsys.readouterr().err
    assert cli.main(["gen", "missing.json", "--out", "x"]) == 1


def test_config_dir_env(workdir, tmp_path_factory, monkeypatch):
    other = tmp_path_factory.mktemp("cfg")
    (other / "shared.json").write_text(json.dumps(SMALL))
    monkeypatch.setenv(cli.CONFIG_DIR_ENV, str(other))
    assert cli.main(["gen", "shared.json", "--out", "e.csi"]) == 0
    assert len(read_dataset(workdir / "e.csi")) == 10


@pytest.mark.parametrize("model", ["ode-rnn", "neural-ode", "lstm", "rnn"])
def test_train_smoke_and_log(workdir, model):
    gen()
    rc = cli.main(["train", "d.csi", "--config", "small.json", "--model", model, "--steps", "10",
                   "--out", "m.ckpt"])
    assert rc == 0
    lines = (workdir / "m.ckpt.log.jsonl").read_text().splitlines()
    assert len(lines) == 10 // 5
    m, extra = load_checkpoint(workdir / "m.ckpt")
    assert m.kind == model and extra["training"]["steps"] == 10


def test_log_gets_final_line(workdir):
    gen()
    assert cli.main(["train", "d.csi", "--config", "small.json", "--steps", "12", "--out", "m.ckpt"]) == 0
    assert len((workdir / "m.ckpt.log.jsonl").read_text().splitlines()) == 12 // 5 + 1


def test_eval_reproduces_training_nmse(workdir):
    gen()
    cli.main(["train", "d.csi", "--config", "small.json", "--steps", "5", "--out", "m.ckpt"])
    last = json.loads((workdir / "m.ckpt.log.jsonl").read_text().splitlines()[-1])
    assert cli.main(["eval", "d.csi", "m.ckpt", "--out", "r1.json"]) == 0
    assert cli.main(["eval", "d.csi", "m.ckpt", "--out", "r2.json"]) == 0
    r1 = json.loads((workdir / "r1.json").read_text())
    assert r1["nmse"] == last["test_nmse"]
    assert r1 == json.loads((workdir / "r2.json").read_text())
    assert cli.main(["eval", "d.csi", "m.ckpt", "--drop-threshold", "inf", "--out", "r3.json"]) == 0
    assert json.loads((workdir / "r3.json").read_text())["nmse"] == r1["nmse"]


def test_eval_rejects_dropping_for_lstm(workdir, capsys):
    gen()
    cli.main(["train", "d.csi", "--config", "small.json", "--model", "lstm", "--steps", "2", "--out", "l.ckpt"])
    assert cli.main(["eval", "d.csi", "l.ckpt", "--drop-threshold", "0.1"]) == 1
    assert "retain" in capsys.readouterr().err


def test_eval_dimension_mismatch(workdir, capsys):
    gen()
    cli.main(["train", "d.csi", "--config", "small.json", "--steps", "2", "--out", "m.ckpt"])
    (workdir / "big.json").write_text(json.dumps({**SMALL, "ofdm": {"n_c": 3}}))
    cli.main(["gen", "big.json", "--out", "big.csi"])
    assert cli.main(["eval", "big.csi", "m.ckpt"]) == 1
    err = capsys.readouterr().err
    assert "2x2" in err and "2x3" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(workdir):
    gen()
    (workdir / "hot.json").write_text(json.dumps({**SMALL, "training": {"lr": 1e300, "batch_size": 4}}))
    rc = cli.main(["train", "d.csi", "--config", "hot.json", "--model", "rnn", "--steps", "20",
                   "--out", "h.ckpt"])
    assert rc == 2


def test_usage_errors():
    assert cli.main(["diag", "--check", "nope"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["train"]) == 1


def test_diag_all_pass(capsys):
    assert cli.main(["diag", "--check", "all"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t") == ["check", "name", "value", "bound", "result"]
    rows = [line.split("\t") for line in out[1:]]
    assert {r[0] for r in rows} == {"solver-order", "gradcheck", "theorem1"}
    assert all(r[-1] == "PASS" for r in rows)
    t1 = [r for r in rows if r[0] == "theorem1"][0]
    assert float(t1[2]) < 1e-3


def _spec(workdir, **kw):
    spec = {"variable": "velocity", "grid": [5.0], "models": ["lstm"], "seeds": [0], "n_samples": 10,
            "n_t": 2, "n_c": 2, "hidden": 4, "train": {"steps": 2, "batch_size": 4}}
    spec.update(kw)
    (workdir / "spec.json").write_text(json.dumps(spec))


def test_sweep_writes_outputs(workdir):
    _spec(workdir)
    assert cli.main(["sweep", "spec.json", "--out", "res"]) == 0
    files = sorted(p.name for p in (workdir / "res").iterdir())
    assert any(f.startswith("sweep_velocity_") and f.endswith(".csv") for f in files)
    assert any(f.endswith(".json") for f in files)


def test_sweep_partial_failure_exit_code(workdir, monkeypatch):
    import odernn.evaluation as ev

    def broken(*a, **k):
        raise FloatingPointError("boom")

    monkeypatch.setattr(ev, "train", broken)
    _spec(workdir)
    assert cli.main(["sweep", "spec.json", "--out", "res"]) == 3


def test_sweep_bad_spec(workdir):
    _spec(workdir, colour="red")
    assert cli.main(["sweep", "spec.json"]) == 1
