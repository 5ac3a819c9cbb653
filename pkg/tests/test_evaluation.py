import csv
import json

import numpy as np
import pytest

from odernn.channel import CsiSequence, GenConfig, NoisePolicy
from odernn.evaluation import (SweepSpec, dataset_nmse, drop_bad_observations, nmse,
                               predict_sequences, run_interval_sweep, run_length_sweep,
                               run_noise_sweep, run_sweep, run_velocity_sweep, sample_nmse)
from odernn.models import build_model
from odernn.odesolve import SolverConfig
from odernn.training import TrainConfig


def tiny_spec(variable="velocity", grid=(5.0, 40.0), models=("ode-rnn", "lstm"), seeds=(0, 1), **kw):
    base = dict(variable=variable, grid=list(grid), models=list(models), seeds=list(seeds), n_samples=10,
                n_t=2, n_c=2, hidden=4, dyn_hidden=(4,),
                train=TrainConfig(steps=3, batch_size=4, solver=SolverConfig("rk4")))
    base.update(kw)
    return SweepSpec(**base)


def seq(noise, times=None):
    n = len(noise)
    obs = np.arange(1, n + 1)[:, None, None] * np.ones((n, 2, 2)) + 0j
    t = np.arange(n + 1) * 1e-3 if times is None else times
    return CsiSequence(t, obs, np.ones((2, 2)), np.array(noise, float))


def test_nmse_units(rng):
    y = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    assert nmse(y, y) == 0.0
    assert nmse(np.zeros_like(y), y) == 1.0
    assert nmse(2 * y, y) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        nmse(y, np.zeros_like(y))
    stack = np.stack([y, 2 * y])
    np.testing.assert_allclose(sample_nmse(np.stack([y, y]), stack), [0.0, 0.25])


def test_drop_examples():
    s = seq([0.0, 0.5, 0.0])
    assert drop_bad_observations(s, float("inf")) is s
    assert drop_bad_observations(seq([0.0, 0.0, 0.0]), 1e-9).n_obs == 3
    d = drop_bad_observations(s, 0.1)
    assert d.n_obs == 2
    assert d.times.tolist() == [0.0, 2e-3, 3e-3]
    assert d.observations[:, 0, 0].real.tolist() == [1.0, 3.0]
    assert np.array_equal(d.target, s.target)


def test_drop_keeps_least_noisy_when_all_bad():
    d = drop_bad_observations(seq([0.9, 0.4, 0.7]), 0.1)
    assert d.n_obs == 1 and d.noise_nmse[0] == 0.4
    assert d.times.tolist() == [1e-3, 3e-3]


def test_predict_sequences_groups_lengths(rng):
    m = build_model("ode-rnn", 2, 2, hidden=4, dyn_hidden=(4,))
    seqs = [seq([0, 0, 0]), seq([0, 0]), seq([0, 0, 0])]
    out = predict_sequences(m, seqs)
    for s, y in zip(seqs, out):
        np.testing.assert_allclose(y, m.predict(s), rtol=1e-12)


def test_dataset_nmse_guards():
    spec = tiny_spec()
    scene, ofdm, array = spec.scene()
    from odernn.channel import generate_dataset
    ds = generate_dataset(scene, ofdm, array, GenConfig(noise=NoisePolicy(level=0.3)), 10, 0)
    lstm = build_model("lstm", 2, 2, hidden=4)
    with pytest.raises(ValueError, match="continuous-time"):
        dataset_nmse(lstm, ds, drop_threshold=0.1)
    assert dataset_nmse(lstm, ds, drop_threshold=float("inf")) == dataset_nmse(lstm, ds)
    with pytest.raises(ValueError, match="2x2"):
        dataset_nmse(build_model("lstm", 3, 2, hidden=4), ds)
    ode = build_model("ode-rnn", 2, 2, hidden=4, dyn_hidden=(4,))
    a = dataset_nmse(ode, ds, drop_threshold=0.15)
    assert np.isfinite(a) and a == dataset_nmse(ode, ds, drop_threshold=0.15)


def test_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        SweepSpec(variable="bandwidth", grid=[1])
    with pytest.raises(ValueError):
        SweepSpec(variable="velocity", grid=[])
    with pytest.raises(ValueError):
        SweepSpec(variable="velocity", grid=[5], models=["gru"])
    s = tiny_spec()
    d = json.loads(json.dumps(s.to_dict()))
    assert SweepSpec.from_dict(d).digest() == s.digest()
    d["colour"] = 1
    with pytest.raises(ValueError, match="colour"):
        SweepSpec.from_dict(d)


def test_spec_cell_configs():
    s = tiny_spec()
    assert s.gen_for(40.0).speed_range == (40.0, 40.0)
    assert tiny_spec("sampling_interval", grid=[1e-3]).gen_for(4e-3).interval == 4e-3
    assert tiny_spec("sequence_length", grid=[3]).gen_for(3).n_obs == 3
    assert tiny_spec("channel_noise_nmse", grid=[0.1]).gen_for(0.1).noise.level == 0.1
    assert s.solver_for(GenConfig(interval=4e-3)).step == 4e-3


def test_velocity_sweep_cardinality_determinism_and_resume(tmp_path):
    spec = tiny_spec()
    a = run_velocity_sweep(spec, out_dir=tmp_path)
    assert len(a.records) == 2 * 2 * 2
    assert all(r["status"] == "ok" and np.isfinite(r["nmse"]) and r["nmse"] >= 0 for r in a.records)
    b = run_sweep(spec)
    assert [r["nmse"] for r in a.records] == [r["nmse"] for r in b.records]
    cells = sorted(p.name for p in (tmp_path / f"cells_{spec.digest()}").iterdir())
    assert cells == ["grid_0_0.json", "grid_0_1.json", "grid_1_0.json", "grid_1_1.json"]
    marker = tmp_path / f"cells_{spec.digest()}" / "grid_0_0.json"
    recs = json.loads(marker.read_text())
    recs[0]["nmse"] = 123.0
    marker.write_text(json.dumps(recs))
    c = run_sweep(spec, out_dir=tmp_path)
    assert 123.0 in [r["nmse"] for r in c.records]
    csv_path, json_path = a.write(tmp_path)
    rows = list(csv.DictReader(open(csv_path)))
    assert list(rows[0]) == ["sweep_var", "value", "model", "seed", "nmse", "train_ms"]
    assert len(rows) == 8
    agg = a.aggregates()
    assert {g["model"] for g in agg} == {"ode-rnn", "lstm"} and all(g["n"] == 2 for g in agg)
    assert a.median("lstm", 5.0) == np.median([r["nmse"] for r in a.records
                                                if r["model"] == "lstm" and r["value"] == 5.0])


def test_full_velocity_grid_cardinality():
    spec = SweepSpec(variable="velocity", grid=[5, 10, 20, 40])
    cells = len(spec.grid) * len(spec.seeds) * len(spec.models)
    assert cells == 48


def test_sweep_wrappers_guard_models():
    with pytest.raises(ValueError):
        run_interval_sweep(tiny_spec("sampling_interval", grid=[1e-3], models=["lstm"]))
    with pytest.raises(ValueError):
        run_length_sweep(tiny_spec("sequence_length", grid=[3], models=["neural-ode"]))
    with pytest.raises(ValueError):
        run_noise_sweep(tiny_spec())


def test_failed_cells_are_recorded(monkeypatch):
    import odernn.evaluation as ev
    real = ev.train

    def flaky(model, ds, cfg, **kw):
        if model.kind == "ode-rnn":
            raise FloatingPointError("boom")
        return real(model, ds, cfg, **kw)

    monkeypatch.setattr(ev, "train", flaky)
    res = run_sweep(tiny_spec(seeds=[0], grid=[5.0]))
    assert len(res.records) == 2
    bad = res.failed
    assert len(bad) == 1 and bad[0]["model"] == "ode-rnn" and "boom" in bad[0]["status"]
    assert np.isnan(bad[0]["nmse"])
    assert np.isfinite(res.median("lstm", 5.0))


def test_noise_sweep_zero_level_matches_clean_cell():
    noise = tiny_spec("channel_noise_nmse", grid=[0.0, 0.5], seeds=[0], obs_dropout=0.0)
    res = run_noise_sweep(noise)
    assert len(res.records) == 2 * 2
    clean = tiny_spec("velocity", grid=[5.0], seeds=[0])
    ref = run_sweep(clean)
    for m in ("ode-rnn", "lstm"):
        assert res.median(m, 0.0) == pytest.approx(ref.median(m, 5.0), rel=1e-12)


def test_parallel_sweep_matches_serial():
    spec = tiny_spec(models=["lstm"], seeds=[0, 1], grid=[5.0])
    a = run_sweep(spec, jobs=1)
    b = run_sweep(spec, jobs=2)
    assert [r["nmse"] for r in a.records] == [r["nmse"] for r in b.records]
