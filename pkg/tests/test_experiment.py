import json

import numpy as np
import pytest

from fedfreeze.errors import ConfigError
from fedfreeze.experiment import RunConfig, model_crc, prepare, run_experiment
from fedfreeze.registry import load_model


def cfg(tmp_path, **over):
    base = dict(architecture="toy_mlp", n_clients=4, rounds=3, layers=3,
                dataset={"kind": "blobs", "classes": 4, "dims": 20, "samples": 800},
                output_dir=str(tmp_path / "run"))
    base.update(over)
    return RunConfig(**base)


def test_records_and_ledger_agree(tmp_path):
    res = run_experiment(cfg(tmp_path), keep_history=True)
    assert [r.round for r in res.records] == [0, 1, 2, 3]
    for r in res.records[1:]:
        assert r.uplink_bytes == res.ledger.total(round=r.round, direction="uplink")
        assert r.downlink_bytes == res.ledger.total(round=r.round, direction="downlink")
        assert sum(r.selection_counts) == len(r.clients) * 3
    assert (res.histogram.counts.sum(axis=1) == res.histogram.participations * 3).all()
    assert len(res.history) == 4
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["model_crc32"] == [model_crc(s) for s in res.history]
    assert load_model(tmp_path / "run" / "final_model.ffrz").equals(res.final_state.model)


def test_client_fraction_and_checkpoints(tmp_path):
    res = run_experiment(cfg(tmp_path, client_fraction=0.5, checkpoint_every=2, rounds=4))
    assert all(len(r.clients) == 2 for r in res.records[1:])
    assert sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir()) == \
        ["round_0002.ffrz", "round_0004.ffrz"]


def test_smoothing_changes_trajectory(tmp_path):
    a = run_experiment(cfg(tmp_path, smoothing=False), write=False)
    b = run_experiment(cfg(tmp_path, smoothing=True), write=False)
    assert a.records[1].accuracy == b.records[1].accuracy  # t=1 is a no-op
    assert not a.final_state.model.equals(b.final_state.model)


def test_runs_are_deterministic(tmp_path):
    a = run_experiment(cfg(tmp_path, output_dir=str(tmp_path / "a")))
    b = run_experiment(cfg(tmp_path, output_dir=str(tmp_path / "b")))
    for name in ("metrics.csv", "selection_histogram.csv", "traffic.csv", "final_model.ffrz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_default_layers_is_full_model(tmp_path):
    prep = prepare(cfg(tmp_path, layers=None))
    assert prep.layer_budget == prep.n_units == 6


def test_dataset_shape_mismatch(tmp_path):
    with pytest.raises(ConfigError, match="do not match"):
        prepare(cfg(tmp_path, dataset={"kind": "blobs", "dims": 5}))


def test_config_round_trip(tmp_path):
    c = cfg(tmp_path)
    assert RunConfig.from_dict(c.to_dict()) == c
