import copy
import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wtal_collab import pipeline
from wtal_collab.checkpoint import load_checkpoint
from wtal_collab.distill import predict_all
from wtal_collab.errors import DimensionError, LoadError
from wtal_collab.cbp import predict_cbp
from wtal_collab.vlp import FROZEN, predict_vlp

import oracles

grids = st.tuples(st.integers(1, 6), st.integers(1, 4)).flatmap(
    lambda shape: st.tuples(arrays(np.float64, shape, elements=st.floats(0, 1)),
                            arrays(np.float64, shape, elements=st.floats(0, 1))))


def test_fuse_examples(rng):
    a, b = rng.random((5, 3)), rng.random((5, 3))
    assert np.array_equal(pipeline.fuse_cas(a, b, "weight", 1.0), a)
    assert np.array_equal(pipeline.fuse_cas(a, a, "avg"), a)
    with pytest.raises(DimensionError):
        pipeline.fuse_cas(a, b[:4], "avg")


@settings(max_examples=60, deadline=None)
@given(grids, st.floats(0, 1), st.sampled_from(["avg", "weight"]))
def test_fuse_matches_oracle(pair, w, mode):
    a, b = pair
    out = pipeline.fuse_cas(a, b, mode, w)
    assert np.allclose(out, oracles.fuse(a.tolist(), b.tolist(), mode, w), rtol=0, atol=1e-12)


def test_fuse_avg_baseline_feeds_inference(tiny_train, fast_cfg):
    cfg = dataclasses.replace(fast_cfg, baseline="fuse_avg")
    cbp, vlp = pipeline.build_models(cfg, tiny_train)
    cas = pipeline.inference_cas(cfg, cbp, vlp, tiny_train)
    cb = predict_all(predict_cbp, cbp, tiny_train, "cbp")
    vl = predict_all(predict_vlp, vlp, tiny_train, "vlp")
    for rec in tiny_train:
        expect = oracles.fuse(cb[rec.video_id].tolist(), vl[rec.video_id].tolist(), "avg", 0.5)
        assert np.allclose(cas[rec.video_id], expect, rtol=0, atol=1e-12)


def test_alternating_infers_from_cbp(tiny_train, fast_cfg):
    cbp, vlp = pipeline.build_models(fast_cfg, tiny_train)
    cas = pipeline.inference_cas(fast_cfg, cbp, vlp, tiny_train)
    rec = tiny_train.records[0]
    assert np.array_equal(cas[rec.video_id], predict_cbp(cbp, tiny_train.stream(rec.video_id, "cbp")))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_disk_train):
    from conftest import FAST
    from wtal_collab.config import ExperimentConfig
    cfg = ExperimentConfig(**FAST)
    out = tmp_path_factory.mktemp("run")
    cbp, vlp, history = pipeline.run_training(cfg, tiny_disk_train, out)
    return cfg, out, history


def test_run_artifacts(trained):
    cfg, out, history = trained
    digest = json.loads((out / "config.json").read_text())["config_hash"]
    lines = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert len(lines) == len(history) == 3
    assert {line["config_hash"] for line in lines} == {digest}
    _, cb_meta = load_checkpoint(out / "cbp.ckpt")
    vl_state, vl_meta = load_checkpoint(out / "vlp.ckpt")
    assert cb_meta["config_hash"] == vl_meta["config_hash"] == digest
    assert not set(vl_state) & set(FROZEN)
    assert "frozen_hash" in vl_meta


def test_models_reload(trained, tiny_disk_train):
    cfg, out, _ = trained
    cbp, vlp = pipeline.load_models(out, cfg, tiny_disk_train)
    state, _ = load_checkpoint(out / "cbp.ckpt")
    assert all(np.array_equal(cbp.state_dict()[k], v) for k, v in state.items())


def test_reload_refuses_other_data(trained, tiny_disk_train):
    cfg, out, _ = trained
    other = copy.copy(tiny_disk_train)
    other.digest = "0" * 16
    with pytest.raises(LoadError, match="--force"):
        pipeline.load_models(out, cfg, other)
    pipeline.load_models(out, cfg, other, force=True)


def test_reload_refuses_other_model(trained, tiny_disk_train):
    cfg, out, _ = trained
    with pytest.raises(LoadError):
        pipeline.load_models(out, dataclasses.replace(cfg, lr=0.5), tiny_disk_train)


def test_evaluation_report(trained, tiny_dir):
    from wtal_collab.data import load_dataset
    cfg, out, _ = trained
    test = load_dataset(tiny_dir, "test")
    cbp, vlp = pipeline.load_models(out, cfg, test)
    report = pipeline.evaluate(cfg, cbp, vlp, test)
    assert set(report.per_iou) == {"0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7"}
    assert report.avg_03_07 == pytest.approx(np.mean([report.per_iou[k] for k in ("0.3", "0.4", "0.5", "0.6", "0.7")]))
    assert [v["video_id"] for v in report.videos] == [r.video_id for r in test]


def test_report_table_rows():
    rep = {"per_iou": {"0.3": 0.5, "0.5": 0.25, "0.7": 0.125}, "avg_0.1_0.5": 0.4, "avg_0.3_0.7": 0.3}
    table = pipeline.report_table({"warmup_only": rep, "alternating": rep})
    lines = table.splitlines()
    assert len(lines) == 4
    assert "avg.1-.5" in lines[0] and "avg.3-.7" in lines[0]
    assert lines[2].split() == ["warmup_only", "50.0", "25.0", "12.5", "40.0", "30.0"]
    assert lines[3].startswith("alternating")
