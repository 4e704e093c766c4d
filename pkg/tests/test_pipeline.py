import hashlib
import json

import jsonschema
import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from spodrom.dataset import load_snapshots, split_train_test, synthesize_flow, write_snapshots
from spodrom.errors import StageError
from spodrom.pipeline import (MANIFEST, SUMMARY_SCHEMA, SynthConfig, config_hash, default_config,
                              emit_report, load_bundle, merge_config, run_offline, run_online,
                              step_nmse)

FAST = {"synth": {"n_t": 512}, "autoencoder": {"train": {"epochs": 20}},
        "lstm": {"train": {"epochs": 10}}, "cnn": {"train": {"epochs": 5}}}


@pytest.fixture(scope="module")
def fast_data():
    cfg = merge_config(default_config(), FAST)
    return synthesize_flow(SynthConfig.from_dict(cfg["synth"]), cfg["seed"])


@pytest.fixture(scope="module")
def bundle(fast_data, tmp_path_factory):
    root = tmp_path_factory.mktemp("bundles")
    with threadpool_limits(1):
        return run_offline(fast_data, FAST, root)


def _digests(path):
    return {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(path.iterdir())}


def test_bundle_contents(bundle):
    names = {f.name for f in bundle.path.iterdir()}
    assert {"basis.spob", "selection.json", "coeffs.scof", "mean.srom", "ae.snnp", "latent.bin",
            "lstm.snnp", "cnn.snnp", MANIFEST} <= names
    man = json.loads((bundle.path / MANIFEST).read_text())
    assert bundle.path.name == f"bundle-{man['key']}"
    assert man["provenance"]["n_m"] == bundle.selection.n_m
    assert bundle.provenance["projection_nmse"] < 1.0


def test_reuse_and_force(bundle, fast_data):
    before = (bundle.path / MANIFEST).stat().st_mtime_ns
    again = run_offline(fast_data, FAST, bundle.path.parent)
    assert again.path == bundle.path
    assert (bundle.path / MANIFEST).stat().st_mtime_ns == before


def test_hash_tracks_config_and_data():
    a = config_hash({"x": 1}, "d")
    assert a == config_hash({"x": 1}, "d")
    assert a != config_hash({"x": 2}, "d") and a != config_hash({"x": 1}, "e")


def test_single_thread_runs_are_byte_identical(bundle, fast_data, tmp_path):
    with threadpool_limits(1):
        other = run_offline(fast_data, FAST, tmp_path)
    assert other.path.name == bundle.path.name
    assert _digests(other.path) == _digests(bundle.path)


def _no_leftovers(root):
    return not list(root.iterdir()) if root.exists() else True


def test_failing_stage_leaves_no_bundle(fast_data, tmp_path):
    bad = merge_config(FAST, {"cnn": {"channels": [3, 1]}})
    with pytest.raises(StageError) as exc:
        run_offline(fast_data, bad, tmp_path)
    assert exc.value.stage == "train-cnn"
    assert _no_leftovers(tmp_path)


def test_bad_pruning_thresholds(fast_data, tmp_path):
    with pytest.raises(StageError) as exc:
        run_offline(fast_data, merge_config(FAST, {"pruning": {"eps_ric": 1.5}}), tmp_path)
    assert exc.value.stage == "prune"
    assert _no_leftovers(tmp_path)


def test_missing_data_file(tmp_path):
    with pytest.raises(StageError) as exc:
        run_offline(tmp_path / "absent.srom", FAST, tmp_path / "out")
    assert exc.value.stage == "dataset"


def test_load_detects_corruption(bundle, tmp_path):
    import shutil
    copy = tmp_path / "b"
    shutil.copytree(bundle.path, copy)
    loaded = load_bundle(copy)
    assert loaded.selection.kept == bundle.selection.kept
    raw = bytearray((copy / "lstm.snnp").read_bytes())
    raw[-1] ^= 0xFF
    (copy / "lstm.snnp").write_bytes(bytes(raw))
    with pytest.raises(StageError) as exc:
        load_bundle(copy)
    assert exc.value.stage == "load"


def test_step_nmse_oracle():
    ref = np.array([[1.0, 0.0], [0.0, 3.0]])
    app = np.array([[0.0, 0.0], [0.0, 1.0]])
    # mean energy (1 + 9) / 2 = 5
    np.testing.assert_allclose(step_nmse(ref, app), [1 / 5, 4 / 5])
    np.testing.assert_array_equal(step_nmse(ref, ref), 0)


def _window(bundle, data, start, horizon):
    _, test = split_train_test(data, bundle.config["split_ratio"])
    n = bundle.n_t_in
    return test.subset(start, start + n), test.subset(start + n, start + n + horizon)


def test_horizon_zero(bundle, fast_data):
    win, _ = _window(bundle, fast_data, 0, 0)
    res = run_online(bundle, win, 0)
    assert res.velocity is None and res.init_reconstruction.n_t == bundle.n_t_in
    assert res.latent.shape[1] == 0


def test_online_uses_only_last_window(bundle, fast_data):
    _, test = split_train_test(fast_data, bundle.config["split_ratio"])
    n = bundle.n_t_in
    short = test.subset(5, 5 + n)
    long = test.subset(0, 5 + n)
    a = run_online(bundle, short, 7)
    b = run_online(bundle, long, 7)
    np.testing.assert_array_equal(a.velocity.velocity, b.velocity.velocity)
    np.testing.assert_array_equal(a.velocity.concentration, b.velocity.concentration)
    with pytest.raises(ValueError):
        run_online(bundle, test.subset(0, n - 1), 3)


def test_prediction_shapes_and_masking(bundle, fast_data):
    win, ref = _window(bundle, fast_data, 3, 12)
    res = run_online(bundle, win, 12, ref)
    pred = res.velocity
    assert pred.n_t == 12 and np.all(np.isfinite(pred.velocity))
    assert np.all(pred.concentration >= 0)
    assert np.all(pred.concentration[:, ~bundle.geometry.fluid] == 0)
    assert len(res.metrics["nmse_velocity"]) == 12
    np.testing.assert_allclose(np.diff(pred.times), win.meta.dt)


def test_report_regenerates_from_files(bundle, fast_data, tmp_path):
    win, ref = _window(bundle, fast_data, 0, 20)
    pred = run_online(bundle, win, 20).velocity
    s1 = emit_report(bundle, pred, tmp_path / "a", ref)
    write_snapshots(tmp_path / "p.srom", pred)
    write_snapshots(tmp_path / "r.srom", ref)
    g = bundle.geometry
    p2 = load_snapshots(tmp_path / "p.srom", g.origin, bundle.meta.h_ref)
    r2 = load_snapshots(tmp_path / "r.srom", g.origin, bundle.meta.h_ref)
    s2 = emit_report(load_bundle(bundle.path), p2, tmp_path / "b", r2)
    assert s1 == s2
    for name in s1["files"] + ["summary.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_summary_schema(bundle, fast_data, tmp_path):
    win, ref = _window(bundle, fast_data, 0, 15)
    pred = run_online(bundle, win, 15).velocity
    summary = emit_report(bundle, pred, tmp_path, ref)
    jsonschema.validate(json.loads((tmp_path / "summary.json").read_text()), SUMMARY_SCHEMA)
    assert summary["horizon"] == 15
    assert {"spectrum.csv", "errors.csv", "pdf.csv", "poincare.csv", "flux.csv", "probes.csv",
            "mean_fields.srom"} == set(summary["files"])
    head = (tmp_path / "errors.csv").read_text().splitlines()
    assert head[0] == "step,lead_time,nmse_velocity,nmse_concentration" and len(head) == 16
    bad = dict(summary, horizon=-1)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, SUMMARY_SCHEMA)
