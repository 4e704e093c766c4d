"""Offline training, online prediction and reporting for the full model chain.

Offline: snapshots -> mean/fluctuations -> SPOD -> mode selection ->
coefficients -> autoencoders -> LSTM forecasters -> CNN scalar map.

Online: a short velocity window is projected on the stored basis, encoded,
rolled forward in latent space, decoded, reconstructed and mapped to
concentration.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import (AeConfig, ComplexAutoencoder, load_autoencoder,
                          train_complex_autoencoder, write_autoencoder)
from .dataset import (DatasetMeta, GridGeometry, MeanField, SnapshotDataset, SynthConfig, add_mean,
                      compute_fluctuations, load_mean_field, load_snapshots, split_train_test,
                      synthesize_flow, write_mean_field)
from .errors import StageError
from .forecaster import (ComplexForecaster, LstmConfig, coefficient_pdf, load_forecaster,
                         poincare_section, random_search, train_complex_forecaster,
                         write_forecaster, write_latent)
from .nn import TrainConfig
from .projection import (nmse, project_coefficients, reconstruct,
                         reconstruct_matrix, write_coefficients)
from .pruning import ModeSelection, load_selection, select_modes, write_selection
from .scalar_map import (CnnConfig, ScalarMap, load_scalar_map, map_concentration,
                         probe_history, train_cnn, vertical_mass_flux, write_scalar_map)
from .spod import SpodBasis, SpodParams, compute_spod, load_basis, spectrum_table, write_basis

log = logging.getLogger(__name__)

MANIFEST = "bundle.json"
TRIALS_HEADER = ["trial", "N_h", "batch", "lr", "val_loss"]


def _desk_components():
    bins = (3, 5, 7, 9, 11, 13)
    amps = (1.0, 0.8, 0.65, 0.5, 0.4, 0.3)
    return [{"pattern": i, "frequency": k / 128, "amplitude": a, "phase": 0.9 * i,
             "phase_diffusion": 0.1} for i, (k, a) in enumerate(zip(bins, amps))]


def default_config():
    """Desk-scale master configuration; every section can be overridden.

    The synthetic flow carries six travelling waves whose phases diffuse,
    so forecasts decorrelate over roughly a hundred steps like a
    turbulent flow would.
    """
    return {
        "seed": 0,
        "split_ratio": 0.6,
        "synth": {
            "nx": 24, "nz": 16, "n_t": 2048, "dt": 1.0, "dx": 1.0 / 12, "dz": 1.0 / 12,
            "origin": [-1.0, 0.0], "snr_db": 30.0, "mean_speed": 1.0,
            "building_rows": 6, "canyon_cols": 12, "u_ref": 1.0, "h_ref": 0.5,
            "components": _desk_components(),
        },
        "geometry": {"origin": [-1.0, 0.0], "h_ref": 0.5},
        "spod": {"n_fft": 128, "n_ovlp": 64, "window": "hamming"},
        "pruning": {"eps_ric": 0.8, "eps_gamma": 0.3},
        "autoencoder": {"encoder_hidden": [32, 16], "latent_size": 8, "scaling": "global",
                        "train": {"learning_rate": 2e-3, "batch_size": 64, "epochs": 200,
                                  "patience": 30}},
        "lstm": {"n_hidden": 32, "n_t_in": 10,
                 "train": {"learning_rate": 3e-3, "batch_size": 32, "epochs": 150,
                           "patience": 40}},
        "lstm_im": None,
        "search": None,
        "cnn": {"channels": [2, 6, 1], "kernel": 3, "training_input": "truth",
                "frame_stride": 4,
                "train": {"learning_rate": 1e-2, "batch_size": 16, "epochs": 60,
                          "patience": 15}},
        "report": {"pdf_bins": 40, "poincare_bins": 30, "flux_z": None, "probes": None},
    }


def merge_config(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(config, data_checksum):
    blob = json.dumps({"config": config, "data": data_checksum}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _train_config(section, seed):
    return TrainConfig.from_dict({**section.get("train", {}), "seed": int(seed)})


def data_checksum(data: SnapshotDataset):
    h = hashlib.sha256()
    for arr in (data.velocity, data.concentration, data.geometry.mask):
        if arr is not None:
            h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([data.meta.dt, data.geometry.dx, data.geometry.dz]).encode())
    return h.hexdigest()


@dataclass
class ModelBundle:
    basis: SpodBasis
    selection: ModeSelection
    autoencoder: ComplexAutoencoder
    forecaster: ComplexForecaster
    cnn: ScalarMap
    mean: MeanField
    geometry: GridGeometry
    meta: DatasetMeta
    config: dict
    provenance: dict = field(default_factory=dict)
    path: Path | None = None

    def validate(self):
        g = self.geometry
        if self.basis.n_xv != g.n_cells * self.meta.n_v:
            raise ValueError("basis size does not match the grid")
        for k, n in self.selection.kept:
            if not (0 <= k < self.basis.n_fc and 0 <= n < self.basis.n_blk):
                raise ValueError(f"selected mode {(k, n)} outside the basis")
        if self.autoencoder.n_m != self.selection.n_m:
            raise ValueError("autoencoder input size differs from the mode count")
        if self.forecaster.re.n_z != self.autoencoder.latent_size:
            raise ValueError("forecaster and autoencoder latent sizes differ")
        if self.cnn.mask.shape != g.mask.shape or not np.array_equal(self.cnn.mask, g.mask):
            raise ValueError("CNN mask does not match the grid")
        if self.mean.mean_velocity.shape != (g.n_cells, self.meta.n_v):
            raise ValueError("mean field does not match the grid")
        return self

    @property
    def n_t_in(self):
        return self.forecaster.n_t_in

    def template(self):
        """Empty dataset on the bundle grid, used to rebuild snapshots."""
        vel = np.zeros((1, self.geometry.n_cells, self.meta.n_v))
        return SnapshotDataset(self.geometry, self.meta, vel)


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        return run
    return wrap


@_stage("dataset")
def _load_data(data, config):
    if isinstance(data, SnapshotDataset):
        return data
    if data is None:
        return synthesize_flow(SynthConfig.from_dict(config["synth"]), config["seed"])
    geo = config.get("geometry", {})
    return load_snapshots(data, tuple(geo.get("origin", (0.0, 0.0))), geo.get("h_ref", 1.0))


def ae_config(section, seed=0) -> AeConfig:
    """Autoencoder settings from a config section."""
    return AeConfig(section["encoder_hidden"], section["latent_size"],
                    _train_config(section, seed), scaling=section.get("scaling", "feature"))


def lstm_config(section, seed=0) -> LstmConfig:
    return LstmConfig(section["n_hidden"], section.get("n_t_in", 10), 1,
                      _train_config(section, seed))


def cnn_config(section, seed=0):
    """``(CnnConfig, training_input, frame_stride)`` from a config section."""
    sec = dict(section)
    mode = sec.pop("training_input", "truth")
    stride = int(sec.pop("frame_stride", 1))
    sec["train"] = _train_config(sec, seed).to_dict()
    return CnnConfig.from_dict(sec), mode, stride


@_stage("spod")
def _spod(fluct, config):
    return compute_spod(fluct, SpodParams(**config["spod"]))


@_stage("prune")
def _prune(basis, config):
    p = config["pruning"]
    return select_modes(basis, p["eps_ric"], p["eps_gamma"])


@_stage("project")
def _project(basis, selection, fluct):
    return project_coefficients(basis, selection, fluct)


@_stage("train-ae")
def _train_ae(coeffs, config):
    cfg = ae_config(config["autoencoder"], config["seed"])
    return train_complex_autoencoder(coeffs.values, cfg, seed=config["seed"])


@_stage("train-lstm")
def _train_lstm(latent, config):
    cfg = lstm_config(config["lstm"], config["seed"])
    cfg_im = lstm_config(config["lstm_im"], config["seed"]) if config.get("lstm_im") else None
    search = config.get("search")
    trials = None
    if search:
        cfg, trials = random_search(latent.real, search["space"], search["trials"],
                                    search["epochs"], config["seed"], cfg.n_t_in)
        cfg_im = None
    fc, hist = train_complex_forecaster(latent, cfg, cfg_im, seed=config["seed"])
    return fc, hist, trials


@_stage("train-cnn")
def _train_cnn(train, fluct, basis, selection, coeffs, mean, config):
    cfg, mode, stride = cnn_config(config["cnn"], config["seed"])
    if train.concentration is None:
        raise ValueError("training data carries no concentration field")
    if mode == "truth":
        vel = train
    elif mode == "reconstruction":
        vel, _ = reconstruct(basis, selection, coeffs, fluct, mean)
    else:
        raise ValueError(f"unknown CNN training input {mode!r}")
    frames = vel.frames()[::stride]
    conc = train.concentration_frames()[::stride]
    return train_cnn(frames, conc, cfg, train.geometry.mask, seed=config["seed"])


def run_offline(data, config=None, out_root=None, force=False) -> ModelBundle:
    """Train every stage and persist a content-addressed bundle directory.

    ``data`` is an SROM path, a :class:`SnapshotDataset`, or ``None`` to
    synthesize from ``config["synth"]``.  The bundle is assembled in a
    temporary directory and renamed into ``out_root/bundle-<hash>`` only
    when every stage succeeded.  An existing complete bundle with the same
    hash is loaded instead of retrained unless ``force`` is set.
    """
    config = merge_config(default_config(), config)
    dataset = _load_data(data, config)
    checksum = data_checksum(dataset)
    key = config_hash(config, checksum)
    out_root = Path(out_root or tempfile.mkdtemp(prefix="spodrom-"))
    final = out_root / f"bundle-{key}"
    if (final / MANIFEST).exists() and not force:
        log.info("reusing bundle %s", final)
        return load_bundle(final)
    out_root.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".tmp-{key}-", dir=out_root))
    try:
        bundle = _build(dataset, config, tmp, checksum, key)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    bundle.path = final
    return bundle


def _build(dataset, config, out, checksum, key):
    train, _ = _stage("dataset")(split_train_test)(dataset, config["split_ratio"])
    fluct, mean = _stage("dataset")(compute_fluctuations)(train)
    basis = _spod(fluct, config)
    selection = _prune(basis, config)
    coeffs = _project(basis, selection, fluct)
    ae, ae_hist = _train_ae(coeffs, config)
    latent = ae.encode(coeffs.values).values
    fc, lstm_hist, trials = _train_lstm(latent, config)
    cnn, cnn_hist = _train_cnn(train, fluct, basis, selection, coeffs, mean, config)

    q = fluct.snapshot_matrix()
    proj_rec, resid = reconstruct_matrix(basis, coeffs.mode_index, coeffs.values)
    ae_rec, _ = reconstruct_matrix(basis, coeffs.mode_index, ae.decode(latent))
    proj_nmse, ae_nmse = nmse(q, proj_rec), nmse(q, ae_rec)

    @_stage("persist")
    def persist():
        write_basis(out / "basis.spob", basis)
        write_selection(out / "selection.json", selection)
        write_coefficients(out / "coeffs.scof", coeffs)
        write_mean_field(out / "mean.srom", mean, train.geometry, train.meta)
        write_autoencoder(out / "ae.snnp", ae)
        write_latent(out / "latent.bin", latent)
        write_forecaster(out / "lstm.snnp", fc)
        write_scalar_map(out / "cnn.snnp", cnn)
        if trials is not None:
            _write_csv(out / "trials.csv", TRIALS_HEADER,
                       [[r[k] for k in ("trial", "n_hidden", "batch_size", "learning_rate",
                                        "val_loss")] for r in trials])
        manifest = {
            "key": key,
            "config": config,
            "geometry": {"nx": train.geometry.nx, "nz": train.geometry.nz,
                         "dx": train.geometry.dx, "dz": train.geometry.dz,
                         "origin": list(train.geometry.origin),
                         "mask": train.geometry.mask.astype(int).tolist()},
            "meta": {"dt": train.meta.dt, "u_ref": train.meta.u_ref, "c_ref": train.meta.c_ref,
                     "h_ref": train.meta.h_ref, "n_v": train.meta.n_v},
            "provenance": {
                "seed": config["seed"], "version": __version__,
                "numpy": np.__version__, "dataset_checksum": checksum,
                "n_train": train.n_t, "n_f": selection.n_f, "n_m": selection.n_m,
                "n_z": ae.latent_size,
                "projection_nmse": proj_nmse, "ae_field_nmse": ae_nmse,
                "projection_imag_residual": resid,
                "ae_not_better_than_projection": bool(ae_nmse >= proj_nmse),
                "histories": {"ae": {k: h.to_dict() for k, h in ae_hist.items()},
                              "lstm": {k: h.to_dict() for k, h in lstm_hist.items()},
                              "cnn": cnn_hist.to_dict()},
            },
            "files": {},
        }
        for f in sorted(out.iterdir()):
            manifest["files"][f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return manifest

    manifest = persist()
    if ae_nmse < proj_nmse:
        log.warning("autoencoder field error %.3g below projection error %.3g", ae_nmse, proj_nmse)
    return ModelBundle(basis, selection, ae, fc, cnn, mean, train.geometry, train.meta, config,
                       manifest["provenance"]).validate()


def load_bundle(path) -> ModelBundle:
    """Load and cross-validate a bundle directory written by :func:`run_offline`."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        for name, digest in manifest["files"].items():
            if hashlib.sha256((path / name).read_bytes()).hexdigest() != digest:
                raise ValueError(f"{name} does not match its recorded checksum")
        g = manifest["geometry"]
        geom = GridGeometry(g["nx"], g["nz"], g["dx"], g["dz"], np.asarray(g["mask"], dtype=bool),
                            tuple(g["origin"]))
        meta = DatasetMeta(**manifest["meta"])
        mean = load_mean_field(path / "mean.srom")
        bundle = ModelBundle(load_basis(path / "basis.spob"), load_selection(path / "selection.json"),
                             load_autoencoder(path / "ae.snnp"), load_forecaster(path / "lstm.snnp"),
                             load_scalar_map(path / "cnn.snnp"), mean, geom, meta,
                             manifest["config"], manifest["provenance"], path)
        return bundle.validate()
    except StageError:
        raise
    except Exception as exc:
        raise StageError("load", f"{type(exc).__name__}: {exc}") from exc


# -- online -----------------------------------------------------------------

@dataclass
class OnlineResult:
    init_reconstruction: SnapshotDataset
    velocity: SnapshotDataset | None  # predicted horizon, concentration filled by the CNN
    latent: np.ndarray
    coefficients: np.ndarray
    metrics: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def step_nmse(reference, approx):
    """Per-step squared error over the time-averaged reference energy.

    A fixed denominator keeps the curve from spiking when an individual
    reference snapshot happens to carry little energy.
    """
    ref = np.asarray(reference, dtype=float)
    app = np.asarray(approx, dtype=float)
    if ref.shape != app.shape:
        raise ValueError("reference and prediction differ in shape")
    axes = tuple(range(1, ref.ndim))
    energy = float(np.mean(np.sum(ref ** 2, axis=axes)))
    if energy == 0.0:
        from .errors import UndefinedMetricError
        raise UndefinedMetricError("reference has zero energy")
    return np.sum((ref - app) ** 2, axis=axes) / energy


def run_online(bundle: ModelBundle, window: SnapshotDataset, horizon, reference=None,
               mode="window") -> OnlineResult:
    """Forecast ``horizon`` steps after the snapshot ``window``.

    Only the last ``n_t_in`` snapshots of ``window`` are used.  With a
    ``reference`` dataset (the true continuation) per-step errors are
    reported for velocity fluctuations and concentration.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    n_in = bundle.n_t_in
    if window.n_t < n_in:
        raise ValueError(f"init window holds {window.n_t} snapshots, need {n_in}")
    window = window.subset(window.n_t - n_in, window.n_t)
    fluct, _ = compute_fluctuations(window, bundle.mean)
    coeffs = project_coefficients(bundle.basis, bundle.selection, fluct)
    rec, _ = reconstruct(bundle.basis, None, coeffs, window, bundle.mean)
    z_win = bundle.autoencoder.encode(coeffs.values).values
    result = OnlineResult(rec, None, np.zeros((z_win.shape[0], 0), complex),
                          np.zeros((coeffs.n_m, 0), complex))
    if horizon == 0:
        return result
    z, diag = bundle.forecaster.rollout(z_win, horizon, mode)
    a = bundle.autoencoder.decode(z)
    t0 = window.times[-1] + window.meta.dt
    mat, resid = reconstruct_matrix(bundle.basis, coeffs.mode_index, a)
    mat[:, ~np.tile(window.geometry.fluid, window.n_v)] = 0.0
    fl = window.with_velocity_matrix(mat, times=t0 + window.meta.dt * np.arange(horizon))
    pred = add_mean(fl, bundle.mean)
    conc = map_concentration(bundle.cnn, pred.frames()).reshape(horizon, -1)
    pred = SnapshotDataset(pred.geometry, pred.meta, pred.velocity, conc, pred.times)
    result.velocity, result.latent, result.coefficients = pred, z, a
    result.diagnostics = {**diag, "imag_residual": resid}
    if reference is not None:
        result.metrics = compare(bundle, pred, reference)
    return result


def compare(bundle, pred: SnapshotDataset, reference: SnapshotDataset):
    n = min(pred.n_t, reference.n_t)
    ref = reference.subset(0, n)
    ref_f, _ = compute_fluctuations(ref, bundle.mean)
    pred_f, _ = compute_fluctuations(pred.subset(0, n), bundle.mean)
    out = {"nmse_velocity": step_nmse(ref_f.snapshot_matrix(), pred_f.snapshot_matrix())}
    if ref.concentration is not None and pred.concentration is not None:
        out["nmse_concentration"] = step_nmse(ref.concentration, pred.concentration)
    return out


# -- report -----------------------------------------------------------------

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["horizon", "metrics", "config", "provenance", "files"],
    "properties": {
        "horizon": {"type": "integer", "minimum": 0},
        "metrics": {
            "type": "object",
            "properties": {
                "mean_nmse_velocity": {"type": ["number", "null"]},
                "mean_nmse_concentration": {"type": ["number", "null"]},
                "max_nmse_velocity": {"type": ["number", "null"]},
                "projection_nmse": {"type": ["number", "null"]},
                "ae_field_nmse": {"type": ["number", "null"]},
            },
        },
        "config": {"type": "object"},
        "provenance": {"type": "object"},
        "files": {"type": "array", "items": {"type": "string"}},
    },
}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _leading_row(bundle):
    lam = [bundle.basis.eigenvalues[k, n] for k, n in bundle.selection.kept]
    return int(np.argmax(lam))


def _flux_level(bundle):
    z = bundle.config.get("report", {}).get("flux_z")
    if z is not None:
        return float(z)
    rows = np.nonzero(bundle.geometry.mask.all(axis=1))[0]
    return float(bundle.geometry.z[rows[0] if len(rows) else -1])


def _probes(bundle):
    probes = bundle.config.get("report", {}).get("probes")
    if probes:
        return [tuple(p) for p in probes]
    g = bundle.geometry
    fluid = np.argwhere(g.mask)
    iz, ix = fluid[len(fluid) // 2]
    return [(float(g.x[ix]), float(g.z[iz]))]


def emit_report(bundle: ModelBundle, prediction: SnapshotDataset, out_dir, reference=None,
                coefficients=None):
    """Write CSV tables, the mean field and a validated JSON summary into ``out_dir``.

    Everything is derived from the bundle, the predicted snapshots and the
    optional reference, so rerunning on persisted files gives identical output.
    """
    import jsonschema

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = bundle.config.get("report", {})
    files = []

    def put(name, header, rows):
        _write_csv(out / name, header, rows)
        files.append(name)

    meta = bundle.meta
    header, rows = spectrum_table(bundle.basis, meta.h_ref, meta.u_ref)
    put("spectrum.csv", header, rows)

    metrics = {}
    horizon = prediction.n_t if prediction is not None else 0
    if reference is not None and prediction is not None:
        metrics = compare(bundle, prediction, reference)
    n_rows = len(metrics.get("nmse_velocity", []))
    dt = meta.dt
    put("errors.csv", ["step", "lead_time", "nmse_velocity", "nmse_concentration"],
        [[i, (i + 1) * dt, metrics["nmse_velocity"][i],
          metrics["nmse_concentration"][i] if "nmse_concentration" in metrics else ""]
         for i in range(n_rows)])

    if coefficients is None and prediction is not None:
        fl, _ = compute_fluctuations(prediction, bundle.mean)
        coefficients = project_coefficients(bundle.basis, bundle.selection, fl).values
    lead = _leading_row(bundle)
    pdf_rows = []
    if coefficients is not None and np.size(coefficients):
        series = {"pred": np.asarray(coefficients)[lead].real}
        if reference is not None:
            rf, _ = compute_fluctuations(reference.subset(0, min(horizon, reference.n_t)), bundle.mean)
            series["ref"] = project_coefficients(bundle.basis, bundle.selection, rf).values[lead].real
        allv = np.concatenate(list(series.values()))
        lo, hi = allv.min(), allv.max()
        pad = 0.1 * (hi - lo) if hi > lo else 1.0
        edges = np.linspace(lo - pad, hi + pad, int(rep.get("pdf_bins", 50)) + 1)
        dens = {k: coefficient_pdf(v, edges)[0] for k, v in series.items()}
        for i in range(len(edges) - 1):
            pdf_rows.append([edges[i], edges[i + 1], dens["pred"][i], dens.get("ref", [""] * len(edges))[i]])
    put("pdf.csv", ["bin_lo", "bin_hi", "density_pred", "density_ref"], pdf_rows)

    poin_rows = []
    if coefficients is not None and np.shape(coefficients)[-1] >= 3:
        c = np.asarray(coefficients)
        order = np.argsort([-bundle.basis.eigenvalues[k, n] for k, n in bundle.selection.kept],
                           kind="stable")[:3]
        sec = poincare_section(c[order].real, bins=int(rep.get("poincare_bins", 50)))
        for p in sec.points:
            poin_rows.append(list(p) + [np.nan] * (2 - len(p)))
    put("poincare.csv", ["coord_1", "coord_2"], poin_rows)

    flux_rows = []
    probe_rows = []
    if prediction is not None and prediction.n_t:
        g = bundle.geometry
        zl = _flux_level(bundle)
        w_p = prediction.frames()[:, 1]
        c_p = prediction.concentration.reshape(-1, g.nz, g.nx)
        x, fp = vertical_mass_flux(w_p, c_p, g, zl, meta.u_ref, meta.c_ref)
        fr = np.full_like(fp, np.nan)
        if reference is not None and reference.concentration is not None:
            ref = reference.subset(0, min(horizon, reference.n_t))
            _, fr = vertical_mass_flux(ref.frames()[:, 1], ref.concentration.reshape(-1, g.nz, g.nx),
                                       g, zl, meta.u_ref, meta.c_ref)
        flux_rows = [[x[i] / meta.h_ref, fp[i], fr[i]] for i in range(len(x))]
        probes = _probes(bundle)
        hist_p = [probe_history(c_p, g, p) for p in probes]
        hist_r = None
        if reference is not None and reference.concentration is not None:
            hist_r = [probe_history(reference.concentration.reshape(-1, g.nz, g.nx)[:horizon], g, p)
                      for p in probes]
        for t in range(horizon):
            row = [t, (t + 1) * dt]
            for j in range(len(probes)):
                row.append(hist_p[j].values[t])
                row.append(hist_r[j].values[t] if hist_r and t < len(hist_r[j].values) else "")
            probe_rows.append(row)
        probe_header = ["step", "lead_time"] + [f"{s}_{j}" for j in range(len(probes))
                                           for s in ("probe_pred", "probe_ref")]
    else:
        probe_header = ["step", "lead_time"]
    put("flux.csv", ["x_over_h", "flux_pred", "flux_ref"], flux_rows)
    put("probes.csv", probe_header, probe_rows)

    write_mean_field(out / "mean_fields.srom", bundle.mean, bundle.geometry, bundle.meta)
    files.append("mean_fields.srom")

    nv = metrics.get("nmse_velocity")
    nc = metrics.get("nmse_concentration")
    summary = {
        "horizon": int(horizon),
        "metrics": {
            "mean_nmse_velocity": None if nv is None else float(np.mean(nv)),
            "max_nmse_velocity": None if nv is None else float(np.max(nv)),
            "mean_nmse_concentration": None if nc is None else float(np.mean(nc)),
            "projection_nmse": bundle.provenance.get("projection_nmse"),
            "ae_field_nmse": bundle.provenance.get("ae_field_nmse"),
            "n_f": bundle.selection.n_f, "n_m": bundle.selection.n_m,
        },
        "config": bundle.config,
        "provenance": {k: v for k, v in bundle.provenance.items() if k != "histories"},
        "files": files,
    }
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
