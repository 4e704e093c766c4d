"""Command-line entry points, one subcommand per stage plus the full pipeline."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import SpodromError

log = logging.getLogger("spodrom")


def _json(path):
    return json.loads(Path(path).read_text()) if path else {}


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_data(path, args):
    from .dataset import load_snapshots
    return load_snapshots(path, tuple(args.origin), args.h_ref)


def cmd_synth(args):
    from .dataset import SynthConfig, synthesize_flow, write_snapshots
    from .pipeline import default_config, merge_config
    cfg = _json(args.config)
    # partial sections fill in from the desk defaults
    cfg = merge_config(default_config()["synth"], cfg.get("synth", cfg))
    data = synthesize_flow(SynthConfig.from_dict(cfg), args.seed or 0)
    write_snapshots(args.out, data)
    print(f"wrote {data.n_t} snapshots on a {data.geometry.nx}x{data.geometry.nz} grid to {args.out}")


def cmd_spod(args):
    from .dataset import compute_fluctuations
    from .pipeline import _write_csv
    from .spod import SpodParams, compute_spod, spectrum_table, write_basis
    data = _load_data(args.data, args)
    fluct, _ = compute_fluctuations(data)
    basis = compute_spod(fluct, SpodParams(args.nfft, args.novlp, args.window))
    write_basis(args.out, basis)
    if args.spectrum:
        header, rows = spectrum_table(basis, data.meta.h_ref, data.meta.u_ref)
        _write_csv(args.spectrum, header, rows)
    print(f"n_blk={basis.n_blk} n_fc={basis.n_fc} -> {args.out}")


def cmd_prune(args):
    from .pipeline import _write_csv
    from .pruning import pruning_sensitivity, select_modes, write_selection
    from .spod import load_basis
    basis = load_basis(args.basis)
    sel = select_modes(basis, args.eps_ric, args.eps_gamma)
    write_selection(args.out, sel)
    if args.sensitivity:
        if not args.data:
            raise SystemExit("--sensitivity needs --data for the reconstruction error")
        from .dataset import compute_fluctuations
        fluct, _ = compute_fluctuations(_load_data(args.data, args))
        grid = [float(g) for g in args.grid.split(",")]
        rows = pruning_sensitivity(basis, fluct, grid, args.eps_ric)
        _write_csv(args.sensitivity, ["eps_gamma", "n_m", "tke_fraction", "nmse"],
                   [[r["eps_gamma"], r["n_m"], r["tke_fraction"], r["nmse"]] for r in rows])
    print(f"n_f={sel.n_f} n_m={sel.n_m} -> {args.out}")


def cmd_project(args):
    from .dataset import compute_fluctuations, load_mean_field
    from .projection import project_coefficients, write_coefficients
    from .pruning import load_selection
    from .spod import load_basis
    basis = load_basis(args.basis)
    data = _load_data(args.data, args)
    mean = load_mean_field(args.mean) if args.mean else None
    fluct, _ = compute_fluctuations(data, mean)
    sel = load_selection(args.selection) if args.selection else None
    coeffs = project_coefficients(basis, sel, fluct)
    write_coefficients(args.out, coeffs)
    print(f"{coeffs.n_m} modes x {coeffs.n_t} steps -> {args.out}")


def _section(args, name):
    from .pipeline import default_config, merge_config
    return merge_config(default_config()[name], _json(args.config))


def cmd_train_ae(args):
    from .autoencoder import train_complex_autoencoder, write_autoencoder
    from .forecaster import write_latent
    from .pipeline import ae_config
    from .projection import load_coefficients
    coeffs = load_coefficients(args.coeffs)
    sec = _section(args, "autoencoder")
    if args.nz is not None:
        sec["latent_size"] = args.nz
    seed = args.seed or 0
    ae, _ = train_complex_autoencoder(coeffs.values, ae_config(sec, seed), seed=seed)
    write_autoencoder(args.out, ae)
    if args.latent_out:
        write_latent(args.latent_out, ae.encode(coeffs.values).values)
    print(f"n_m={ae.n_m} n_z={ae.latent_size} -> {args.out}")


def _channel(latent, name):
    return latent.real if name == "re" else latent.imag


def cmd_search_lstm(args):
    from .forecaster import load_latent, random_search
    from .pipeline import TRIALS_HEADER, _write_csv
    latent = load_latent(args.latent)
    best, rows = random_search(_channel(latent, args.channel), _json(args.space), args.trials,
                               args.epochs, args.seed or 0, args.n_t_in)
    _write_csv(args.out, TRIALS_HEADER,
               [[r["trial"], r["n_hidden"], r["batch_size"], r["learning_rate"], r["val_loss"]]
                for r in rows])
    print(json.dumps(best.to_dict()))


def cmd_train_lstm(args):
    from .forecaster import load_latent, train_complex_forecaster, write_forecaster
    from .pipeline import lstm_config
    latent = load_latent(args.latent)
    raw = _json(args.config)
    seed = args.seed or 0
    sec = _section(args, "lstm") if "re" not in raw else raw["re"]
    cfg_re = lstm_config(sec, seed)
    cfg_im = lstm_config(raw["im"], seed) if "im" in raw else None
    fc, _ = train_complex_forecaster(latent, cfg_re, cfg_im, seed=seed)
    write_forecaster(args.out, fc)
    print(f"n_z={fc.re.n_z} -> {args.out}")


def cmd_train_cnn(args):
    from .pipeline import cnn_config
    from .scalar_map import train_cnn, write_scalar_map
    data = _load_data(args.data, args)
    seed = args.seed or 0
    cfg, _, stride = cnn_config(_section(args, "cnn"), seed)
    if data.concentration is None:
        raise ValueError(f"{args.data} carries no concentration field")
    model, _ = train_cnn(data.frames()[::stride], data.concentration_frames()[::stride],
                         cfg, data.geometry.mask, seed=seed)
    write_scalar_map(args.out, model)
    print(f"channels={model.config.channels} -> {args.out}")


def cmd_map(args):
    from .dataset import SnapshotDataset, write_snapshots
    from .scalar_map import load_scalar_map, map_concentration
    model = load_scalar_map(args.cnn)
    vel = _load_data(args.velocity, args)
    conc = map_concentration(model, vel.frames()).reshape(vel.n_t, -1)
    write_snapshots(args.out, SnapshotDataset(vel.geometry, vel.meta, vel.velocity, conc))
    print(f"mapped {vel.n_t} frames -> {args.out}")


def _master(args):
    from .pipeline import default_config, merge_config
    cfg = merge_config(default_config(), _json(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def cmd_offline(args):
    from .pipeline import run_offline
    cfg = _master(args)
    bundle = run_offline(args.data, cfg, args.out, force=args.force)
    print(bundle.path)


def _window_and_reference(args, bundle):
    from .dataset import load_snapshots
    geo = bundle.geometry
    data = load_snapshots(args.data, geo.origin, bundle.meta.h_ref)
    start = args.start
    n_in = bundle.n_t_in
    if start < 0:
        start = data.n_t + start
    window = data.subset(start, start + n_in)
    stop = min(data.n_t, start + n_in + args.horizon)
    ref = data.subset(start + n_in, stop) if stop > start + n_in else None
    return window, ref


def cmd_predict(args):
    from .dataset import write_snapshots
    from .pipeline import load_bundle, run_online
    bundle = load_bundle(args.bundle)
    window, ref = _window_and_reference(args, bundle)
    res = run_online(bundle, window, args.horizon, ref if args.compare else None)
    out = res.velocity if res.velocity is not None else res.init_reconstruction
    write_snapshots(args.out, out)
    if args.reference_out and ref is not None:
        write_snapshots(args.reference_out, ref)
    if res.metrics:
        nv = res.metrics["nmse_velocity"]
        print(f"mean velocity NMSE {np.mean(nv):.4g}, max {np.max(nv):.4g}")
    print(f"{out.n_t} predicted snapshots -> {args.out}")


def cmd_report(args):
    from .pipeline import emit_report, load_bundle
    bundle = load_bundle(args.bundle)
    geo = bundle.geometry
    from .dataset import load_snapshots
    pred = load_snapshots(args.prediction, geo.origin, bundle.meta.h_ref)
    ref = load_snapshots(args.reference, geo.origin, bundle.meta.h_ref) if args.reference else None
    summary = emit_report(bundle, pred, args.out, ref)
    print(json.dumps(summary["metrics"], indent=1))


def build_parser():
    p = argparse.ArgumentParser(prog="spodrom", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread limit; 1 gives bit-reproducible runs")
    p.add_argument("--origin", type=float, nargs=2, default=(0.0, 0.0),
                   help="physical (x, z) of the first grid cell (not stored in SROM files)")
    p.add_argument("--h-ref", type=float, default=1.0, help="reference length")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic planted-tone dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("spod", help="compute the SPOD basis of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--nfft", type=int, required=True)
    s.add_argument("--novlp", type=int, required=True)
    s.add_argument("--window", default="hamming", choices=["hamming", "hann", "rectangular"])
    s.add_argument("--out", required=True)
    s.add_argument("--spectrum")
    s.set_defaults(func=cmd_spod)

    s = sub.add_parser("prune", help="select frequencies and deduplicate modes")
    s.add_argument("--basis", required=True)
    s.add_argument("--eps-ric", type=float, default=0.99)
    s.add_argument("--eps-gamma", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.add_argument("--sensitivity")
    s.add_argument("--data")
    s.add_argument("--grid", default="0.1,0.2,0.3,0.5,0.7,1.0")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("project", help="time coefficients of a dataset on a basis")
    s.add_argument("--basis", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--selection")
    s.add_argument("--mean")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("train-ae", help="train the real/imaginary autoencoders")
    s.add_argument("--coeffs", required=True)
    s.add_argument("--nz", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--latent-out")
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("search-lstm", help="random hyperparameter search")
    s.add_argument("--latent", required=True)
    s.add_argument("--space", required=True)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--channel", choices=["re", "im"], default="re")
    s.add_argument("--n-t-in", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search_lstm)

    s = sub.add_parser("train-lstm", help="train the latent forecasters")
    s.add_argument("--latent", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_lstm)

    s = sub.add_parser("train-cnn", help="train the velocity-to-concentration map")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_cnn)

    s = sub.add_parser("map", help="apply a trained concentration map")
    s.add_argument("--cnn", required=True)
    s.add_argument("--velocity", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("offline", help="run every training stage into a bundle")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_offline)

    s = sub.add_parser("predict", help="forecast from a window of a dataset")
    s.add_argument("--bundle", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--start", type=int, default=0, help="first snapshot of the init window")
    s.add_argument("--horizon", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--compare", action="store_true", help="score against the true continuation")
    s.add_argument("--reference-out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", help="write CSV tables and a summary")
    s.add_argument("--bundle", required=True)
    s.add_argument("--prediction", required=True)
    s.add_argument("--reference")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            args.func(args)
    except (SpodromError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
