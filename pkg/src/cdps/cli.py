"""Batch command-line front end.

Every subcommand reads an optional key=value config (``--config``), accepts
``--seed``, ``--out`` and ``--workers``, writes its outputs plus a
``manifest.txt`` into the output directory, and exits with 0 on success, 2
on configuration errors and 3 on numerical divergence (partial outputs are
kept).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, Key, load_config, resolve
from .denoiser import (
    CalibrationTable,
    DenoiserNet,
    TrainConfig,
    TrainingDiverged,
    calibrate,
    default_sigma_grid,
    read_net,
    train,
    write_net,
)
from .forward import (
    LINEAR_NOISE,
    SEISMIC_NOISE,
    SeismicOperator,
    affine_from_stats,
    linear_noise,
    read_wells,
    seismic_noise,
    well_mask,
    write_wells,
)
from .geostat import ChannelTiConfig, generate_ti_realization
from .grid import GridModel, NormStats, denormalize, normalize, read_grid, threshold_facies, write_grid
from .mcmc import PcnConfig, PcnProblem, acf_half_life, edm_generator, run_chains
from .metrics import experimental_variogram, kl_histogram, log_score, morphology_stats, ssim_channels, volume_fraction
from .priors import GaussianPrior, fit_gaussian_prior
from .rng import stream
from .samplers import LikelihoodTerm, SamplerConfig, run_sampler
from .schedule import EdmSchedule

logger = logging.getLogger("cdps")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
FORMATS = {"grid_format": "GRD1", "net_format": "DNW1", "calibration_format": "csv:sigma_t,sigma_x0hat"}


class Diverged(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# Schemas
# --------------------------------------------------------------------------- #

_TI_KEYS = {f.name: Key(type(f.default).__name__, f.default) for f in fields(ChannelTiConfig) if f.name != "seed"}

_MODEL_KEYS = {
    "net": Key("path?", ""),
    "prior": Key("path?", ""),
    "norm_stats": Key("path", ""),
    # Grid size for network models, which do not fix it; 0 infers it from truth=.
    "height": Key("int", 0),
    "width": Key("int", 0),
}

_DATA_KEYS = {
    "truth": Key("path?", ""),
    "wells": Key("ints", ()),
    "well_data": Key("path?", ""),
    "noise_wells": Key("str", "data-noise-1"),
    "seismic": Key("bool", False),
    "seismic_data": Key("path?", ""),
    "noise_seismic": Key("str", "data-noise-3"),
    "seismic_gain": Key("float", 100.0),
    "refresh": Key("int", 1),
}

SCHEMAS = {
    "generate-ti": {"n": Key("int", 10), "audit_max_lag": Key("int", 30), **_TI_KEYS},
    "fit-prior": {"ti_dir": Key("path", ""), "mode": Key("str", "diagonal")},
    "train-denoiser": {
        "ti_dir": Key("path", ""),
        "hidden": Key("int", 64),
        "epochs": Key("int", 20),
        "batch_size": Key("int", 16),
        "step_size": Key("float", 0.02),
        "momentum": Key("float", 0.9),
        "clip_norm": Key("float", 1.0),
        "weighting": Key("str", "relative"),
        "n_train": Key("int", 0),
    },
    "calibrate": {**_MODEL_KEYS, "ti_dir": Key("path", ""), "n_sigma": Key("int", 64), "n_validation": Key("int", 300)},
    "sample": {**_MODEL_KEYS, "n": Key("int", 10), "n_steps": Key("int", 18), "framework": Key("str", "edm"),
               "chunk_size": Key("int", 16)},
    "invert": {
        **_MODEL_KEYS,
        **_DATA_KEYS,
        "calibration": Key("path?", ""),
        "method": Key("str", "cdps"),
        "framework": Key("str", "edm"),
        "n_steps": Key("int", 32),
        "jac_mode": Key("str", "exact"),
        "rho": Key("float?", None),
        "rmse": Key("bool", False),
        "n": Key("int", 10),
        "chunk_size": Key("int", 16),
    },
    "pcn": {
        **_MODEL_KEYS,
        **_DATA_KEYS,
        "mode": Key("str", "direct-gaussian"),
        "beta": Key("float", 0.03),
        "n_iterations": Key("int", 50000),
        "n_chains": Key("int", 3),
        "burn_in": Key("float", 0.5),
        "thin": Key("int", 50),
        "n_steps": Key("int", 18),
        "max_trace_params": Key("int", 16),
    },
    "report": {"samples_dir": Key("path", ""), "truth": Key("path?", ""), "raster_min": Key("float?", None),
               "raster_max": Key("float?", None)},
}


# --------------------------------------------------------------------------- #
# Shared helpers
# --------------------------------------------------------------------------- #


def _write_manifest(out: Path, command: str, seed: int, values: dict, extra: dict | None = None) -> None:
    lines = [f"command={command}", f"seed={seed}", f"version={__version__}"]
    lines += [f"{k}={v}" for k, v in FORMATS.items()]
    for k in sorted(values):
        v = values[k]
        v = ",".join(map(str, v)) if isinstance(v, tuple) else v
        lines.append(f"config.{k}={v}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _num(v) -> str:
    """Shortest round-trip text for a number (ints stay ints)."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _grid_files(directory) -> list:
    files = sorted(Path(directory).glob("*.grd"))
    return files


def _load_grids(directory) -> list:
    return [read_grid(f) for f in _grid_files(directory)]


def write_stats(stats: NormStats, path: Path) -> None:
    lines = ["channel,mean,std"] + [f"{k},{_num(stats.means[k])},{_num(stats.stds[k])}" for k in stats.means]
    path.write_text("\n".join(lines) + "\n")


def read_stats(path) -> NormStats:
    rows = [ln.split(",") for ln in Path(path).read_text().splitlines()[1:] if ln.strip()]
    return NormStats({r[0]: float(r[1]) for r in rows}, {r[0]: float(r[2]) for r in rows})


def _load_prior(directory, names) -> GaussianPrior:
    d = Path(directory)
    mean = read_grid(d / "prior_mean.grd")
    if (d / "prior_cov.npy").exists():
        cov = np.load(d / "prior_cov.npy")
    else:
        cov = read_grid(d / "prior_var.grd").data.ravel()
    return GaussianPrior(mean.data.ravel(), cov, mean.shape)


def _load_model(values):
    stats = read_stats(values["norm_stats"])
    if bool(values["net"]) == bool(values["prior"]):
        raise ConfigError("give exactly one of net= or prior=")
    names = tuple(stats.means)
    model = read_net(values["net"]) if values["net"] else _load_prior(values["prior"], names)
    n_ch = model.n_channels if values["net"] else model.event_shape[0]
    if n_ch != len(names):
        raise ConfigError(f"model has {n_ch} channels but norm_stats lists {len(names)}")
    return model, stats, names


def _build_terms(values, stats, names, shape, seed, out: Path):
    """Likelihood terms from config; data are synthesized from ``truth`` when no data file is given."""
    off, sc = affine_from_stats(stats, names)
    truth = None
    if values["truth"]:
        truth = normalize(read_grid(values["truth"]), stats).data
        if truth.shape != tuple(shape):
            raise ConfigError(f"truth shape {truth.shape} does not match model shape {tuple(shape)}")
    terms = []
    if values["wells"] or values["well_data"]:
        if values["noise_wells"] not in LINEAR_NOISE:
            raise ConfigError(f"unknown noise preset {values['noise_wells']!r}")
        noise = linear_noise(values["noise_wells"])
        if values["well_data"]:
            op, d = read_wells(values["well_data"], shape, names, off, sc)
        else:
            if truth is None:
                raise ConfigError("wells= needs truth= or well_data=")
            op = well_mask(values["wells"], shape, names, offset=off, scale=sc)
            clean = op.forward(truth[None])[0]
            d = clean + noise.stds(clean, op.channels) * stream(seed, 0x3E11).standard_normal(clean.size)
            write_wells(op, d, out / "well_data.csv")
        terms.append(LikelihoodTerm(op, d, noise, name="wells"))
    if values["seismic"]:
        if values["noise_seismic"] not in SEISMIC_NOISE:
            raise ConfigError(f"unknown noise preset {values['noise_seismic']!r}")
        if "impedance" not in names:
            raise ConfigError("seismic needs an impedance channel")
        noise = seismic_noise(values["noise_seismic"])
        op = SeismicOperator(grid_shape=shape, channel=names.index("impedance"), offset=off, scale=sc,
                             gain=values["seismic_gain"])
        if values["seismic_data"]:
            g = read_grid(values["seismic_data"])
            if g.data.shape[1:] != op.data_shape:
                raise ConfigError(f"seismic data shape {g.data.shape[1:]} != {op.data_shape}")
            d = g.data[0].ravel()
        else:
            if truth is None:
                raise ConfigError("seismic=true needs truth= or seismic_data=")
            clean = op.forward(truth[None])[0]
            d = clean + noise.stds(clean) * stream(seed, 0x5E15).standard_normal(clean.size)
            write_grid(GridModel(("seismic",), d.reshape((1,) + op.data_shape)), out / "seismic_data.grd")
        terms.append(LikelihoodTerm(op, d, noise, refresh=values["refresh"], name="seismic"))
    return terms, truth


def _to_grid(x, names, stats) -> GridModel:
    return denormalize(GridModel(tuple(names), x), stats)


def pgm_bytes(image, lo: float, hi: float) -> bytes:
    """Plain (P2) 8-bit PGM with fixed scaling ``[lo, hi] -> [0, 255]``."""
    a = np.asarray(image, dtype=np.float64)
    if hi > lo:
        q = np.clip(np.rint((a - lo) / (hi - lo) * 255.0), 0, 255).astype(int)
    else:
        q = np.full(a.shape, 128, dtype=int)
    rows = [" ".join(map(str, r)) for r in q]
    return ("P2\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + "\n".join(rows) + "\n").encode("ascii")


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_generate_ti(values, seed, out: Path, workers: int) -> dict:
    ti_keys = {k: values[k] for k in _TI_KEYS}
    try:
        cfg = ChannelTiConfig(**ti_keys, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    grids = []
    for i in range(values["n"]):
        try:
            g = generate_ti_realization(cfg, (seed, i))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        write_grid(g, out / f"ti_{i:04d}.grd")
        grids.append(g)
    extra = {"n_written": len(grids)}
    if grids:
        fac = [g.channel("facies") for g in grids]
        ip = np.stack([g.channel("impedance") for g in grids])
        ms = morphology_stats(fac, cfg.cell_size)
        rows = ["metric,value", f"sand_fraction,{_num(np.mean([volume_fraction(f) for f in fac]))}",
                f"n_bodies,{ms['n_bodies']}"]
        for k in ("length", "thickness", "area"):
            rows += [f"{k}_mean,{_num(ms[k][0])}", f"{k}_std,{_num(ms[k][1])}"]
        (out / "audit.csv").write_text("\n".join(rows) + "\n")
        vrows = ["lag_m,semivariance,n_pairs,facies,direction"]
        fmask = np.stack(fac) > 0.5
        lag_cap = {"horizontal": cfg.width - 1, "vertical": cfg.height - 1}
        for label, mask in (("sand", fmask), ("shale", ~fmask)):
            for direction in ("horizontal", "vertical"):
                max_lag = min(values["audit_max_lag"], lag_cap[direction])
                try:
                    lags, gam, npairs = experimental_variogram(ip, direction, max_lag, mask, cfg.cell_size)
                except ValueError:
                    continue
                vrows += [f"{_num(l)},{_num(g)},{n},{label},{direction}" for l, g, n in zip(lags, gam, npairs)]
        (out / "variograms.csv").write_text("\n".join(vrows) + "\n")
    return extra


def cmd_fit_prior(values, seed, out: Path, workers: int) -> dict:
    grids = _load_grids(values["ti_dir"])
    if len(grids) < 2:
        raise ConfigError("need at least two training grids")
    if values["mode"] not in ("diagonal", "dense"):
        raise ConfigError("mode must be diagonal or dense")
    stats = NormStats.from_grids(grids)
    std = [normalize(g, stats) for g in grids]
    prior = fit_gaussian_prior(std, values["mode"])
    names = grids[0].names
    write_stats(stats, out / "norm_stats.csv")
    write_grid(GridModel(names, prior.mean.reshape(grids[0].shape)), out / "prior_mean.grd")
    if prior.is_diagonal:
        write_grid(GridModel(names, np.asarray(prior.cov).reshape(grids[0].shape)), out / "prior_var.grd")
    else:
        np.save(out / "prior_cov.npy", np.asarray(prior.cov))
    return {"n_grids": len(grids), "jitter": prior.jitter}


def cmd_train_denoiser(values, seed, out: Path, workers: int) -> dict:
    grids = _load_grids(values["ti_dir"])
    if values["n_train"]:
        grids = grids[: values["n_train"]]
    if not grids:
        raise ConfigError("no training grids found")
    stats = NormStats.from_grids(grids)
    X = np.stack([normalize(g, stats).data for g in grids])
    try:
        tc = TrainConfig(values["epochs"], values["batch_size"], values["step_size"], values["momentum"],
                         clip_norm=values["clip_norm"], weighting=values["weighting"], seed=seed)
        net = DenoiserNet(X.shape[1], values["hidden"], init_seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        trace = train(net, X, tc)
    except TrainingDiverged as exc:
        raise Diverged(str(exc)) from None
    finally:
        write_stats(stats, out / "norm_stats.csv")
    write_net(net, out / "net.dnw")
    (out / "loss.csv").write_text("step,loss\n" + "".join(f"{i},{_num(v)}\n" for i, v in enumerate(trace)))
    return {"n_params": net.n_params, "final_loss": float(trace[-1]) if trace.size else float("nan")}


def cmd_calibrate(values, seed, out: Path, workers: int) -> dict:
    model, stats, names = _load_model(values)
    grids = _load_grids(values["ti_dir"])[: values["n_validation"]]
    if len(grids) < 2:
        raise ConfigError("need at least two validation grids")
    X = np.stack([normalize(g, stats).data for g in grids])
    table = calibrate(model, X, default_sigma_grid(values["n_sigma"]), seed=seed)
    table.to_csv(out / "calibration.csv")
    return {"n_validation": len(grids)}


def _sample_outputs(res, names, stats, out: Path) -> None:
    for i, x in enumerate(res.samples):
        if not res.diverged[i]:
            write_grid(_to_grid(x, names, stats), out / f"sample_{i:04d}.grd")


def cmd_sample(values, seed, out: Path, workers: int) -> dict:
    model, stats, names = _load_model(values)
    try:
        cfg = SamplerConfig(values["framework"], "unconditional", values["n_steps"], seed=seed,
                            chunk_size=values["chunk_size"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    shape = (len(names),) + _spatial_shape(model, stats, values)
    res = run_sampler(model, cfg, values["n"], workers=workers, shape=shape)
    _sample_outputs(res, names, stats, out)
    if res.diverged.any():
        raise Diverged(f"{int(res.diverged.sum())} sample(s) diverged")
    return {"n_samples": values["n"]}


def _spatial_shape(model, stats, values):
    es = getattr(model, "event_shape", None)
    if es:
        return tuple(es)[1:]
    if values["height"] > 0 and values["width"] > 0:
        return (values["height"], values["width"])
    if values.get("truth"):
        return read_grid(values["truth"]).shape[1:]
    raise ConfigError("cannot infer grid size for a network model; give height= and width= or truth=")


def cmd_invert(values, seed, out: Path, workers: int) -> dict:
    model, stats, names = _load_model(values)
    shape = (len(names),) + _spatial_shape(model, stats, values)
    if values["method"] == "unconditional":
        terms = []
        truth = normalize(read_grid(values["truth"]), stats).data if values["truth"] else None
    else:
        terms, truth = _build_terms(values, stats, names, shape, seed, out)
    calib = None
    if values["method"] == "cdps" and terms:
        if not values["calibration"]:
            raise ConfigError("method=cdps needs calibration=")
        calib = CalibrationTable.from_csv(values["calibration"])
    try:
        cfg = SamplerConfig(values["framework"], values["method"], values["n_steps"], values["jac_mode"],
                            values["rho"], values["rmse"], seed, values["chunk_size"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res = run_sampler(model, cfg, values["n"], terms, calib, workers=workers, shape=shape)
    _sample_outputs(res, names, stats, out)
    rows = ["sample,step,term,wrmse"]
    for i in range(res.trajectory.shape[0]):
        for s in range(res.trajectory.shape[1]):
            for j, t in enumerate(terms):
                rows.append(f"{i},{s},{t.name},{_num(res.trajectory[i, s, j])}")
    (out / "wrmse.csv").write_text("\n".join(rows) + "\n")
    ok = res.samples[~res.diverged]
    metrics = {"n_samples": values["n"], "n_diverged": int(res.diverged.sum())}
    for j, t in enumerate(terms):
        metrics[f"converged_fraction.{t.name}"] = float(np.mean(res.wrmse[:, j] <= 1.1)) if values["n"] else 0.0
    if len(ok):
        write_grid(_to_grid(ok.mean(axis=0), names, stats), out / "mean.grd")
        write_grid(GridModel(tuple(names), ok.std(axis=0) * stats.vectors(names)[1]), out / "std.grd")
        if truth is not None:
            metrics.update(_truth_metrics(ok, truth, names))
    (out / "metrics.csv").write_text("metric,value\n" + "".join(f"{k},{_num(v)}\n" for k, v in metrics.items()))
    if res.diverged.any():
        raise Diverged(f"{int(res.diverged.sum())} sample(s) diverged")
    return metrics


def _truth_metrics(samples, truth, names) -> dict:
    out = {}
    mean = samples.mean(axis=0)
    for name, v in zip(names, ssim_channels(mean, truth)):
        out[f"ssim.{name}"] = float(v)
    if samples.shape[0] >= 2:
        out["logs"] = log_score(samples, truth)
    return out


def cmd_pcn(values, seed, out: Path, workers: int) -> dict:
    model, stats, names = _load_model(values)
    shape = (len(names),) + _spatial_shape(model, stats, values)
    terms, truth = _build_terms(values, stats, names, shape, seed, out)
    if not terms:
        raise ConfigError("pcn needs at least one data term")
    try:
        cfg = PcnConfig(values["beta"], values["n_iterations"], values["n_chains"], values["burn_in"],
                        values["thin"], values["mode"], seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def loglik(x):
        xs = np.asarray(x).reshape((1,) + shape)
        tot = 0.0
        for t in terms:
            tot += -0.5 * float(np.sum(((t.operator.forward(xs)[0] - t.data) / t.sigma_d) ** 2))
        return tot

    d = int(np.prod(shape))
    if cfg.mode == "direct-gaussian":
        if not isinstance(model, GaussianPrior):
            raise ConfigError("direct-gaussian mode needs prior=")
        problem = PcnProblem.from_gaussian(model, loglik)
    else:
        gen = edm_generator(model, EdmSchedule(values["n_steps"]), shape)
        problem = PcnProblem(loglik, d, generator=gen)
    res = run_chains(cfg, problem, workers=workers)
    k = min(values["max_trace_params"], d)
    params = np.unique(np.linspace(0, d - 1, k).astype(int)) if k else np.array([], dtype=int)
    start = int(cfg.burn_in * cfg.n_iterations)
    rows = ["chain,iteration,parameter,value"]
    for c in range(res.samples.shape[0]):
        for s in range(res.samples.shape[1]):
            it = start + s * cfg.thin
            rows += [f"{c},{it},{p},{_num(res.samples[c, s, p])}" for p in params]
    (out / "traces.csv").write_text("\n".join(rows) + "\n")
    drows = ["parameter,rhat,acf_half_life"]
    drows += [f"{p},{_num(res.rhat[p])},{acf_half_life(res.acf[p])}" for p in range(d)]
    (out / "diagnostics.csv").write_text("\n".join(drows) + "\n")
    flat = res.samples.reshape(-1, d)
    write_grid(_to_grid(flat.mean(axis=0).reshape(shape), names, stats), out / "mean.grd")
    write_grid(GridModel(tuple(names), flat.std(axis=0).reshape(shape) * stats.vectors(names)[1]), out / "std.grd")
    return {"acceptance": ",".join(f"{a:.4f}" for a in res.acceptance), "max_rhat": float(np.nanmax(res.rhat))}


def cmd_report(values, seed, out: Path, workers: int) -> dict:
    files = sorted(Path(values["samples_dir"]).glob("sample_*.grd"))
    if not files:
        raise ConfigError(f"no sample_*.grd files in {values['samples_dir']}")
    grids = [read_grid(f) for f in files]
    names = grids[0].names
    X = np.stack([g.data for g in grids])
    mean, std = X.mean(axis=0), X.std(axis=0)
    write_grid(GridModel(names, mean), out / "mean.grd")
    write_grid(GridModel(names, std), out / "std.grd")
    extra = {}
    for c, name in enumerate(names):
        for label, img in (("mean", mean[c]), ("std", std[c])):
            lo = values["raster_min"] if values["raster_min"] is not None else float(img.min())
            hi = values["raster_max"] if values["raster_max"] is not None else float(img.max())
            (out / f"{label}_{name}.pgm").write_bytes(pgm_bytes(img, lo, hi))
            extra[f"raster.{label}_{name}"] = f"{_num(lo)},{_num(hi)}"
    rows = {"n_samples": len(grids)}
    if "facies" in names:
        fac = np.stack([threshold_facies(g).channel("facies") for g in grids])
        rows["sand_fraction"] = float(fac.mean())
    if values["truth"]:
        truth = read_grid(values["truth"])
        if truth.shape != grids[0].shape:
            raise ConfigError("truth shape does not match the samples")
        for name, v in zip(names, ssim_channels(mean, truth.data)):
            rows[f"ssim.{name}"] = float(v)
        for c, name in enumerate(names):
            rows[f"kl.{name}"] = kl_histogram(X[:, c], truth.data[c])
        if len(grids) >= 2:
            rows["logs"] = log_score(X, truth.data)
    (out / "metrics.csv").write_text("metric,value\n" + "".join(f"{k},{_num(v)}\n" for k, v in rows.items()))
    return extra


COMMANDS = {
    "generate-ti": cmd_generate_ti,
    "fit-prior": cmd_fit_prior,
    "train-denoiser": cmd_train_denoiser,
    "calibrate": cmd_calibrate,
    "sample": cmd_sample,
    "invert": cmd_invert,
    "pcn": cmd_pcn,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdps", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument("--workers", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        raw = load_config(args.config) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        values = resolve(SCHEMAS[args.command], raw, args.command, COMMANDS)
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](values, args.seed, out, args.workers) or {}
        _write_manifest(out, args.command, args.seed, values, {**extra, "status": "ok"})
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Diverged, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        if out.is_dir():
            _write_manifest(out, args.command, args.seed, values, {"status": "diverged"})
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
