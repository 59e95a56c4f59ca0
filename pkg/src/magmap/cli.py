"""``magmap`` command line.

Every subcommand reads files, writes files and exits with

    0  success
    1  validation or consistency failure under ``--strict``
    2  bad input (missing file, malformed CSV/JSON, invalid option)

JSON outputs are written with sorted keys and carry a ``provenance`` block
(tool version, seed, SHA-256 of every input file, flight ids). They hold no
timestamps, so identical inputs give byte-identical files. CSV outputs get a
``<name>.meta.json`` sidecar with the same block. All writes go to a
temporary file that is then renamed over the target.

``--config run.json`` supplies option values by their long names
(``{"grid": "0.5,0.5,0.25", "threshold": 0.96}``); config values take
precedence over command-line flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from magmap import __version__
from magmap.calibration import CalibrationConfig, CalibrationError, calibrate
from magmap.calibration import load_calibration
from magmap.evaluation import (compare_norm_maps, consistency_check, density_sweep, format_density_table,
                               format_norm_table, format_validation_table, validate, write_residuals)
from magmap.gp import GPError, OptimizerConfig
from magmap.ingest import (LogFormatError, median_filter, merge_observations, preprocess, read_flight_log,
                           read_observations, write_flight_log, write_observations)
from magmap.mapping import (GridSpec, NormFieldMap, VectorFieldMap, build_compromise, build_intermediate,
                            build_norm_map, compress_norm_map, generate_grid, map_from_dict, map_to_dict)
from magmap.sim import load_scenario

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
DENSITY_SPACINGS = tuple(round(0.2 + 0.05 * k, 2) for k in range(17))


class InputError(Exception):
    """Bad user input; reported on stderr with exit status 2."""


# --------------------------------------------------------------------------
# files and provenance


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, write) -> None:
    """Call ``write(tmp_path)`` then rename the temporary file onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, payload) -> None:
    text = dumps(payload)

    def _w(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)

    _atomic_write(path, _w)


def provenance(args, inputs, flight_ids=()) -> dict:
    return {
        "tool": "magmap",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "flight_ids": list(flight_ids),
    }


def write_csv_with_meta(path, writer, obj, prov) -> None:
    _atomic_write(path, lambda tmp: writer(obj, tmp))
    write_json(f"{path}.meta.json", {"provenance": prov})


def _read_json(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: line {exc.lineno}: column {exc.colno}: {exc.msg}") from None


def load_map_file(path):
    d = _read_json(path)
    try:
        return map_from_dict(d)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _obs_sources(path) -> tuple[str, ...]:
    """Flight ids recorded in a CSV's sidecar, else the file stem."""
    meta = Path(f"{path}.meta.json")
    if meta.exists():
        ids = _read_json(meta).get("provenance", {}).get("flight_ids")
        if ids:
            return tuple(ids)
    return (Path(path).stem,)


def read_obs_files(paths):
    return [read_observations(p, _obs_sources(p)) for p in paths]


# --------------------------------------------------------------------------
# option parsing helpers


def parse_grid(text) -> tuple[float, float, float]:
    if isinstance(text, (int, float)):
        vals = [float(text)]
    elif isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",")]
        except ValueError:
            raise InputError(f"--grid: expected 'S' or 'Sx,Sy,Sz', got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or not all(np.isfinite(v) and v > 0 for v in vals):
        raise InputError(f"--grid: expected one or three positive spacings, got {text!r}")
    return tuple(vals)


def parse_spacings(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise InputError(f"--spacings: not a comma-separated list of numbers: {text!r}") from None


def apply_config(args) -> None:
    if not getattr(args, "config", None):
        return
    cfg = _read_json(args.config)
    if not isinstance(cfg, dict):
        raise InputError(f"{args.config}: top level must be an object")
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise InputError(f"{args.config}: field {key!r}: not an option of 'magmap {args.command}'")
        setattr(args, dest, value)


def check_inputs(paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).is_file()]
    if missing:
        raise InputError("input file(s) not found: " + ", ".join(missing))


def _as_list(v):
    if v is None:
        return []
    return [v] if isinstance(v, (str, os.PathLike)) else list(v)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    check_inputs([args.scenario])
    try:
        scenario = load_scenario(args.scenario)
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.scenario}: line {exc.lineno}: column {exc.colno}: {exc.msg}") from None
    except KeyError as exc:
        raise InputError(f"{args.scenario}: missing field {exc}") from None
    if args.seed is not None:
        scenario.seed = int(args.seed)
    else:
        args.seed = scenario.seed
    if args.id:
        scenario.id = args.id
    log = scenario.run()
    prov = provenance(args, [args.scenario], [log.id])
    write_csv_with_meta(args.out, write_flight_log, log, prov)
    print(f"{log.id}: {len(log.mags)} samples, {len(log.poses)} poses -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    check_inputs([args.input])
    log = read_flight_log(args.input, _obs_sources(args.input)[0])
    filtered = median_filter(log.mags, args.window)
    config = CalibrationConfig(reference_norm=float(args.bref))
    result = calibrate(filtered.field_body, config)
    result.notes.append(f"median filter, window {args.window}, applied before fitting")
    payload = result.to_dict()
    payload["reference_norm_uT"] = float(args.bref)
    payload["provenance"] = provenance(args, [args.input], [log.id])
    write_json(args.out, payload)
    p = result.params
    print(f"bias {np.round(p.bias, 4).tolist()} uT, scale {np.round(p.scale, 5).tolist()}, "
          f"angles {np.round(p.nonorth, 5).tolist()} rad; norm RMS {result.norm_rms:.4f} uT -> {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    check_inputs([args.input, args.calib])
    log = read_flight_log(args.input, args.id or _obs_sources(args.input)[0])
    calib = load_calibration(args.calib) if args.calib else None
    obs = preprocess(log, float(args.rate), calib, window=args.window, max_age=args.max_age)
    inputs = [args.input] + ([args.calib] if args.calib else [])
    prov = provenance(args, inputs, [log.id])
    prov["rate_hz"] = float(args.rate)
    write_csv_with_meta(args.out, write_observations, obs, prov)
    print(f"{log.id}: {len(obs)} observations at {args.rate} Hz -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    inputs = _as_list(args.input)
    check_inputs(inputs)
    obs = merge_observations(read_obs_files(inputs))
    config = OptimizerConfig(noise_everywhere=bool(args.noise_everywhere))
    if args.norm:
        fmap = build_norm_map(obs, config=config)
    else:
        fmap = build_intermediate(obs, config, workers=args.workers)
    fmap.provenance.update(provenance(args, inputs, obs.sources))
    write_json(args.out, map_to_dict(fmap))
    hps = [fmap.component.hyperparams] if isinstance(fmap, NormFieldMap) else fmap.hyperparams
    for hp in hps:
        print(f"sigma_f {hp.sigma_f:.4f} uT  l {hp.length_scale:.4f} m  sigma_n {hp.sigma_n:.4f} uT")
    print(f"{fmap.kind} map on {len(obs)} observations -> {args.out}")
    return EXIT_OK


def cmd_compress(args) -> int:
    check_inputs([args.map])
    inter = load_map_file(args.map)
    if inter.kind == "compromise":
        raise InputError(f"{args.map}: already a compromise map")
    spec = GridSpec(spacing=parse_grid(args.grid))
    grid = generate_grid(spec)
    if isinstance(inter, NormFieldMap):
        comp = compress_norm_map(inter, grid, spec)
    else:
        comp = build_compromise(inter, grid, spec)
    comp.provenance.update(provenance(args, [args.map], comp.provenance.get("source_flights", ())))
    comp.provenance["command"] = "compress"
    write_json(args.out, map_to_dict(comp))
    print(f"compromise map with n1 = {len(comp)} grid points -> {args.out}")
    return EXIT_OK


def _named_sets(paths):
    return [("+".join(s.sources), s) for s in read_obs_files(paths)]


def cmd_validate(args) -> int:
    paths = _as_list(args.input)
    check_inputs([args.map] + paths)
    fmap = load_map_file(args.map)
    if not isinstance(fmap, VectorFieldMap):
        raise InputError(f"{args.map}: validate expects a vector map")
    rows, payload = [], {}
    ok = True
    for (name, obs), path in zip(_named_sets(paths), paths):
        rep = validate(fmap, obs)
        rows.append((name, rep))
        payload[name] = rep.to_dict()
        ok &= bool(np.all(rep.capture >= args.threshold))
        if args.residuals:
            out = Path(args.residuals)
            target = out if len(paths) == 1 else out.with_name(f"{out.stem}_{name}{out.suffix}")
            _atomic_write(target, lambda tmp, r=rep, o=obs: write_residuals(r, o, tmp))
    print(format_validation_table(rows))
    if args.out:
        write_json(args.out, {"map_kind": fmap.kind, "threshold": args.threshold, "flights": payload,
                              "all_consistent": ok,
                              "provenance": provenance(args, [args.map] + paths,
                                                       [n for n, _ in rows])})
    return EXIT_FAIL if (args.strict and not ok) else EXIT_OK


def cmd_consistency(args) -> int:
    paths = _as_list(args.input)
    check_inputs([args.map] + paths)
    fmap = load_map_file(args.map)
    flagged_any = False
    payload = {}
    for name, obs in _named_sets(paths):
        rep = consistency_check(fmap, obs, float(args.threshold), int(args.window), int(args.stride))
        payload[name] = rep.to_dict()
        flagged_any |= rep.flagged
        cap = " ".join(f"{100 * c:6.2f}" for c in rep.capture)
        bad = rep.failing_segments
        seg = f"; failing segments: {', '.join(f'{s.start}-{s.stop}' for s in bad)}" if bad else ""
        verdict = "INCONSISTENT" if rep.flagged else "consistent"
        print(f"{name:<24} capture% {cap}  {verdict}{seg}")
    if args.out:
        write_json(args.out, {"threshold": float(args.threshold), "window": int(args.window),
                              "stride": int(args.stride), "flights": payload, "flagged": flagged_any,
                              "provenance": provenance(args, [args.map] + paths, list(payload))})
    return EXIT_FAIL if (args.strict and flagged_any) else EXIT_OK


def cmd_density_sweep(args) -> int:
    paths = _as_list(args.input)
    check_inputs([args.map] + paths)
    inter = load_map_file(args.map)
    if not isinstance(inter, VectorFieldMap) or inter.kind == "compromise":
        raise InputError(f"{args.map}: density-sweep expects an intermediate vector map")
    sets = read_obs_files(paths)
    names = ["+".join(s.sources) for s in sets]
    res = density_sweep(inter, parse_spacings(args.spacings), sets, names=names)
    print(format_density_table(res))
    if args.out:
        payload = res.to_dict()
        payload["provenance"] = provenance(args, [args.map] + paths, names)
        write_json(args.out, payload)
    return EXIT_OK


def cmd_norm_compare(args) -> int:
    paths = _as_list(args.input)
    check_inputs([args.map, args.norm_map] + paths)
    vec, nrm = load_map_file(args.map), load_map_file(args.norm_map)
    if not isinstance(vec, VectorFieldMap) or not isinstance(nrm, NormFieldMap):
        raise InputError("norm-compare expects --map to be a vector map and --norm-map a norm map")
    rows = []
    for name, obs in _named_sets(paths):
        a, b = compare_norm_maps(vec, nrm, obs)
        rows.append((name, a, b))
    print(format_norm_table(rows))
    if args.out:
        write_json(args.out, {"flights": {n: {"rmse_vec_norm_uT": a, "rmse_norm_map_uT": b, "difference_uT": a - b}
                                          for n, a, b in rows},
                              "provenance": provenance(args, [args.map, args.norm_map] + paths,
                                                       [n for n, _, _ in rows])})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magmap", description="GPR magnetic-field mapping pipeline")
    parser.add_argument("--version", action="version", version=f"magmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file of option values; overrides flags")
        p.add_argument("--seed", type=int, default=None if name == "simulate" else 0,
                       help="random seed, recorded in every output")
        return p

    p = add("simulate", cmd_simulate, "simulate one flight log from a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--id", help="flight id (tY_XX); defaults to the scenario's")
    p.add_argument("--out", required=True)

    p = add("calibrate", cmd_calibrate, "fit the magnetometer model to a calibration log")
    p.add_argument("--input", required=True)
    p.add_argument("--bref", type=float, default=CalibrationConfig.reference_norm,
                   help="reference field magnitude, uT")
    p.add_argument("--window", type=int, default=5, help="median filter window")
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, "filter, downsample and rotate a flight log to world frame")
    p.add_argument("--input", required=True)
    p.add_argument("--calib")
    p.add_argument("--rate", type=float, default=2.0, help="output rate, Hz")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--max-age", type=float, default=0.05, help="stale pose threshold, s")
    p.add_argument("--id", help="flight id; defaults to the file stem")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "optimise hyperparameters and build an intermediate map")
    p.add_argument("--input", nargs="+", required=True, help="observation CSVs")
    p.add_argument("--norm", action="store_true", help="build a norm (3->1) map instead")
    p.add_argument("--noise-everywhere", action="store_true",
                   help="add the noise variance to every kernel evaluation")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("compress", cmd_compress, "build a compromise map on a grid")
    p.add_argument("--map", required=True)
    p.add_argument("--grid", default="0.5,0.5,0.25", help="'S' or 'Sx,Sy,Sz' in m")
    p.add_argument("--out", required=True)

    p = add("validate", cmd_validate, "RMSE and 2-sigma capture on validation flights")
    p.add_argument("--map", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.96)
    p.add_argument("--strict", action="store_true", help="exit 1 if any capture is below threshold")
    p.add_argument("--residuals", help="CSV of per-point residuals and SDs")
    p.add_argument("--out")

    p = add("consistency", cmd_consistency, "whole-flight and windowed consistency verdicts")
    p.add_argument("--map", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.96)
    p.add_argument("--window", type=int, default=200)
    p.add_argument("--stride", type=int, default=50)
    p.add_argument("--strict", action="store_true", help="exit 1 if any flight is flagged")
    p.add_argument("--out")

    p = add("density-sweep", cmd_density_sweep, "compromise RMSE against grid spacing")
    p.add_argument("--map", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--spacings", default=",".join(str(s) for s in DENSITY_SPACINGS))
    p.add_argument("--out")

    p = add("norm-compare", cmd_norm_compare, "vector-map norm against a norm map")
    p.add_argument("--map", required=True)
    p.add_argument("--norm-map", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config(args)
        return args.func(args)
    except (InputError, LogFormatError, OSError, ValueError, KeyError, CalibrationError, GPError) as exc:
        print(f"magmap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
