"""``qdmkit`` command line: synth, reduce, fit, stress, biref, stats.

Every subcommand computes all of its outputs in memory, writes each file
atomically, and finishes with ``manifest.json``. Failures print one JSON
line ``{"error": <category>, "message": ...}`` to stderr and exit with the
category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datacube import DataCube, MapImage, RawStack, SweepAxis, contrast_reduce, visibility_reduce
from .diagnostics import histogram_csv, histogram_stats, percentile_report, stats_csv, to_pgm
from .errors import (DataError, FitError, ModelMismatchError, ParameterError, QDCFormatError,
                     QDMError)
from .fitengine import FitOptions, find_odmr_peaks, fit_cube, fit_odmr_cube, fit_t1_two_stage, seed_by_dicing
from .models import HYPERFINE_14N_MHZ, RAMSEY_DETUNING_MHZ, ModelSpec
from .physics import (DEFAULT_PAIRING, ZERO_FIELD_SPLITTING_MHZ, BirefOptics, SpinStressConstants,
                      analyze_birefringence, lineshifts_from_centers, stress_tensor)
from .qdc import atomic_write_bytes, load_qdc, to_bytes
from .synth import (RNG_ALGORITHM, TruthMaps, generate_biref_stack, generate_cube,
                    generate_odmr_scene, gradient_map, stress_channel)

logger = logging.getLogger("qdmkit")

EXIT_CODES = {"usage": 2, "format": 3, "mismatch": 4, "fit": 5, "data": 6, "parameter": 6,
              "io": 7, "error": 1}

MODEL_NAMES = {"odmr": "odmr_triplet", "rabi": "rabi", "ramsey": "ramsey", "hahn": "hahn", "t1": "t1"}

SYNTH_DEFAULTS = {
    "rabi": ({"A": "0.04", "f": "0.8:1.2", "kappa": "0.5"}, "time_us", (0.0, 3.0)),
    "ramsey": ({"A_m1": "0.1", "A_0": "0.1", "A_p1": "0.1", "kappa": "0.6:1.2"}, "time_us", (0.0, 2.0)),
    "hahn": ({"A": "0.1", "kappa": "0.15:0.25"}, "time_us", (0.0, 15.0)),
    "t1": ({"A": "0.05", "kappa": "0.25:0.35"}, "time_ms", (0.01, 10.0)),
    "biref": ({"phi": "0:179", "sin_delta": "0.1:0.9", "I0": "2"}, "angle_deg", (0.0, 170.0)),
}


class _Outputs:
    """Collects output blobs so nothing is written until everything is computed."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.blobs = {}

    def add(self, name, blob):
        self.blobs[name] = blob if isinstance(blob, bytes) else blob.encode()

    def add_qdc(self, name, obj):
        self.add(name, to_bytes(obj))

    def add_json(self, name, doc):
        self.add(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def commit(self, manifest):
        self.dir.mkdir(parents=True, exist_ok=True)
        for name, blob in sorted(self.blobs.items()):
            atomic_write_bytes(self.dir / name, blob)
        manifest["outputs"] = {n: hashlib.sha256(b).hexdigest() for n, b in sorted(self.blobs.items())}
        atomic_write_bytes(self.dir / "manifest.json",
                           (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _manifest(args, constants=None, **extra):
    opts = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {"tool": "qdmkit", "version": __version__, "subcommand": args.command,
           "options": opts, "constants": constants or {}, "seed": getattr(args, "seed", None)}
    doc.update(extra)
    return doc


def _parse_plane(spec, height, width):
    if ":" in spec:
        lo, hi = (float(x) for x in spec.split(":"))
        return gradient_map(height, width, lo, hi)
    return np.full((height, width), float(spec))


def _parse_floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _model_spec(args, kind):
    return ModelSpec(kind, hyperfine_mhz=args.hyperfine_mhz, detuning_mhz=args.detuning_mhz,
                     stretch_exponent=getattr(args, "stretch", 1.0))


def _raw_from_cube(cube: DataCube) -> RawStack:
    ref = 1000.0
    if cube.quantity == "contrast":
        data = np.stack([cube.data * ref, np.full(cube.data.shape, ref)], axis=1)
        return RawStack(cube.sweep, "signal_reference", np.clip(data, 0, None))
    half = 0.5 * ref
    data = np.stack([half * (1 + cube.data), half * (1 - cube.data)], axis=1)
    return RawStack(cube.sweep, "plus_minus", np.clip(data, 0, None))


def cmd_synth(args):
    out = _Outputs(args.out)
    h, w = args.height, args.width
    constants = {}
    if args.model == "odmr":
        lo, hi = args.sweep or (2760.0, 2980.0)
        sweep = SweepAxis("frequency_MHz", np.linspace(lo, hi, args.points or 881))
        k = SpinStressConstants(args.a1, args.a2)
        stress = stress_channel(h, w, peak_gpa=args.stress_peak_gpa)
        cube, truth = generate_odmr_scene(_parse_floats(args.splits), args.linewidth_mhz,
                                          args.amplitude, args.hyperfine_mhz, sweep, stress, k,
                                          args.zero_field_mhz, args.noise, args.seed)
        constants = {"a1": k.a1, "a2": k.a2, "hyperfine_mhz": args.hyperfine_mhz,
                     "zero_field_mhz": args.zero_field_mhz}
        out.add_qdc("cube.qdc", cube)
    else:
        defaults, sweep_kind, (lo, hi) = SYNTH_DEFAULTS[args.model]
        planes = dict(defaults)
        for item in args.param or []:
            name, _, val = item.partition("=")
            if name not in planes:
                raise ParameterError(f"unknown parameter {name!r} for {args.model}")
            planes[name] = val
        arrays = {n: _parse_plane(v, h, w) for n, v in planes.items()}
        lo, hi = args.sweep or (lo, hi)
        if args.model == "biref":
            angles = np.linspace(lo, hi, args.points or 18)
            cube, truth = generate_biref_stack(arrays["phi"], arrays["sin_delta"], arrays["I0"],
                                               angles, args.noise, args.seed)
            out.add_qdc("stack.qdc", cube)
        else:
            spec = _model_spec(args, MODEL_NAMES[args.model])
            sweep = SweepAxis(sweep_kind, np.linspace(lo, hi, args.points or 60))
            cube, truth = generate_cube(arrays, spec, sweep, args.noise, args.seed)
            constants = {"hyperfine_mhz": spec.hyperfine_mhz, "detuning_mhz": spec.detuning_mhz,
                         "stretch_exponent": spec.stretch_exponent}
            out.add_qdc("cube.qdc", cube)
            if args.raw:
                out.add_qdc("raw.qdc", _raw_from_cube(cube))
    for name, plane in truth.params.items():
        out.add_qdc(f"truth_{name}.qdc", MapImage(plane, "truth", ""))
    extra = {k: v for k, v in truth.extra.items() if k not in ("centers", "lineshifts", "spec")}
    out.add_json("truth.json", json.loads(json.dumps(
        {"kind": truth.kind, "seed": truth.seed, "noise_sigma": truth.noise_sigma,
         "rng": RNG_ALGORITHM, "planes": sorted(truth.params), "extra": extra},
        default=lambda o: o.tolist() if hasattr(o, "tolist") else list(o))))
    return out, _manifest(args, constants, rng=RNG_ALGORITHM)


def cmd_reduce(args):
    stack = load_qdc(args.input)
    if not isinstance(stack, RawStack):
        raise ModelMismatchError("reduce needs a raw two-channel stack")
    cube = contrast_reduce(stack) if stack.channels == "signal_reference" else visibility_reduce(stack)
    out = _Outputs(args.out)
    out.add_qdc("cube.qdc", cube)
    return out, _manifest(args, quantity=cube.quantity)


def _options(args):
    return FitOptions(max_iterations=args.max_iterations, workers=args.threads, seed=args.seed)


def _add_result(out, res, prefix=""):
    for name in res.spec.param_names:
        out.add_qdc(f"{prefix}param_{name}.qdc", res.param_map(name))
    out.add_qdc(f"{prefix}chisq.qdc", res.chisq_map())
    out.add_qdc(f"{prefix}status.qdc", res.status_map())


def cmd_fit(args):
    cube = load_qdc(args.input)
    if not isinstance(cube, DataCube):
        raise ModelMismatchError("fit needs a reduced data cube")
    kind = MODEL_NAMES[args.model]
    spec = _model_spec(args, kind)
    if spec.quantity != cube.quantity:
        raise ModelMismatchError(f"--model {args.model} fits {spec.quantity}, "
                                 f"{args.input} holds {cube.quantity}")
    opts = _options(args)
    out = _Outputs(args.out)
    constants = {"hyperfine_mhz": spec.hyperfine_mhz, "detuning_mhz": spec.detuning_mhz}
    extra = {}
    if kind == "odmr_triplet":
        windows = find_odmr_peaks(cube.sweep.values, cube.mean_trace(), args.groups,
                                  spec.hyperfine_mhz, args.linewidth_mhz)
        results = fit_odmr_cube(cube, windows, opts, spec, args.dicing)
        for g, res in enumerate(results):
            _add_result(out, res, f"g{g}_")
        out.add_json("windows.json", [w.__dict__ for w in windows])
        extra["converged_fraction"] = [float(r.converged.mean()) for r in results]
    elif kind == "t1":
        res = fit_t1_two_stage(cube, opts, args.dicing, spec)
        _add_result(out, res)
        constants["stretch_exponent"] = res.meta["stretch_exponent"]
        extra["converged_fraction"] = float(res.converged.mean())
    else:
        seeds = seed_by_dicing(cube, spec, args.dicing, opts)
        res = fit_cube(cube, spec, seeds, opts)
        _add_result(out, res)
        extra["converged_fraction"] = float(res.converged.mean())
    return out, _manifest(args, constants, **extra)


def _parse_pairing(text):
    if not text:
        return DEFAULT_PAIRING
    pairs = tuple(tuple(int(i) for i in p.split("-")) for p in text.split(","))
    return pairs


def cmd_stress(args):
    src = Path(args.input)
    centers, mask = [], None
    for g in range(8):
        m = load_qdc(src / f"g{g}_param_f_center.qdc")
        if not isinstance(m, MapImage):
            raise QDCFormatError(f"g{g}_param_f_center.qdc is not a map")
        centers.append(m.data)
        mask = m.mask.copy() if mask is None else mask | m.mask
    k = SpinStressConstants(args.a1, args.a2)
    M = lineshifts_from_centers(np.stack(centers), mask, _parse_pairing(args.pairing),
                                args.reference, args.zero_field_mhz)
    S = stress_tensor(M, k)
    out = _Outputs(args.out)
    for i, m in enumerate(M.maps()):
        out.add_qdc(f"lineshift_{i + 1}.qdc", m)
    for name, m in S.maps().items():
        out.add_qdc(f"{name}.qdc", m)
    return out, _manifest(args, {"a1": k.a1, "a2": k.a2, "zero_field_mhz": args.zero_field_mhz})


def cmd_biref(args):
    stack = load_qdc(args.input)
    if not isinstance(stack, DataCube) or stack.quantity != "intensity":
        raise ModelMismatchError("biref needs an intensity cube with an angle sweep")
    optics = BirefOptics(args.wavelength_m, args.thickness_m, args.refractive_index, args.qiso)
    res = analyze_birefringence(stack, optics)
    out = _Outputs(args.out)
    out.add_qdc("phi.qdc", res.phi)
    out.add_qdc("sin_delta.qdc", res.sin_delta)
    out.add_qdc("i0.qdc", res.i0)
    out.add_qdc("stress_magnitude.qdc", res.stress)
    return out, _manifest(args, optics.__dict__.copy(),
                          ambiguous_pixels=int(res.ambiguous.sum()))


def cmd_stats(args):
    image = load_qdc(args.input)
    if not isinstance(image, MapImage):
        raise ModelMismatchError("stats needs a map image")
    bins = args.bins if args.bins == "fd" else int(args.bins)
    stats = histogram_stats(image, bins, tuple(_parse_floats(args.within)))
    pct = percentile_report(image, _parse_floats(args.percentiles))
    out = _Outputs(args.out)
    out.add("stats.csv", stats_csv(stats, pct))
    out.add("histogram.csv", histogram_csv(stats))
    if args.pgm:
        out.add("map.pgm", to_pgm(image))
    return out, _manifest(args, valid_pixels=int((~image.mask).sum()))


def _range(text):
    lo, hi = (float(x) for x in text.split(":"))
    return lo, hi


def build_parser():
    p = argparse.ArgumentParser(prog="qdmkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common_model(sp):
        sp.add_argument("--hyperfine-mhz", type=float, default=HYPERFINE_14N_MHZ)
        sp.add_argument("--detuning-mhz", type=float, default=RAMSEY_DETUNING_MHZ)
        sp.add_argument("--seed", type=int, default=0)

    def stress_consts(sp):
        sp.add_argument("--a1", type=float, default=SpinStressConstants.a1)
        sp.add_argument("--a2", type=float, default=SpinStressConstants.a2)
        sp.add_argument("--zero-field-mhz", type=float, default=ZERO_FIELD_SPLITTING_MHZ)

    s = sub.add_parser("synth", help="write a synthetic cube with ground truth")
    s.add_argument("--model", required=True, choices=["rabi", "ramsey", "hahn", "t1", "odmr", "biref"])
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--points", type=int, default=None)
    s.add_argument("--sweep", type=_range, default=None, help="START:STOP of the sweep axis")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--param", action="append", help="NAME=VALUE or NAME=LO:HI (ramp along x)")
    s.add_argument("--stretch", type=float, default=1.0)
    s.add_argument("--raw", action="store_true", help="also write a two-channel raw stack")
    s.add_argument("--splits", default="90,65,40,15")
    s.add_argument("--linewidth-mhz", type=float, default=1.0)
    s.add_argument("--amplitude", type=float, default=0.01)
    s.add_argument("--stress-peak-gpa", type=float, default=0.05)
    s.add_argument("--out", required=True)
    common_model(s)
    stress_consts(s)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reduce", help="contrast / visibility reduction of a raw stack")
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reduce)

    f = sub.add_parser("fit", help="seeded per-pixel fit of a cube")
    f.add_argument("--input", required=True)
    f.add_argument("--model", required=True, choices=sorted(MODEL_NAMES))
    f.add_argument("--dicing", type=int, default=8)
    f.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    f.add_argument("--max-iterations", type=int, default=200)
    f.add_argument("--groups", type=int, default=8)
    f.add_argument("--linewidth-mhz", type=float, default=None)
    f.add_argument("--out", required=True)
    common_model(f)
    f.set_defaults(func=cmd_fit)

    st = sub.add_parser("stress", help="stress tensor from an ODMR fit directory")
    st.add_argument("--input", required=True, help="directory written by `fit --model odmr`")
    st.add_argument("--reference", choices=["spatial_median", "fixed_D"], default="spatial_median")
    st.add_argument("--pairing", default=None, help="e.g. 0-7,1-6,2-5,3-4")
    st.add_argument("--out", required=True)
    stress_consts(st)
    st.set_defaults(func=cmd_stress)

    b = sub.add_parser("biref", help="birefringence angle, retardance and stress")
    b.add_argument("--input", required=True)
    b.add_argument("--wavelength-m", type=float, default=530e-9)
    b.add_argument("--thickness-m", type=float, default=0.5e-3)
    b.add_argument("--refractive-index", type=float, default=2.42)
    b.add_argument("--qiso", type=float, default=0.3e-12)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_biref)

    sa = sub.add_parser("stats", help="histogram, Gaussian fit and percentiles of a map")
    sa.add_argument("--input", required=True)
    sa.add_argument("--bins", default="fd")
    sa.add_argument("--percentiles", default="10,50,90")
    sa.add_argument("--within", default="0.05,0.1")
    sa.add_argument("--pgm", action="store_true")
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=cmd_stats)
    return p


def _category(exc):
    if isinstance(exc, QDMError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "data"
    return "error"


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        out, manifest = args.func(args)
        manifest["timestamp"] = datetime.now(timezone.utc).isoformat()
        manifest["wall_time_s"] = time.perf_counter() - started
        out.commit(manifest)
    except (QDMError, OSError, ValueError) as exc:
        cat = _category(exc)
        print(json.dumps({"error": cat, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
