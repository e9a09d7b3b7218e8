"""Command-line entry point: simulate | scrub | denoise | fc | evaluate | render.

Settings resolve as command-line flag, then the ``--config`` TOML file, then
the built-in default. All outputs are written atomically under ``--out``.
Exit codes: 0 ok, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .data import RealignmentParams, ScanMatrix, ValidationError
from .fc import Parcellation, fc, fingerprint, icc31, mac, random_flags, rmse_validity
from .ica import IcaConvergenceError
from .projection import ConvergenceWarning
from .regression import build_design, censor_then_regress, denoise_spec, preliminary_then_final, regress
from .scrub import ScrubDecision
from .synth import SynthSpec, generate

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("projscrub")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

DEFAULTS = {
    "method": "ica",
    "leverage_multiple": 3.0,
    "cutoff_mm": None,  # 0.3 for fd, 0.2 for modfd
    "lag": None,  # 1 for fd, 4 for modfd
    "filter": None,  # none for fd, chebyshev2 for modfd
    "band_hz": None,
    "denoise": "cc2mp6",
    "seed": 0,
    "tr": None,
    "window": None,
    "exclusion_fraction": 0.5,
    "mac_permutations": 8,
    "fmt": "bin",
}

SCRUB_METHODS = ("pca", "ica", "fusedpca", "fd", "modfd", "dvars", "none")
FILTERS = ("none", "butterworth10", "chebyshev2")


class NumericalError(RuntimeError):
    pass


# --- settings ------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def resolve(args: argparse.Namespace, cfg: dict, key: str):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in cfg:
        return cfg[key]
    return DEFAULTS.get(key)


def parse_band(text) -> tuple[float, float] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(",")
    try:
        lo, hi = (float(p) for p in parts)
    except ValueError:
        raise ValidationError(f"--band-hz expects LO,HI, got {text!r}") from None
    return lo, hi


def parse_rois(items) -> dict:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise ValidationError(f"--noise-roi expects NAME=PATH, got {item!r}")
        out[name] = io.read_matrix(path)[0]
    return out


# --- shared loaders ------------------------------------------------------


def _load_scan(path, tr) -> ScanMatrix:
    try:
        return io.read_scan(path, tr)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _load_rp(path, tr, T) -> RealignmentParams | None:
    if path is None:
        return None
    try:
        values, _ = io.read_matrix(path)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    rp = RealignmentParams(values, tr)
    if rp.n_volumes != T:
        raise ValidationError(f"realignment parameters have {rp.n_volumes} rows, scan has {T}")
    return rp


def _strategy(args, cfg, rois) -> str:
    """Requested nuisance model; without an explicit choice and without noise
    ROIs the CompCor default cannot be built, so only the intercept is used."""
    if getattr(args, "denoise", None) is None and "denoise" not in cfg and not rois:
        log.info("no noise ROIs given; using the intercept-only model")
        return "none"
    return resolve(args, cfg, "denoise")


def _spec(name, rois, rp, T):
    for k, v in rois.items():
        if v.shape[0] != T:
            raise ValidationError(f"noise ROI {k} has {v.shape[0]} rows, scan has {T}")
    if name == "none":
        return None
    return denoise_spec(name, noise_roi_sources=rois, realignment=rp)


def _scrub_kwargs(args, cfg, method) -> tuple[float | None, dict]:
    if method in ("pca", "ica", "fusedpca"):
        return float(resolve(args, cfg, "leverage_multiple")), {}
    if method in ("fd", "modfd"):
        kw = {}
        lag = resolve(args, cfg, "lag")
        if lag is not None:
            kw["lag"] = int(lag)
        filt = resolve(args, cfg, "filter")
        if filt is not None:
            kw["filter_kind"] = filt
        band = parse_band(resolve(args, cfg, "band_hz"))
        if band is not None:
            kw["band_hz"] = band
        cutoff = resolve(args, cfg, "cutoff_mm")
        return (None if cutoff is None else float(cutoff)), kw
    return None, {}


def run_scrub(scan, spec, method, threshold, rp, seed, strict, kwargs):
    """Two-pass cleaning; returns (PipelineResult, the DenoiseSpec used).

    Without a nuisance model only the intercept is removed before scrubbing.
    """
    if method in ("fd", "modfd") and rp is None:
        raise ValidationError(f"{method} needs realignment parameters (--rp)")
    if spec is None:
        spec = denoise_spec("mpp")
    extra = dict(kwargs)
    if method in ("pca", "ica", "fusedpca"):
        extra["strict"] = strict
    return preliminary_then_final(scan, spec, method, threshold, rp=rp, seed=seed, **extra), spec


# --- subcommands ---------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    settings = dict(cfg.get("synth", {}))
    if args.spec is not None:
        path = Path(args.spec)
        if path.suffix == ".json":
            settings.update(io.read_json(path))
        else:
            settings.update(load_config(path).get("synth", load_config(path)))
    seed = resolve(args, cfg, "seed")
    if args.seed is not None or "seed" not in settings:
        settings["seed"] = int(seed)
    spec = SynthSpec.from_dict(settings)
    data = generate(spec)
    out = Path(args.out)
    runs = []
    for r in data.runs:
        stem = f"{r.scan.subject_id}_{r.scan.session_id}"
        rois = {}
        for name, values in sorted(r.noise_rois.items()):
            rois[name] = f"{stem}_noise-{name}.bin"
            io.write_matrix(out / rois[name], values, spec.tr_seconds)
        io.write_matrix(out / f"{stem}_bold.bin", r.scan.values, spec.tr_seconds)
        io.write_matrix(out / f"{stem}_rp.csv", r.rp.values)
        io.atomic_write_text(out / f"{stem}_bursts.csv", "".join(f"{t}\n" for t in r.burst_times))
        runs.append(
            {
                "subject": r.scan.subject_id,
                "session": r.scan.session_id,
                "run": r.scan.run_id,
                "scan": f"{stem}_bold.bin",
                "rp": f"{stem}_rp.csv",
                "noise_rois": rois,
                "bursts": f"{stem}_bursts.csv",
            }
        )
    true_fc = {}
    for f in data.truth.true_fc:
        true_fc[f.subject] = f"{f.subject}_truefc.bin"
        io.write_matrix(out / true_fc[f.subject], f.z)
    io.atomic_write_text(out / "parcellation.csv", "".join(f"{a}\n" for a in data.parcellation.assignment))
    io.write_json(out / "spec.json", spec.to_dict())
    io.write_json(
        out / "manifest.json",
        {
            "tr_seconds": spec.tr_seconds,
            "parcellation": "parcellation.csv",
            "runs": runs,
            "true_fc": true_fc,
        },
    )
    log.info("wrote %d runs to %s", len(runs), out)
    return EXIT_OK


def cmd_scrub(args, cfg) -> int:
    method = resolve(args, cfg, "method")
    if method not in SCRUB_METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {SCRUB_METHODS}")
    tr = resolve(args, cfg, "tr")
    scan = _load_scan(args.input, tr)
    rp = _load_rp(args.rp, scan.tr_seconds, scan.n_volumes)
    rois = parse_rois(args.noise_roi)
    spec = _spec(_strategy(args, cfg, rois), rois, rp, scan.n_volumes)
    threshold, kwargs = _scrub_kwargs(args, cfg, method)
    result, _ = run_scrub(scan, spec, method, threshold, rp, int(resolve(args, cfg, "seed")), args.strict, kwargs)
    decision = result.decision
    out = Path(args.out)
    io.write_flags_csv(out / "flags.csv", decision.flags)
    report = decision.to_json()
    report["n_flagged"] = decision.n_flagged
    report["input"] = Path(args.input).name
    io.write_json(out / "decision.json", report)
    log.info("%s flagged %d of %d volumes", method, decision.n_flagged, scan.n_volumes)
    return EXIT_OK


def cmd_denoise(args, cfg) -> int:
    tr = resolve(args, cfg, "tr")
    scan = _load_scan(args.input, tr)
    T = scan.n_volumes
    rp = _load_rp(args.rp, scan.tr_seconds, T)
    rois = parse_rois(args.noise_roi)
    spec = _spec(resolve(args, cfg, "denoise"), rois, rp, T)
    if spec is None:
        raise ValidationError("denoise needs a strategy other than 'none'")
    flags = None
    if args.flags is not None:
        flags = io.read_flags_csv(args.flags)
        if flags.size != T:
            raise ValidationError(f"flags have {flags.size} entries, scan has {T}")
    design = build_design(spec, T, flags)
    out = Path(args.out)
    fmt = resolve(args, cfg, "fmt")
    if args.censor and flags is not None:
        base = build_design(spec, T)
        resid = censor_then_regress(scan, base, flags)
        values = np.zeros((T, scan.n_locations))
        values[~flags] = resid
    else:
        values = regress(scan, design).values
    name = "residuals.csv" if fmt == "csv" else "residuals.bin"
    io.write_matrix(out / name, values, scan.tr_seconds, fmt)
    io.atomic_write_text(out / "design.csv", design.to_csv())
    keep = np.ones(T, bool) if flags is None else ~flags
    X = design.values[keep]
    scale = max(1.0, float(np.max(np.abs(scan.values))))
    ortho = float(np.max(np.abs(X.T @ values[keep]))) / scale if X.size else 0.0
    io.write_json(
        out / "audit.json",
        {
            "strategy": spec.name,
            "columns": list(design.column_labels),
            "rank": design.rank,
            "n_flagged": int(0 if flags is None else flags.sum()),
            "path": "censor" if args.censor else "spike",
            "max_abs_design_residual_inner_product": ortho,
            "orthogonal": ortho < 1e-8 * T,
        },
    )
    return EXIT_OK


def _parcellation(path, V, P) -> Parcellation:
    if path is not None:
        assign = io.read_matrix(path)[0][:, 0].astype(int)
        if assign.size != V:
            raise ValidationError(f"parcellation has {assign.size} entries, scan has {V} locations")
        return Parcellation(assign)
    if P is None:
        raise ValidationError("give --parcellation FILE or --parcels P")
    return Parcellation.blocks(V, int(P))


def cmd_fc(args, cfg) -> int:
    scan = _load_scan(args.input, resolve(args, cfg, "tr"))
    parc = _parcellation(args.parcellation, scan.n_locations, args.parcels)
    flags = io.read_flags_csv(args.flags) if args.flags else None
    if flags is not None and flags.size != scan.n_volumes:
        raise ValidationError("flags and scan differ in length")
    m = fc(scan, parc, flags)
    out = Path(args.out)
    io.write_matrix(out / "fc.bin", m.z)
    io.write_json(out / "fc.json", m.sidecar())
    return EXIT_OK


def _window(values: np.ndarray, window) -> np.ndarray:
    return values if window is None else values[: int(window)]


def evaluate_manifest(manifest_path, method, denoise, threshold, kwargs, seed, window, exclusion, n_perm, strict):
    """All four FC metrics over a manifest produced by ``simulate``."""
    root = Path(manifest_path).parent
    man = io.read_json(manifest_path)
    tr = float(man.get("tr_seconds", 1.0))
    parc_values = io.read_matrix(root / man["parcellation"])[0][:, 0].astype(int)
    parc = Parcellation(parc_values)
    by_subject: dict[str, list] = {}
    rates = []
    for entry in man["runs"]:
        scan = ScanMatrix(_window(io.read_matrix(root / entry["scan"])[0], window), tr,
                          entry["subject"], entry.get("session"), entry.get("run"))
        T = scan.n_volumes
        rp = None
        if entry.get("rp"):
            rp = RealignmentParams(_window(io.read_matrix(root / entry["rp"])[0], window), tr)
        rois = {k: _window(io.read_matrix(root / v)[0], window) for k, v in entry.get("noise_rois", {}).items()}
        spec = _spec(denoise, rois, rp, T)
        result, used = run_scrub(scan, spec, method, threshold, rp, seed, strict, kwargs)
        flags = result.decision.flags
        rates.append(float(flags.mean()))
        z = fc(result.residuals, parc, flags)
        rng = np.random.default_rng([seed, len(rates)])
        rand = []
        for _ in range(n_perm):
            rf = random_flags(T, int(flags.sum()), rng)
            resid = regress(scan, build_design(used, T, rf))
            rand.append(fc(resid, parc, rf).upper())
        by_subject.setdefault(entry["subject"], []).append(
            {"fc": z, "kept": 1.0 - float(flags.mean()), "random": np.array(rand).T}
        )
    subjects = sorted(s for s, runs in by_subject.items() if min(r["kept"] for r in runs) >= exclusion)
    if len(subjects) < 2:
        raise ValidationError("fewer than 2 subjects survive the exclusion rule")
    R = min(len(by_subject[s]) for s in subjects)
    config = {
        "method": method, "denoise": denoise, "threshold": threshold, "window": window,
        "exclusion_fraction": exclusion, "mac_permutations": n_perm, "seed": seed,
    }
    z = np.array([[by_subject[s][r]["fc"].upper() for r in range(R)] for s in subjects])  # S, R, pairs
    report = []
    if R >= 2:
        report.append({"metric": "icc", "value": float(np.mean(icc31(z))), "n": len(subjects), "config": config})
        db = [by_subject[s][0]["fc"] for s in subjects]
        qu = [by_subject[s][1]["fc"] for s in subjects]
        report.append({"metric": "fingerprint", "value": fingerprint(db, qu, swap=True), "n": 2 * len(subjects), "config": config})
    truth = man.get("true_fc") or {}
    if all(s in truth for s in subjects):
        iu = np.triu_indices(parc.P, 1)
        tz = np.array([io.read_matrix(root / truth[s])[0][iu] for s in subjects])
        est = z.transpose(1, 0, 2)  # A, S, P
        report.append({"metric": "rmse", "value": rmse_validity(est, np.broadcast_to(tz, est.shape)), "n": len(subjects), "config": config})
    if n_perm >= 1:
        zr = np.array([[by_subject[s][r]["random"] for s in subjects] for r in range(R)])  # R, S, P, Q
        report.append({"metric": "mac", "value": mac(z.transpose(1, 0, 2), zr), "n": len(subjects), "config": config})
    report.append({"metric": "censoring_rate", "value": float(np.mean(rates)), "n": len(rates), "config": config})
    return report


def cmd_evaluate(args, cfg) -> int:
    method = resolve(args, cfg, "method")
    if method not in SCRUB_METHODS:
        raise ValidationError(f"unknown method {method!r}")
    threshold, kwargs = _scrub_kwargs(args, cfg, method)
    window = resolve(args, cfg, "window")
    report = evaluate_manifest(
        args.manifest,
        method,
        resolve(args, cfg, "denoise"),
        threshold,
        kwargs,
        int(resolve(args, cfg, "seed")),
        None if window is None else int(window),
        float(resolve(args, cfg, "exclusion_fraction")),
        int(resolve(args, cfg, "mac_permutations")),
        args.strict,
    )
    io.write_json(Path(args.out) / "metrics.json", report)
    return EXIT_OK


# --- rendering -----------------------------------------------------------


def grayplot_pgm(values: np.ndarray) -> bytes:
    """8-bit binary PGM with one row per location and one column per volume.

    Each location is mean-centered, then intensities are windowed to the
    2nd-98th percentile of the whole matrix. A constant input renders as
    uniform mid-gray.
    """
    Y = np.asarray(values, dtype=float)
    T, V = Y.shape
    C = (Y - Y.mean(axis=0)).T  # V x T
    lo, hi = np.percentile(C, [2, 98])
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        img = np.full((V, T), 128, dtype=np.uint8)
    else:
        img = np.round(255 * np.clip((C - lo) / (hi - lo), 0, 1)).astype(np.uint8)
    return f"P5\n{T} {V}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _threshold_lines(decision: ScrubDecision) -> list[float]:
    spec = decision.threshold_spec
    if decision.method == "leverage":
        return [spec["multiple"] * decision.median_metric]
    if "cutoff_mm" in spec:
        return [spec["cutoff_mm"]]
    if "zdvars_cut" in spec:
        return [spec["zdvars_cut"]]
    return []


def trace_svg(decision: ScrubDecision, width: int = 800, height: int = 200) -> str:
    """Line plot of a scrubbing metric with dashed threshold lines and flag ticks."""
    y = np.asarray(decision.metric, dtype=float)
    lines = _threshold_lines(decision)
    top = max([float(np.max(y)) if y.size else 1.0] + lines)
    bottom = min(0.0, float(np.min(y)) if y.size else 0.0)
    span = top - bottom or 1.0
    pad = 10

    def px(t, v):
        x = pad + (width - 2 * pad) * t / max(1, y.size - 1)
        yy = height - pad - (height - 2 * pad) * (v - bottom) / span
        return f"{x:.2f},{yy:.2f}"

    pts = " ".join(px(t, v) for t, v in enumerate(y))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/>',
    ]
    for v in lines:
        a, b = px(0, v), px(y.size - 1, v)
        x1, y1 = a.split(",")
        x2, y2 = b.split(",")
        out.append(f'<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="red" stroke-dasharray="4,3"/>')
    for t in np.flatnonzero(decision.flags):
        x = px(int(t), bottom).split(",")[0]
        out.append(f'<line x1="{x}" y1="{height - pad}" x2="{x}" y2="{height}" stroke="blue"/>')
    out.append(f"<title>{decision.method}</title>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_render(args, cfg) -> int:
    if args.input is None and not args.decision:
        raise ValidationError("render needs an input scan and/or --decision files")
    out = Path(args.out)
    if args.input is not None:
        scan = _load_scan(args.input, resolve(args, cfg, "tr"))
        io.atomic_write_bytes(out / "grayplot.pgm", grayplot_pgm(scan.values))
    for path in args.decision or []:
        try:
            decision = ScrubDecision.from_json(io.read_json(path))
        except (OSError, KeyError, ValueError) as exc:
            raise ValidationError(f"cannot read decision {path}: {exc}") from None
        io.atomic_write_text(out / f"{Path(path).stem}_trace.svg", trace_svg(decision))
    return EXIT_OK


# --- parser --------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="TOML settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--tr", type=float, help="repetition time in seconds (overrides the file header)")
    p.add_argument("--strict", action="store_true", help="treat non-convergence as a numerical failure")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_pipeline(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=SCRUB_METHODS)
    p.add_argument("--leverage-multiple", type=float, dest="leverage_multiple")
    p.add_argument("--cutoff-mm", type=float, dest="cutoff_mm")
    p.add_argument("--lag", type=int)
    p.add_argument("--filter", choices=FILTERS)
    p.add_argument("--band-hz", dest="band_hz", help="notch band LO,HI in Hz")
    p.add_argument("--denoise", help="nuisance model: mpp, dct4, cc2, cc2mp6, cc2mp24, 2p, 9p, 36p or none")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="projscrub", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset and manifest")
    p.add_argument("spec", nargs="?", help="synth settings (JSON, or TOML with a [synth] table)")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scrub", help="compute scrubbing flags for one scan")
    p.add_argument("input")
    p.add_argument("--rp", help="T x 6 realignment parameters")
    p.add_argument("--noise-roi", action="append", dest="noise_roi", metavar="NAME=PATH")
    _add_common(p)
    _add_pipeline(p)
    p.set_defaults(func=cmd_scrub)

    p = sub.add_parser("denoise", help="nuisance regression with optional spike regressors")
    p.add_argument("input")
    p.add_argument("--rp")
    p.add_argument("--noise-roi", action="append", dest="noise_roi", metavar="NAME=PATH")
    p.add_argument("--flags", help="0/1 flag file from scrub")
    p.add_argument("--censor", action="store_true", help="drop flagged rows before fitting instead of spike regressors")
    p.add_argument("--format", dest="fmt", choices=("bin", "csv"))
    _add_common(p)
    p.add_argument("--denoise")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("fc", help="parcel FC of a residual scan")
    p.add_argument("input")
    p.add_argument("--parcellation", help="one parcel id (1..P) per location")
    p.add_argument("--parcels", type=int, help="split locations into P contiguous blocks")
    p.add_argument("--flags")
    _add_common(p)
    p.set_defaults(func=cmd_fc)

    p = sub.add_parser("evaluate", help="ICC, fingerprinting, RMSE and MAC over a manifest")
    p.add_argument("manifest")
    p.add_argument("--window", type=int, help="use only the first N volumes of each run")
    p.add_argument("--exclusion-fraction", type=float, dest="exclusion_fraction")
    p.add_argument("--mac-permutations", type=int, dest="mac_permutations")
    _add_common(p)
    _add_pipeline(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="grayplot PGM and metric trace SVGs")
    p.add_argument("input", nargs="?")
    p.add_argument("--decision", action="append", help="decision.json from scrub")
    _add_common(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        with warnings.catch_warnings():
            if args.strict:
                warnings.simplefilter("error", ConvergenceWarning)
            return args.func(args, cfg)
    except (ValidationError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IcaConvergenceError, ConvergenceWarning, np.linalg.LinAlgError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
