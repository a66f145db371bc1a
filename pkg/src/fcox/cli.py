"""Command-line interface.

Commands
--------
fit             Fit a model to a wide functional-data file.
predict         Survival predictions from a saved model.
simulate        Run a simulation study.
landmark-build  Write the stacked landmark data set.

Input files are comma separated with header ``id,time,delta``, then any
scalar covariates, then ``z_0001 .. z_J``. Exit status is 0 on success, 1
on a numerical failure and 2 on a usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np

from fcox.fitter import NonConvergence, SingularHessianError
from fcox.landmark import (
    build_landmark_dataset,
    center_by_landmark,
    landmark_grid,
    partition_windows,
    two_subject_example,
)
from fcox.models import fit_from_dict, fit_landmark_route, fit_poisson_route, fit_to_dict
from fcox.predict import Z_975, dynamic_predict, eval_surface, survival_curve
from fcox.simulate import METHODS, TRUE_SURFACES, SimulationConfig, run_study
from fcox.survival import FunctionalPredictor, SurvivalData, jitter_ties, quadrature_weights

SURFACE_POINTS = 101


class UsageError(Exception):
    """Invalid arguments or input files; exit status 2."""


def fmt(v) -> str:
    """Shortest text that reads back to the same double; integral values lose ``.0``."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def timestamp_line() -> str:
    return "# created " + _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- input


def read_functional_csv(path, grid=None, grid_file=None):
    """Read a wide functional-data file.

    Parameters
    ----------
    path : str
    grid : str, optional
        ``"uniform:J"`` for midpoints of ``J`` equal cells of ``[0, 1]``.
    grid_file : str, optional
        Abscissae, one per line, optionally followed by a comma and a
        quadrature weight.

    Returns
    -------
    data : SurvivalData
    Z : FunctionalPredictor
    scalar_names : list of str
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    if not rows:
        raise UsageError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["id", "time", "delta"]:
        raise UsageError(f"{path}: header must start with id,time,delta")
    zcols = [i for i, h in enumerate(header) if h.startswith("z_")]
    if not zcols:
        raise UsageError(f"{path}: no functional columns z_0001..")
    first = zcols[0]
    expected = [f"z_{j + 1:04d}" for j in range(len(zcols))]
    if header[first:] != expected:
        raise UsageError(f"{path}: functional columns must be {expected[0]}..{expected[-1]} in order and last")
    scalar_names = header[3:first]
    n_col = len(header)
    ids, time, delta, x, z = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != n_col:
            raise UsageError(f"{path}: line {lineno}: expected {n_col} fields, found {len(row)}")
        vals = []
        for name, cell in zip(header, row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise UsageError(f"{path}: line {lineno}, column {name}: not a number: {cell!r}") from None
        if not math.isfinite(vals[1]) or vals[1] <= 0:
            raise UsageError(f"{path}: line {lineno}, column time: must be positive, got {row[1]!r}")
        if vals[2] not in (0.0, 1.0):
            raise UsageError(f"{path}: line {lineno}, column delta: must be 0 or 1, got {row[2]!r}")
        bad = [header[i] for i in range(3, n_col) if not math.isfinite(vals[i])]
        if bad:
            raise UsageError(f"{path}: line {lineno}, column {bad[0]}: missing or infinite value")
        if not vals[0].is_integer():
            raise UsageError(f"{path}: line {lineno}, column id: must be an integer")
        ids.append(int(vals[0]))
        time.append(vals[1])
        delta.append(int(vals[2]))
        x.append(vals[3:first])
        z.append(vals[first:])
    if not ids:
        raise UsageError(f"{path}: no data rows")
    if len(set(ids)) != len(ids):
        raise UsageError(f"{path}: duplicate subject id")
    J = len(zcols)
    values = np.array(z)
    Z = _make_predictor(values, J, grid, grid_file)
    data = SurvivalData(np.array(ids), np.array(time), np.array(delta), np.array(x).reshape(len(ids), -1))
    return data, Z, scalar_names


def _make_predictor(values, J, grid, grid_file):
    if grid is not None and grid_file is not None:
        raise UsageError("give either --grid or --grid-file, not both")
    if grid_file is not None:
        try:
            lines = [ln.strip() for ln in Path(grid_file).read_text().splitlines() if ln.strip()]
            parts = [ln.split(",") for ln in lines if not ln.startswith("#")]
            u = np.array([float(p[0]) for p in parts])
            w = np.array([float(p[1]) for p in parts]) if all(len(p) > 1 for p in parts) else None
        except (OSError, ValueError, IndexError) as exc:
            raise UsageError(f"cannot read grid file {grid_file}: {exc}") from exc
        if u.size != J:
            raise UsageError(f"grid file has {u.size} points but the data have {J} functional columns")
        try:
            return FunctionalPredictor(values, u, quadrature_weights(u) if w is None else w)
        except ValueError as exc:
            raise UsageError(f"grid file: {exc}") from exc
    if grid is None:
        return FunctionalPredictor.uniform(values)
    kind, _, arg = grid.partition(":")
    if kind != "uniform" or not arg.isdigit():
        raise UsageError(f"--grid must look like uniform:J, got {grid!r}")
    if int(arg) != J:
        raise UsageError(f"--grid {grid} disagrees with the {J} functional columns")
    return FunctionalPredictor.uniform(values)


def parse_landmarks(text: str) -> np.ndarray:
    """``start:stop:step`` or a comma-separated list."""
    try:
        if ":" in text:
            a, b, h = (float(v) for v in text.split(":"))
            if h <= 0 or b < a:
                raise ValueError
            return landmark_grid(a, b, h)
        s = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"bad landmark specification {text!r}") from None
    if s.size == 0 or np.any(np.diff(s) <= 0):
        raise UsageError("landmarks must be strictly increasing")
    return s


def parse_windows(text: str, landmarks: np.ndarray) -> np.ndarray:
    """``partition``, ``inf`` or a positive number."""
    if text == "partition":
        return partition_windows(landmarks)
    try:
        w = float(text)
    except ValueError:
        raise UsageError(f"bad window specification {text!r}") from None
    if not w > 0:
        raise UsageError("windows must be positive")
    return np.full(landmarks.size, w)


def parse_lambdas(text):
    if text is None:
        return None
    try:
        return np.array([float(v) for v in str(text).split(",")])
    except ValueError:
        raise UsageError(f"bad smoothing parameters {text!r}") from None


# ---------------------------------------------------------------- config


def load_config(args, parser_defaults: dict):
    """Fill unset options from ``--config``; unknown keys are an error."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    allowed = set(parser_defaults) - {"config", "command", "func"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for key, default in parser_defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, cfg.get(key, default))
    return args


# ---------------------------------------------------------------- commands


def _fit_model(args, data, Z):
    lambdas = parse_lambdas(args.lambdas)
    time = jitter_ties(data.time, data.event, data.id)
    data = SurvivalData(data.id, time, data.event, data.x)
    if args.route == "poisson":
        return fit_poisson_route(data, Z, k_u=args.k_u, k_t=args.k_t, lambdas=lambdas)
    s = parse_landmarks(args.landmarks)
    w = parse_windows(args.window, s)
    return fit_landmark_route(data, Z, s, w, k_u=args.k_u, k_t=args.k_t, k_scalar=args.k_scalar,
                              lambdas=lambdas)


def stratum_survival(fit):
    """Baseline survival of each stratum at its window end (average curve, zero covariates)."""
    out = []
    if fit.route == "landmark":
        for l, H in enumerate(fit.baselines):
            end = fit.landmarks[l] + fit.windows[l]
            t = end if math.isfinite(end) else (H.times[-1] if H.times.size else fit.landmarks[l])
            out.append((l, float(fit.landmarks[l]), float(t), float(np.exp(-H(t)))))
    else:
        H = fit.baselines[0]
        t = H.times[-1] if H.times.size else 0.0
        out.append((0, 0.0, float(t), float(np.exp(-H(t)))))
    return out


def write_surface(path, fit):
    u = np.linspace(*fit.spec_u.domain, SURFACE_POINTS)
    t = np.linspace(*fit.spec_t.domain, SURFACE_POINTS) if fit.spec_t.family != "indicator" else fit.landmarks
    est, se = eval_surface(fit.surface(), u, t)
    with open(path, "w") as fh:
        fh.write(timestamp_line() + "\n")
        fh.write("u,t,gamma,se,ci_lo,ci_hi\n")
        for i in range(u.size):
            for k in range(t.size):
                g, s = est[i, k], se[i, k]
                fh.write(",".join(fmt(v) for v in (u[i], t[k], g, s, g - Z_975 * s, g + Z_975 * s)) + "\n")


def cmd_fit(args) -> int:
    data, Z, names = read_functional_csv(args.data, args.grid, args.grid_file)
    if args.route not in ("poisson", "landmark"):
        raise UsageError(f"unknown route {args.route!r}")
    fit = _fit_model(args, data, Z)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_surface(out / "surface.csv", fit)
    (out / "model.json").write_text(json.dumps(fit_to_dict(fit)) + "\n")
    res = fit.result
    lines = [
        timestamp_line(),
        f"route = {fit.route}",
        f"subjects = {data.n}",
        f"rows = {fit.n_rows}",
        "log10_lambda = " + " ".join(fmt(v) for v in np.log10(res.lambdas)),
        f"edf = {fmt(res.edf)}",
        f"loglik = {fmt(res.loglik)}",
        f"penalized_loglik = {fmt(res.penalized_loglik)}",
        f"iterations = {res.iterations}",
    ]
    if fit.n_scalar and fit.route == "poisson":
        for name, b in zip(names, fit.scalar_effects()):
            lines.append(f"beta.{name} = {fmt(b)}")
    lines.append("stratum,landmark,time,survival")
    for l, s, t, v in stratum_survival(fit):
        lines.append(f"{l},{fmt(s)},{fmt(t)},{fmt(v)}")
    lines += [f"# note: {n}" for n in fit.notes]
    lines.append(f"# seconds = {fmt(fit.expansion_seconds + fit.fit_seconds)}")
    text = "\n".join(lines) + "\n"
    (out / "fit.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    try:
        fit = fit_from_dict(json.loads(Path(args.model).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load model {args.model}: {exc}") from exc
    data, Z, _ = read_functional_csv(args.data, args.grid, args.grid_file)
    if Z.grid.size != fit.grid.size or not np.allclose(Z.grid, fit.grid):
        raise UsageError("prediction data use a different functional grid than the model")
    if fit.n_scalar != data.x.shape[1]:
        raise UsageError(f"model expects {fit.n_scalar} scalar covariates, data have {data.x.shape[1]}")
    t_star = float(args.t_star)
    lines = [timestamp_line()]
    if fit.route == "landmark":
        s, w = fit.landmarks, fit.windows
        origin = int(np.argmin(np.abs(s - float(args.origin))))
        if abs(s[origin] - float(args.origin)) > 1e-9:
            raise UsageError(f"origin {args.origin} is not a fitted landmark")
        reach = s[-1] + w[-1]
        if fit.null_windows is not None and fit.null_windows.size:
            reach = max(reach, float(fit.null_windows[:, 1].max()))
        if t_star < s[origin] or t_star > reach:
            raise UsageError(f"t_star {args.t_star} lies outside the fitted windows")
        lines.append("id,direct,chained,difference")
        for i in range(data.n):
            try:
                r = dynamic_predict(fit, Z.values[i], data.x[i], t_star=t_star, origin=origin)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            lines.append(",".join([str(data.id[i]), fmt(r["direct"]), fmt(r["chained"]), fmt(r["difference"])]))
    else:
        if t_star < 0 or t_star > fit.spec_t.domain[1]:
            raise UsageError(f"t_star {args.t_star} lies outside the fitted time range")
        lines.append("id,survival")
        for i in range(data.n):
            _, S = survival_curve(fit, Z.values[i], data.x[i], times=[t_star])
            lines.append(f"{data.id[i]},{fmt(S[0])}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _surface_writer(folder: Path):
    """Callback writing one long-format surface file per fit."""
    folder.mkdir(parents=True, exist_ok=True)

    def write(b, m, grid, est, se):
        with open(folder / f"surface_{m}_{b:04d}.csv", "w") as fh:
            fh.write("u,t,gamma,se,ci_lo,ci_hi\n")
            for i in range(grid.size):
                for k in range(grid.size):
                    g = est[i, k]
                    if se is None:
                        tail = "nan,nan,nan"
                    else:
                        s = se[i, k]
                        tail = f"{fmt(s)},{fmt(g - Z_975 * s)},{fmt(g + Z_975 * s)}"
                    fh.write(f"{fmt(grid[i])},{fmt(grid[k])},{fmt(g)},{tail}\n")

    return write


def cmd_simulate(args) -> int:
    if args.scenario not in TRUE_SURFACES:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(TRUE_SURFACES)}")
    methods = tuple(args.methods.split(",")) if isinstance(args.methods, str) else tuple(args.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method {bad[0]!r}; choose from {', '.join(METHODS)}")
    try:
        config = SimulationConfig(
            scenario=args.scenario, n=int(args.n), J=int(args.J), replications=int(args.reps), seed=int(args.seed),
            k_u=int(args.k_u), k_t=int(args.k_t), methods=methods,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sink = _surface_writer(Path(args.keep_surfaces)) if args.keep_surfaces else None

    def progress(b, ise):
        if args.verbose:
            print(f"replication {b}: " + " ".join(f"{m}={fmt(v)}" for m, v in ise.items()), file=sys.stderr)

    report = run_study(config, progress=progress, surface_sink=sink)
    text = timestamp_line() + "\n" + report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


EXAMPLE_FLAG = "d_differs_from_printed_table"


def example_table() -> str:
    """The two-subject stacked example as text, sorted by id then landmark.

    The row for subject 2 at landmark 3 has ``d = 1`` (death at 3.5 inside
    the window ``(3, 4]``), while the printed illustration shows 0; that
    row carries a flag.
    """
    data, Z, s, w = two_subject_example()
    st = build_landmark_dataset(data, Z, s, w)
    order = np.lexsort((st.svec, st.id))
    out = ["ID,T,d,X,svec,umat,zmat,smat,lmat,zlmat,flag"]

    def vec(a):
        return " ".join(fmt(v) for v in a)

    zl = st.zlmat
    for r in order:
        flag = EXAMPLE_FLAG if (st.id[r] == 2 and st.svec[r] == 3.0) else ""
        out.append(",".join([
            fmt(st.id[r]), fmt(st.time[r]), fmt(st.d[r]), fmt(st.x[r, 0]), fmt(st.svec[r]),
            vec(st.umat[r]), vec(st.zmat[r]), vec(st.smat[r]), vec(st.lmat[r]), vec(zl[r]), flag,
        ]))
    return "\n".join(out) + "\n"


def cmd_landmark_build(args) -> int:
    if args.print_example:
        sys.stdout.write(example_table())
        return 0
    if not args.data or not args.landmarks:
        raise UsageError("--data and --landmarks are required unless --print-example is given")
    data, Z, names = read_functional_csv(args.data, args.grid, args.grid_file)
    s = parse_landmarks(args.landmarks)
    w = parse_windows(args.window, s)
    st = build_landmark_dataset(data, Z, s, w)
    if args.center:
        st = center_by_landmark(st)
    J = Z.grid.size
    xn = names or []
    header = ["id", "time", "d", "svec"] + xn
    header += [f"u_{j + 1}" for j in range(J)] + [f"z_{j + 1}" for j in range(J)] + [f"l_{j + 1}" for j in range(J)]
    lines = [timestamp_line()] + [f"# {m}" for m in st.report] + [",".join(header)]
    ufmt = [fmt(v) for v in st.grid]
    lfmt = [fmt(v) for v in st.weights]
    for r in range(st.n_rows):
        row = [fmt(st.id[r]), fmt(st.time[r]), fmt(st.d[r]), fmt(st.svec[r])]
        row += [fmt(v) for v in st.x[r]] + ufmt + [fmt(v) for v in st.zmat[r]] + lfmt
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

DEFAULTS = {
    "fit": {"data": None, "grid": None, "grid_file": None, "route": "poisson", "k_u": 5, "k_t": 5,
            "k_scalar": None, "landmarks": "0:0.96:0.04", "window": "partition", "lambdas": None, "out_dir": "."},
    "predict": {"model": None, "data": None, "grid": None, "grid_file": None, "t_star": None, "origin": 0.0,
                "out": None},
    "simulate": {"scenario": "f1", "n": 500, "J": 100, "reps": 1, "seed": 1, "k_u": 5, "k_t": 5,
                 "methods": ",".join(METHODS), "out": None, "keep_surfaces": None, "verbose": False},
    "landmark_build": {"data": None, "grid": None, "grid_file": None, "landmarks": None, "window": "partition",
                       "center": False, "out": None, "print_example": False},
}

REQUIRED = {"fit": ["data"], "predict": ["model", "data", "t_star"], "simulate": [], "landmark_build": []}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcox", description="Time-varying functional Cox models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common_data(sp):
        sp.add_argument("--data", help="wide CSV: id,time,delta,<scalars>,z_0001..z_J")
        sp.add_argument("--grid", help="uniform:J (midpoints of J cells of [0, 1]; the default)")
        sp.add_argument("--grid-file", dest="grid_file", help="abscissae, one per line, optional ',weight'")
        sp.add_argument("--config", help="JSON object with option values; unknown keys are rejected")

    f = sub.add_parser("fit", help="fit a model and write surface.csv, model.json and fit.txt")
    common_data(f)
    f.add_argument("--route", help="poisson (default) or landmark")
    f.add_argument("--k-u", dest="k_u", type=int, help="functional basis dimension (5)")
    f.add_argument("--k-t", dest="k_t", type=int, help="time basis dimension (5)")
    f.add_argument("--k-scalar", dest="k_scalar", type=int, help="landmark-varying scalar basis dimension")
    f.add_argument("--landmarks", help="start:stop:step or a comma list (0:0.96:0.04)")
    f.add_argument("--window", help="partition (default), inf, or a length")
    f.add_argument("--lambdas", help="fixed smoothing parameters, comma separated; REML when omitted")
    f.add_argument("--out-dir", dest="out_dir", help="output directory (.)")
    f.set_defaults(func=cmd_fit, section="fit")

    pr = sub.add_parser("predict", help="survival probabilities from a saved model")
    common_data(pr)
    pr.add_argument("--model", help="model.json written by fit")
    pr.add_argument("--t-star", dest="t_star", type=float, help="horizon")
    pr.add_argument("--origin", type=float, help="origin landmark time for landmark models (0)")
    pr.add_argument("--out", help="output file (stdout)")
    pr.set_defaults(func=cmd_predict, section="predict")

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--scenario", help="f1, f2, f3 or f4")
    s.add_argument("--n", type=int, help="subjects per replication (500)")
    s.add_argument("--J", type=int, help="functional grid size (100)")
    s.add_argument("--reps", type=int, help="replications (1)")
    s.add_argument("--seed", type=int, help="master seed (1)")
    s.add_argument("--k-u", dest="k_u", type=int)
    s.add_argument("--k-t", dest="k_t", type=int)
    s.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
    s.add_argument("--out", help="report file (stdout)")
    s.add_argument("--keep-surfaces", dest="keep_surfaces", help="directory for per-fit surface files")
    s.add_argument("--verbose", action="store_const", const=True)
    s.add_argument("--config", help="JSON object with option values; unknown keys are rejected")
    s.set_defaults(func=cmd_simulate, section="simulate")

    lb = sub.add_parser("landmark-build", help="write the stacked landmark data set")
    common_data(lb)
    lb.add_argument("--landmarks", help="start:stop:step or a comma list")
    lb.add_argument("--window", help="partition (default), inf, or a length")
    lb.add_argument("--center", action="store_const", const=True, help="center curves within landmarks")
    lb.add_argument("--out", help="output file (stdout)")
    lb.add_argument("--print-example", dest="print_example", action="store_const", const=True,
                    help="print the two-subject example and exit")
    lb.set_defaults(func=cmd_landmark_build, section="landmark_build")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        load_config(args, DEFAULTS[args.section])
        missing = [k for k in REQUIRED[args.section] if getattr(args, k) is None]
        if missing:
            raise UsageError("missing required option --" + missing[0].replace("_", "-"))
        return args.func(args)
    except UsageError as exc:
        print(f"fcox: error: {exc}", file=sys.stderr)
        return 2
    except (NonConvergence, SingularHessianError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"fcox: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"fcox: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
