"""
Command-line front end.

Subcommands::

    hyperclust fit DATA -G 2 --family MGHD --structure VVV --out-dir DIR
    hyperclust search DATA -G 1 2 3 4 --structures VVV EEE --out table.csv
    hyperclust impute DATA --model DIR/model.hcm --out imputed.csv
    hyperclust simulate --design Sim1 --rate 0.05 --mechanism MCAR --out data.csv
    hyperclust study --design Sim3 --rates 0.05 0.15 --replications 10 --out-dir DIR
    hyperclust evaluate --labels a.csv --truth b.csv

Errors end the process with a single line ``error: <Class>: <message>`` on
stderr and exit status 1 (usage), 2 (data validation) or 3 (numerical
failure).  The thread count for grid searches is read from
``HYPERCLUST_THREADS``.
"""

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .distributions import GhdParams, StParams
from .em import FitConfig, Family, MixtureModel, fit, predict
from .errors import HyperclustError, ParseError, UsageError, ValidationError
from .gpcm import ALL_STRUCTURES, CovarianceStructure
from .missing_data import MECHANISMS, MaskedDataset, inject_missingness
from .selection import ModelGrid, adjusted_rand_index, default_workers, search
from .simulation import DESIGN_IDS, builtin_design, generate, run_study

MODEL_HEADER = "hyperclust-model v1"
DEFAULT_NA_TOKENS = ("NA", "", "?")


# ---------------------------------------------------------------------------
# input / output
# ---------------------------------------------------------------------------


def load_csv(path, na_tokens=DEFAULT_NA_TOKENS):
    """
    Read a numeric CSV with a header row into a :class:`MaskedDataset`.

    Cells equal (after stripping blanks) to one of ``na_tokens`` are missing.

    Raises
    ------
    ParseError
        On a non-numeric cell or a ragged row; the message gives the 1-based
        data row and the column name.
    ValidationError
        When the file is missing or empty, or a row has no observed value.
    """
    tokens = {t.strip() for t in na_tokens}
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror or exc}") from None
    rows = [r for r in rows if r]  # a trailing blank line is not a record
    if not rows:
        raise ValidationError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    p = len(header)
    body = rows[1:]
    if not body:
        raise ValidationError(f"{path} has a header but no data rows")
    data = np.empty((len(body), p))
    mask = np.zeros((len(body), p), dtype=bool)
    for i, row in enumerate(body):
        if len(row) != p:
            raise ParseError(f"row {i + 1}: expected {p} fields, found {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell in tokens:
                mask[i, j] = True
                data[i, j] = np.nan
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"row {i + 1}, column {header[j]!r}: cannot parse {cell!r}") from None
            if not np.isfinite(v):
                raise ParseError(f"row {i + 1}, column {header[j]!r}: non-finite value {cell!r}")
            data[i, j] = v
    return MaskedDataset(data, mask, header)


def _load_labels(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror or exc}") from None
    if len(rows) < 2:
        raise ValidationError(f"{path} has no labels")
    out = []
    for i, r in enumerate(rows[1:]):
        try:
            out.append(int(r[0]))
        except ValueError:
            raise ParseError(f"row {i + 1}, column {rows[0][0]!r}: cannot parse {r[0]!r} as a label") from None
    return np.array(out)


def _atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _dict_rows_csv(rows):
    if not rows:
        return ""
    header = list(rows[0])
    return _csv_text(header, [[r[k] for k in header] for r in rows])


def _labels_csv(labels):
    return _csv_text(["label"], [[int(l) + 1] for l in labels])


def _matrix_csv(names, x):
    return _csv_text(list(names), x.tolist())


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_to_text(model, scaling=None):
    """Versioned text serialization; floats keep full precision."""
    comps = []
    for c in model.components:
        d = {"mu": c.mu.tolist(), "sigma": c.sigma.tolist(), "beta": c.beta.tolist()}
        if model.family is Family.MGHD:
            d.update(lam=float(c.lam), omega=float(c.omega))
        else:
            d["dof"] = float(c.dof)
        comps.append(d)
    body = {
        "family": model.family.value,
        "structure": model.structure.value,
        "weights": model.weights.tolist(),
        "components": comps,
    }
    if scaling is not None:
        body["scaling"] = {"center": scaling[0].tolist(), "scale": scaling[1].tolist()}
    return MODEL_HEADER + "\n" + _json_text(body)


def model_from_text(text):
    """Inverse of :func:`model_to_text`; returns ``(model, scaling or None)``."""
    head, _, rest = text.partition("\n")
    if head.strip() != MODEL_HEADER:
        raise ValidationError(f"not a model file (expected header {MODEL_HEADER!r})")
    try:
        body = json.loads(rest)
        fam = Family.parse(body["family"])
        comps = []
        for d in body["components"]:
            if fam is Family.MGHD:
                comps.append(GhdParams(mu=d["mu"], sigma=d["sigma"], beta=d["beta"],
                                       lam=d["lam"], omega=d["omega"]))
            else:
                comps.append(StParams(mu=d["mu"], sigma=d["sigma"], beta=d["beta"], dof=d["dof"]))
        model = MixtureModel(fam, body["weights"], tuple(comps), body["structure"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from None
    scaling = body.get("scaling")
    if scaling is not None:
        scaling = (np.array(scaling["center"], dtype=float), np.array(scaling["scale"], dtype=float))
    return model, scaling


def load_model(path):
    try:
        with open(path) as fh:
            return model_from_text(fh.read())
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


def standardize(ds):
    """Centre and scale columns by observed-cell mean and sd; returns (ds, (center, scale))."""
    center = np.array([np.mean(ds.data[~ds.mask[:, j], j]) for j in range(ds.p)])
    scale = np.array([np.std(ds.data[~ds.mask[:, j], j], ddof=1) if (~ds.mask[:, j]).sum() > 1 else 1.0
                      for j in range(ds.p)])
    scale = np.where(scale > 0, scale, 1.0)
    return _apply_scaling(ds, (center, scale)), (center, scale)


def _apply_scaling(ds, scaling):
    center, scale = scaling
    if center.size != ds.p:
        raise ValidationError(f"model scaling has {center.size} columns, data has {ds.p}")
    return MaskedDataset((ds.data - center) / scale, ds.mask, ds.column_names)


def _unscale(x, scaling):
    if scaling is None:
        return x
    return x * scaling[1] + scaling[0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _fit_config(args):
    return FitConfig(max_iter=args.max_iter, epsilon=args.epsilon, n_starts=args.n_starts,
                     seed=args.seed)


def _prepared(args):
    ds = load_csv(args.data, args.na_tokens)
    if args.scale:
        return standardize(ds)
    return ds, None


def cmd_fit(args):
    ds, scaling = _prepared(args)
    truth = _load_labels(args.truth) if args.truth else None
    rep = fit(ds, args.G, args.family, args.structure, _fit_config(args))
    report = {
        "family": rep.model.family.value,
        "structure": rep.model.structure.value,
        "G": rep.model.G,
        "n": ds.n,
        "p": ds.p,
        "loglik": rep.loglik,
        "bic": rep.bic,
        "icl": rep.icl,
        "n_params": rep.n_params,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "loglik_trace": rep.loglik_trace,
        "diagnostics": rep.diagnostics,
    }
    if truth is not None:
        if truth.size != ds.n:
            raise ValidationError(f"truth has {truth.size} labels for {ds.n} rows")
        report["ari"] = adjusted_rand_index(truth, rep.map_labels)
    out = args.out_dir
    _atomic_write(os.path.join(out, "model.hcm"), model_to_text(rep.model, scaling))
    _atomic_write(os.path.join(out, "report.json"), _json_text(report))
    _atomic_write(os.path.join(out, "labels.csv"), _labels_csv(rep.map_labels))
    _atomic_write(os.path.join(out, "imputed.csv"),
                  _matrix_csv(ds.column_names, _unscale(rep.imputed, scaling)))
    print(f"{rep.model.family.value} {rep.model.structure.value} G={rep.model.G}: "
          f"loglik={rep.loglik:.4f} BIC={rep.bic:.4f} ICL={rep.icl:.4f} "
          f"iterations={rep.iterations} converged={rep.converged}")
    if truth is not None:
        print(f"ARI={report['ari']:.4f}")
    return 0


def cmd_search(args):
    ds, _ = _prepared(args)
    grid = ModelGrid(tuple(args.G), tuple(args.structures), tuple(args.families))
    rep = search(ds, grid, _fit_config(args), workers=default_workers())
    header = ["family", "structure", "G", "loglik", "rho", "bic", "icl", "converged",
              "best_bic", "best_icl"]
    rows = [
        list(t) + [r is rep.best_by_bic, r is rep.best_by_icl]
        for r, t in zip(rep.rows, rep.table())
    ]
    _atomic_write(args.out, _csv_text(header, rows))
    note = " (no fit converged; chosen among completed fits)" if rep.from_unconverged else ""
    for name, best in (("BIC", rep.best_by_bic), ("ICL", rep.best_by_icl)):
        if best is None:
            print(f"best by {name}: none")
        else:
            print(f"best by {name}: {best.family} {best.structure} G={best.G}{note}")
    return 0


def cmd_impute(args):
    ds = load_csv(args.data, args.na_tokens)
    if args.model:
        model, scaling = load_model(args.model)
        work = _apply_scaling(ds, scaling) if scaling is not None else ds
        _, labels, imputed = predict(model, work)
    else:
        if args.G is None:
            raise UsageError("impute needs --model or -G")
        work, scaling = standardize(ds) if args.scale else (ds, None)
        rep = fit(work, args.G, args.family, args.structure, _fit_config(args))
        labels, imputed = rep.map_labels, rep.imputed
    _atomic_write(args.out, _matrix_csv(ds.column_names, _unscale(imputed, scaling)))
    if args.labels_out:
        _atomic_write(args.labels_out, _labels_csv(labels))
    return 0


def cmd_simulate(args):
    design = builtin_design(args.design, args.n_per_component)
    data, labels = generate(design, args.seed)
    if args.rate > 0:
        ds = inject_missingness(data, args.mechanism, args.rate, args.seed)
        data = np.where(ds.mask, np.nan, ds.data)
    names = [f"x{j + 1}" for j in range(design.p)]
    text = _csv_text(names, [["NA" if np.isnan(v) else v for v in row] for row in data.tolist()])
    _atomic_write(args.out, text)
    if args.labels_out:
        _atomic_write(args.labels_out, _labels_csv(labels))
    return 0


def cmd_study(args):
    design = builtin_design(args.design, args.n_per_component)
    fams = tuple(args.families) if args.families else (design.fit_family,)
    grid = ModelGrid(tuple(args.G) if args.G else (design.G,),
                     tuple(args.structures) if args.structures else (design.structure,), fams)
    res = run_study(design, tuple(args.mechanisms), tuple(args.rates), args.replications, grid,
                    _fit_config(args), seed=args.seed, workers=default_workers())
    summary = res.summary_rows()
    for r in summary:
        r["families"] = "+".join(fams)
    _atomic_write(os.path.join(args.out_dir, "summary.csv"), _dict_rows_csv(summary))
    _atomic_write(os.path.join(args.out_dir, "parameters.csv"), _dict_rows_csv(res.parameter_rows()))
    failures = [f"{c.mechanism} r={c.rate}: {f}" for c in res.cells for f in c.failures]
    _atomic_write(os.path.join(args.out_dir, "failures.txt"), "".join(f + "\n" for f in failures))
    for r in summary:
        print(f"{r['mechanism']} r={r['rate']}: mean ARI={r['mean_ari']:.4f} "
              f"mean BIC={r['mean_bic']:.4f} correct G={r['correct_G']}/{r['replications']}")
    return 0


def cmd_evaluate(args):
    a = _load_labels(args.labels)
    b = _load_labels(args.truth)
    if a.size != b.size:
        raise ValidationError(f"label files differ in length ({a.size} vs {b.size})")
    ari = adjusted_rand_index(b, a)
    text = _json_text({"n": int(a.size), "ari": ari})
    if args.out:
        _atomic_write(args.out, text)
    print(f"ARI={ari!r}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag_type(fn):
    """Turn library usage errors into argparse type errors so the message survives."""

    def wrapped(s):
        try:
            return fn(s)
        except UsageError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    wrapped.__name__ = fn.__name__.lstrip("_")
    return wrapped


@_flag_type
def _structure(s):
    return CovarianceStructure.parse(s).value


@_flag_type
def _family(s):
    return Family.parse(s).value


@_flag_type
def _mechanism(s):
    m = str(s).upper()
    if m not in MECHANISMS:
        raise UsageError(f"unknown mechanism {s!r}; expected one of {', '.join(MECHANISMS)}")
    return m


@_flag_type
def _rate(s):
    r = float(s)
    if not 0 <= r < 1:
        raise UsageError(f"rate must be in [0, 1), got {s}")
    return r


@_flag_type
def _positive_int(s):
    v = int(s)
    if v < 1:
        raise UsageError(f"expected a positive integer, got {s}")
    return v


def _add_fit_flags(p):
    p.add_argument("--epsilon", type=float, default=1e-6, help="Aitken stopping threshold")
    p.add_argument("--max-iter", type=_positive_int, default=1000)
    p.add_argument("--n-starts", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)


def _add_data_flags(p):
    p.add_argument("data", help="CSV file with a header row")
    p.add_argument("--na-tokens", nargs="*", default=list(DEFAULT_NA_TOKENS),
                   help="cell values treated as missing (default: NA, empty, ?)")
    p.add_argument("--scale", action="store_true",
                   help="standardize columns by observed mean and sd before fitting")


def build_parser():
    ap = _Parser(prog="hyperclust", description=__doc__.split("\n\n")[0].strip())
    ap.add_argument("--version", action="version", version=f"hyperclust {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    tags = ", ".join(s.value for s in ALL_STRUCTURES)

    p = sub.add_parser("fit", help="fit one mixture model")
    _add_data_flags(p)
    p.add_argument("-G", type=_positive_int, required=True, help="number of components")
    p.add_argument("--family", type=_family, default="MGHD", help="MGHD or MST")
    p.add_argument("--structure", type=_structure, default="VVV", help=f"one of {tags}")
    p.add_argument("--truth", help="labels CSV; adds the ARI to the report")
    p.add_argument("--out-dir", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("search", help="fit a grid of models and rank by BIC and ICL")
    _add_data_flags(p)
    p.add_argument("-G", type=_positive_int, nargs="+", default=[1, 2, 3, 4])
    p.add_argument("--families", type=_family, nargs="+", default=["MGHD"])
    p.add_argument("--structures", type=_structure, nargs="+", default=["VVV"], help=f"from {tags}")
    p.add_argument("--out", required=True, help="selection table CSV")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("impute", help="fill missing cells with conditional expectations")
    _add_data_flags(p)
    p.add_argument("--model", help="model file written by 'fit'")
    p.add_argument("-G", type=_positive_int, help="fit a model first when --model is absent")
    p.add_argument("--family", type=_family, default="MGHD")
    p.add_argument("--structure", type=_structure, default="VVV")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("simulate", help="draw a dataset from a built-in design")
    p.add_argument("--design", required=True, choices=DESIGN_IDS)
    p.add_argument("--n-per-component", type=_positive_int, default=200)
    p.add_argument("--mechanism", type=_mechanism, default="MCAR")
    p.add_argument("--rate", type=_rate, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="replicated simulation study")
    p.add_argument("--design", required=True, choices=DESIGN_IDS)
    p.add_argument("--n-per-component", type=_positive_int, default=200)
    p.add_argument("--mechanisms", type=_mechanism, nargs="+", default=["MCAR"])
    p.add_argument("--rates", type=_rate, nargs="+", default=[0.05])
    p.add_argument("--replications", type=_positive_int, default=10)
    p.add_argument("-G", type=_positive_int, nargs="+")
    p.add_argument("--families", type=_family, nargs="+")
    p.add_argument("--structures", type=_structure, nargs="+")
    p.add_argument("--out-dir", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("evaluate", help="adjusted Rand index between two label files")
    p.add_argument("--labels", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="write a JSON report")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except HyperclustError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:  # a malformed numeric flag
        print(f"error: UsageError: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
