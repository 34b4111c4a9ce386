"""Command-line interface: ``spherereg <command> ...``.

Exit status is 0 on success, 2 for invalid input, 3 when an optimizer
fails to converge and 4 for file-system errors.  Failures print a JSON
object ``{"error", "message", "exit_code"}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .estimation import Dataset, FitConfig, count_dof, fit
from .exceptions import ConvergenceError, SphereRegError, ValidationError
from .inference import bootstrap_ci_scales, bootstrap_lrt, loo_cv
from .simulation import generate_covariates, simulate_responses

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def _names(s: str | None) -> tuple:
    return tuple(c.strip() for c in s.split(",") if c.strip()) if s else ()


def _standardize(data: Dataset, spec: io.ColumnSpec, cols: tuple) -> tuple[Dataset, dict]:
    """Centre and scale the named Euclidean columns; constant columns are refused."""
    if not cols:
        return data, {}
    names = list(spec.euclidean)
    offset = 1 if spec.add_intercept else 0
    xe = np.array(data.xe)
    out = {}
    for c in cols:
        if c not in names:
            raise ValidationError(f"--standardize: {c} is not a Euclidean covariate column")
        j = names.index(c) + offset
        m, s = float(np.mean(xe[:, j])), float(np.std(xe[:, j]))
        if s <= 1e-12 * (1.0 + abs(m)):
            raise ValidationError(f"--standardize: column {c} is constant")
        xe[:, j] = (xe[:, j] - m) / s
        out[c] = (m, s)
    return Dataset(data.y, data.xs, xe, data.weights), out


def _load(args) -> tuple[Dataset, io.ColumnSpec, dict]:
    raw = io.ColumnSpec(_names(args.y), _names(args.xs), _names(args.xe), args.intercept, args.weights)
    data = io.load_csv(args.data, raw)
    spec = raw.resolve(io.read_header(args.data))
    data, std = _standardize(data, spec, _names(getattr(args, "standardize", None)))
    return data, spec, std


def _config(args, **over) -> FitConfig:
    cfg = FitConfig(
        model=args.model,
        gamma01=args.gamma01,
        n_starts=args.starts,
        seed=args.seed,
        transform=not args.no_transform,
    )
    return replace(cfg, **over)


def _report_text(f, pre: io.Preprocessing) -> str:
    p, q_s, q_e = f.dims
    lines = [
        f"model            {f.model}",
        f"dimensions       p={p} q_s={q_s} q_e={q_e} (n={f.n})",
        f"log-likelihood   {f.loglik:.10g}",
        f"dof              {f.dof}",
        f"AIC              {f.aic:.10g}",
        f"kappa            {f.kappa:.10g}",
        f"scales           {' '.join(f'{a:.6g}' for a in f.error.scales)}",
        f"converged        {f.converged} (iterations {f.iterations}, "
        f"gradient {f.grad_norm:.3g}, constraints {f.constraint_residual:.3g})",
        f"b01              {' '.join(f'{x:.6g}' for x in f.link_reparam.b01)}",
    ]
    if f.link_reparam.rs1 is not None:
        lines.append(f"rs1              {' '.join(f'{x:.6g}' for x in f.link_reparam.rs1)}")
    lines.append(f"beta_s           {' '.join(f'{x:.6g}' for x in f.link.bs)}")
    lines.append(f"beta_e           {' '.join(f'{x:.6g}' for x in f.link.be)}")
    if f.base is not None:
        lines.append(f"gamma01          {' '.join(f'{x:.6g}' for x in f.base.gamma01)}")
    if len(f.starts) > 1:
        lines.append("starts           " + ", ".join(f"{s[0]}:{s[1]:.8g}" for s in f.starts))
    if pre.add_intercept:
        lines.append("covariates       intercept column prepended to the Euclidean block")
    for c, (m, s) in pre.standardize.items():
        lines.append(f"standardised     {c} (mean {m:.6g}, sd {s:.6g})")
    lines.extend(f"note             {n}" for n in f.notes)
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    data, spec, std = _load(args)
    res = fit(data, _config(args))
    pre = io.Preprocessing(spec.response, spec.spherical, spec.euclidean, spec.add_intercept, std)
    io.save_fit(args.out, res, pre)
    report = args.report or str(Path(args.out).with_suffix(".txt"))
    Path(report).write_text(_report_text(res, pre), encoding="utf-8")
    if not res.converged:
        raise ConvergenceError(f"fit did not converge; results written to {args.out}: " + "; ".join(res.notes))
    return EXIT_OK


def _covariates_for(pre: io.Preprocessing, path) -> tuple:
    cols = list(pre.spherical) + list(pre.euclidean)
    if not cols:
        raise ValidationError("fit has no covariate columns recorded")
    _, M = io.read_table(path, cols)
    q_s = len(pre.spherical)
    xs = M[:, :q_s] if q_s else None
    if xs is not None:
        xs = io.unit_rows(xs, "spherical covariate", path)
    xe = M[:, q_s:] if pre.euclidean else None
    if xe is not None:
        xe = xe.copy()
        for c, (m, s) in pre.standardize.items():
            j = list(pre.euclidean).index(c)
            xe[:, j] = (xe[:, j] - m) / s
    if pre.add_intercept:
        ones = np.ones((M.shape[0], 1))
        xe = ones if xe is None else np.hstack([ones, xe])
    return xs, xe


def cmd_predict(args) -> int:
    res, pre = io.load_fit(args.fit)
    if pre is None:
        p, q_s, q_e = res.dims
        pre = io.Preprocessing(tuple(f"y{j + 1}" for j in range(p)), tuple(f"xs{j + 1}" for j in range(q_s)),
                               tuple(f"xe{j + 1}" for j in range(q_e)))
    xs, xe = _covariates_for(pre, args.data)
    mu = np.atleast_2d(res.predict(xs, xe))
    io.write_table(args.out, [f"mu{j + 1}" for j in range(mu.shape[1])], list(mu.T))
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = io.load_model(args.params)
    dims = model.dims
    if args.covariates:
        header, M = io.read_table(args.covariates)
        xs_cols = io.numbered_columns(header, "xs")
        xe_cols = io.numbered_columns(header, "xe")
        if len(xs_cols) != dims[1] or len(xe_cols) != dims[2]:
            raise ValidationError(
                f"covariate file has {len(xs_cols)} xs and {len(xe_cols)} xe columns; "
                f"the model needs {dims[1]} and {dims[2]}"
            )
        idx = {h: i for i, h in enumerate(header)}
        xs = io.unit_rows(M[:, [idx[c] for c in xs_cols]], "spherical covariate", args.covariates) if dims[1] else None
        xe = M[:, [idx[c] for c in xe_cols]] if dims[2] else None
    else:
        if args.n is None:
            raise ValidationError("simulate needs --n or --covariates")
        center = None
        if dims[1] and model.link.rs1 is not None:
            center = model.link.rs1
        ss = np.random.SeedSequence(args.seed).spawn(2)
        xs, xe = generate_covariates(args.n, dims, ss[0], kappa_s=args.kappa_s, center=center,
                                     intercept=args.intercept, sd=args.sd)
    ss = np.random.SeedSequence(args.seed).spawn(2)
    y = simulate_responses(model, xs, xe, ss[1])
    io.save_csv(args.out, Dataset(y, xs, xe))
    return EXIT_OK


def _write_report(args, doc: dict, header, columns):
    Path(args.out).write_text(io.dumps(doc), encoding="utf-8")
    if args.csv:
        io.write_table(args.csv, header, columns)


def cmd_cv(args) -> int:
    data, _, _ = _load(args)
    base = None
    if args.fit:
        base, _ = io.load_fit(args.fit)
    cfg = base.config if base is not None else _config(args)
    rep = loo_cv(data, cfg, fit=base, n_jobs=args.jobs)
    doc = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "loo",
        "metric": "squared chordal distance",
        "model": cfg.model,
        "mse": rep.mse,
        "errors": [None if not np.isfinite(e) else float(e) for e in rep.errors],
        "skipped": list(rep.skipped),
        "messages": list(rep.messages),
    }
    ok = [i not in rep.skipped for i in range(len(rep.errors))]
    _write_report(args, doc, ["case", "sq_error", "ok"],
                  [list(range(1, len(rep.errors) + 1)), list(rep.errors), ok])
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    data, _, _ = _load(args)
    if args.kind == "lrt":
        rep = bootstrap_lrt(data, _config(args, model="svmf"), B=args.B, seed=args.seed, n_jobs=args.jobs)
        reports = [rep]
    else:
        if args.fit:
            base, _ = io.load_fit(args.fit)
        else:
            base = fit(data, _config(args, model="svmf"))
        reports = bootstrap_ci_scales(base, data, B=args.B, level=args.level, seed=args.seed, n_jobs=args.jobs)
    doc = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": f"bootstrap-{args.kind}",
        "reports": [r.to_dict() for r in reports],
    }
    header = ["resample"] + [r.statistic for r in reports]
    n = max(len(r.values) for r in reports)
    cols = [list(range(1, n + 1))] + [list(r.values) + [None] * (n - len(r.values)) for r in reports]
    _write_report(args, doc, header, cols)
    if any(r.unreliable for r in reports):
        print(json.dumps({"warning": "more than 10% of resamples failed", "failures": reports[0].failures}),
              file=sys.stderr)
    return EXIT_OK


def cmd_dof(args) -> int:
    gamma = "estimated" if args.estimate_gamma01 else "tied-to-b01"
    print(count_dof((args.p, args.qs, args.qe), args.model, gamma))
    return EXIT_OK


def cmd_convert_mt(args) -> int:
    if args.to == "s4":
        _, M = io.read_table(args.input, list(io.MT_COLUMNS))
        if args.normalize:
            M = io.normalize_mt(M)
        V = io.mt_to_s4(M)
        io.write_table(args.out, [f"u{j + 1}" for j in range(5)], list(V.T))
    else:
        _, V = io.read_table(args.input, [f"u{j + 1}" for j in range(5)])
        io.write_table(args.out, list(io.MT_COLUMNS), list(io.s4_to_mt(V).T))
    return EXIT_OK


def _data_args(p):
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--y", help="comma-separated response columns (default y1..yp)")
    p.add_argument("--xs", help="spherical covariate columns (default xs1..)")
    p.add_argument("--xe", help="Euclidean covariate columns (default xe1..)")
    p.add_argument("--weights", help="case-weight column")
    p.add_argument("--intercept", action="store_true", help="prepend a column of ones to the Euclidean block")
    p.add_argument("--standardize", help="Euclidean columns to centre and scale to unit sd")


def _model_args(p, default="svmf"):
    p.add_argument("--model", choices=("vmf", "svmf"), default=default)
    p.add_argument("--gamma01", choices=("estimated", "tied-to-b01", "tied-to-mean"), default="estimated")
    p.add_argument("--starts", type=int, default=1, help="number of optimizer starts")
    p.add_argument("--no-transform", action="store_true", help="skip the preliminary rotation")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message, "exit_code": EXIT_VALIDATION}),
              file=sys.stderr)
        sys.exit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spherereg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = command("fit", cmd_fit, "fit a model and write its JSON and a text report")
    _data_args(p)
    _model_args(p)
    p.add_argument("--out", required=True, help="fit JSON path")
    p.add_argument("--report", help="text report path (default: OUT with .txt)")

    p = command("predict", cmd_predict, "predicted mean directions for new covariates")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True, help="covariate CSV")
    p.add_argument("--out", required=True)

    p = command("simulate", cmd_simulate, "simulate responses from a model or fit JSON")
    p.add_argument("--params", required=True)
    p.add_argument("--covariates", help="CSV with xs*/xe* columns")
    p.add_argument("--n", type=int)
    p.add_argument("--kappa-s", type=float, default=10.0, help="concentration of generated spherical covariates")
    p.add_argument("--sd", type=float, default=1.0, help="sd of generated Euclidean covariates")
    p.add_argument("--intercept", action="store_true", help="make xe1 a column of ones")
    p.add_argument("--out", required=True)

    p = command("cv", cmd_cv, "leave-one-out cross-validation")
    _data_args(p)
    _model_args(p)
    p.add_argument("--fit", help="warm-start from this fit (its configuration is reused)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", help="per-case CSV")

    p = command("bootstrap", cmd_bootstrap, "parametric bootstrap LRT or scale intervals")
    p.add_argument("kind", choices=("lrt", "ci"))
    _data_args(p)
    _model_args(p)
    p.add_argument("--fit", help="SvMF fit for 'ci' (otherwise fitted here)")
    p.add_argument("--B", type=int, default=99)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", help="per-resample CSV")

    p = command("dof", cmd_dof, "number of free parameters")
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--qs", type=int, default=0)
    p.add_argument("--qe", type=int, default=0)
    p.add_argument("--model", choices=("vmf", "svmf"), default="svmf")
    p.add_argument("--estimate-gamma01", action="store_true")

    p = command("convert-mt", cmd_convert_mt, "moment tensors <-> points of S^4")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--to", choices=("s4", "mt"), default="s4")
    p.add_argument("--normalize", action="store_true", help="remove the trace and rescale before mapping")
    return ap


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        return _fail(exc, EXIT_CONVERGENCE)
    except (SphereRegError, ValueError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail(exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
