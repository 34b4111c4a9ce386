"""CSV data files, canonical JSON for fits and models, and the moment-tensor map."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .distributions import SvMFParams, TransportBase
from .estimation import Dataset, FitConfig, FitResult, TransformRecord
from .exceptions import ValidationError
from .link import LinkParams, ReparamLink, to_reparam
from .simulation import Model

__all__ = [
    "SCHEMA_VERSION",
    "ColumnSpec",
    "Preprocessing",
    "load_csv",
    "save_csv",
    "numbered_columns",
    "unit_rows",
    "read_header",
    "read_table",
    "write_table",
    "dumps",
    "fit_to_dict",
    "fit_from_dict",
    "save_fit",
    "load_fit",
    "model_to_dict",
    "model_from_dict",
    "load_model",
    "mt_to_s4",
    "s4_to_mt",
    "normalize_mt",
    "MT_COLUMNS",
]

SCHEMA_VERSION = 1
RENORM_TOL = 1e-6
MT_COLUMNS = ("Mrr", "Mtt", "Mff", "Mrt", "Mrf", "Mtf")
_SQ2 = math.sqrt(2.0)
_SQ6 = math.sqrt(6.0)


# ---------------------------------------------------------------------------
# Canonical JSON


def _encode(obj, out: list):
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            out.append("NaN")
        elif math.isinf(x):
            out.append("Infinity" if x > 0 else "-Infinity")
        else:
            out.append(format(x, ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        keys = sorted(obj)
        if any(not isinstance(k, str) for k in keys):
            raise TypeError("JSON object keys must be strings")
        out.append("{")
        for i, k in enumerate(keys):
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(":")
            _encode(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for i, v in enumerate(items):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    """Compact JSON with sorted keys and every float written with 17 significant digits."""
    out: list[str] = []
    _encode(obj, out)
    return "".join(out) + "\n"


def _arr(v, shape=None):
    if v is None:
        return None
    a = np.array(v, dtype=float)
    return a if shape is None else a.reshape(shape)


# ---------------------------------------------------------------------------
# Parameter blocks


def link_to_dict(link: LinkParams) -> dict:
    return {
        "dims": list(link.dims),
        "B0": link.B0,
        "bs": link.bs,
        "be": link.be,
        "Rs": link.Rs,
        "Re": link.Re,
    }


def link_from_dict(d: dict) -> LinkParams:
    return LinkParams(_arr(d["B0"]), _arr(d["bs"]), _arr(d["be"]), _arr(d.get("Rs")), _arr(d.get("Re")))


def reparam_to_dict(rp: ReparamLink) -> dict:
    return {"dims": list(rp.dims), "b01": rp.b01, "rs1": rp.rs1, "Omega": rp.Omega}


def reparam_from_dict(d: dict) -> ReparamLink:
    p, q_s, q_e = d["dims"]
    return ReparamLink(_arr(d["b01"]), _arr(d.get("rs1")), _arr(d["Omega"], (p, q_s + q_e)), q_s, q_e)


def error_to_dict(e: SvMFParams) -> dict:
    return {"kappa": e.kappa, "scales": e.scales}


def error_from_dict(d: dict) -> SvMFParams:
    return SvMFParams(float(d["kappa"]), _arr(d["scales"]))


def base_to_dict(b: TransportBase | None) -> dict | None:
    return None if b is None else {"gamma01": b.gamma01, "axes": b.axes}


def base_from_dict(d: dict | None) -> TransportBase | None:
    if d is None:
        return None
    g = _arr(d["gamma01"])
    return TransportBase(g, _arr(d["axes"], (g.shape[0], g.shape[0] - 1)))


def transform_to_dict(t: TransformRecord | None) -> dict | None:
    if t is None:
        return None
    return {"Qy": t.Qy, "Qs": t.Qs, "L": t.L, "center": t.center, "flags": dict(t.flags)}


def transform_from_dict(d: dict | None) -> TransformRecord | None:
    if d is None:
        return None
    return TransformRecord(_arr(d["Qy"]), _arr(d.get("Qs")), _arr(d.get("L")), _arr(d.get("center")),
                           dict(d.get("flags", {})))


@dataclass(frozen=True)
class Preprocessing:
    """Column bookkeeping applied before fitting; replayed by ``predict``.

    ``standardize`` maps Euclidean column names to ``(mean, sd)``.
    """

    response: tuple = ()
    spherical: tuple = ()
    euclidean: tuple = ()
    add_intercept: bool = False
    standardize: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "response": list(self.response),
            "spherical": list(self.spherical),
            "euclidean": list(self.euclidean),
            "add_intercept": self.add_intercept,
            "standardize": {k: list(v) for k, v in self.standardize.items()},
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> Preprocessing | None:
        if d is None:
            return None
        return cls(tuple(d["response"]), tuple(d["spherical"]), tuple(d["euclidean"]),
                   bool(d["add_intercept"]),
                   {k: (float(v[0]), float(v[1])) for k, v in d["standardize"].items()})


# ---------------------------------------------------------------------------
# Fit results


def fit_to_dict(fit: FitResult, preprocessing: Preprocessing | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "fit",
        "model": fit.model,
        "n": fit.n,
        "link": link_to_dict(fit.link),
        "link_reparam": reparam_to_dict(fit.link_reparam),
        "error": error_to_dict(fit.error),
        "base": base_to_dict(fit.base),
        "loglik": fit.loglik,
        "aic": fit.aic,
        "dof": fit.dof,
        "convergence": {
            "converged": fit.converged,
            "iterations": fit.iterations,
            "grad_norm": fit.grad_norm,
            "constraint_residual": fit.constraint_residual,
            "starts": [list(s) for s in fit.starts],
            "stages": dict(fit.stages),
            "notes": list(fit.notes),
        },
        "transform": transform_to_dict(fit.transform),
        "config": asdict(fit.config),
        "preprocessing": None if preprocessing is None else preprocessing.to_dict(),
    }


def _check_schema(d: dict, kind: str):
    if not isinstance(d, dict):
        raise ValidationError("expected a JSON object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {d.get('schema_version')!r}")
    if d.get("kind") != kind:
        raise ValidationError(f"expected a '{kind}' document, found {d.get('kind')!r}")


def fit_from_dict(d: dict) -> tuple[FitResult, Preprocessing | None]:
    _check_schema(d, "fit")
    try:
        conv = d["convergence"]
        fit = FitResult(
            model=d["model"],
            link=link_from_dict(d["link"]),
            link_reparam=reparam_from_dict(d["link_reparam"]),
            error=error_from_dict(d["error"]),
            base=base_from_dict(d["base"]),
            loglik=d["loglik"],
            dof=d["dof"],
            converged=conv["converged"],
            iterations=conv["iterations"],
            grad_norm=conv["grad_norm"],
            constraint_residual=conv["constraint_residual"],
            starts=tuple(tuple(s) for s in conv["starts"]),
            transform=transform_from_dict(d["transform"]),
            config=FitConfig(**d["config"]),
            n=d["n"],
            stages=dict(conv["stages"]),
            notes=tuple(conv["notes"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed fit document: {exc}") from exc
    return fit, Preprocessing.from_dict(d.get("preprocessing"))


def _read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def save_fit(path, fit: FitResult, preprocessing: Preprocessing | None = None):
    Path(path).write_text(dumps(fit_to_dict(fit, preprocessing)), encoding="utf-8")


def load_fit(path) -> tuple[FitResult, Preprocessing | None]:
    return fit_from_dict(_read_json(path))


# ---------------------------------------------------------------------------
# Generative models


def model_to_dict(model: Model) -> dict:
    link = model.link
    rp = link if isinstance(link, ReparamLink) else to_reparam(link)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "model",
        "link": None if isinstance(link, ReparamLink) else link_to_dict(link),
        "link_reparam": reparam_to_dict(rp),
        "error": error_to_dict(model.error),
        "base": base_to_dict(model.base),
    }


def model_from_dict(d: dict) -> Model:
    """A model document, or a fit document read as the model it estimated.

    The natural link is used when present, otherwise the reparameterised one.
    """
    if isinstance(d, dict) and d.get("kind") == "fit":
        fit, _ = fit_from_dict(d)
        return Model(fit.link_reparam, fit.error, fit.base)
    _check_schema(d, "model")
    try:
        link = link_from_dict(d["link"]) if d.get("link") else reparam_from_dict(d["link_reparam"])
        return Model(link, error_from_dict(d["error"]), base_from_dict(d.get("base")))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model document: {exc}") from exc


def load_model(path) -> Model:
    return model_from_dict(_read_json(path))


# ---------------------------------------------------------------------------
# CSV


def numbered_columns(header, prefix):
    pat = re.compile(rf"^{prefix}(\d+)$")
    hits = [(int(m.group(1)), h) for h in header if (m := pat.match(h))]
    return tuple(h for _, h in sorted(hits))


@dataclass(frozen=True)
class ColumnSpec:
    """Which CSV columns hold the response and the two covariate blocks.

    Without explicit names the columns ``y1..yp``, ``xs1..`` and ``xe1..``
    are used (numeric suffix order).
    """

    response: tuple = ()
    spherical: tuple = ()
    euclidean: tuple = ()
    add_intercept: bool = False
    weights: str | None = None

    def __post_init__(self):
        for name in ("response", "spherical", "euclidean"):
            object.__setattr__(self, name, tuple(getattr(self, name) or ()))
        cols = list(self.response) + list(self.spherical) + list(self.euclidean)
        if self.weights:
            cols.append(self.weights)
        if len(set(cols)) != len(cols):
            raise ValidationError("column sets must be disjoint")

    def resolve(self, header) -> ColumnSpec:
        header = list(header)
        spec = ColumnSpec(
            self.response or numbered_columns(header, "y"),
            self.spherical or (() if self.response else numbered_columns(header, "xs")),
            self.euclidean or (() if self.response else numbered_columns(header, "xe")),
            self.add_intercept,
            self.weights,
        )
        wanted = list(spec.response) + list(spec.spherical) + list(spec.euclidean)
        if spec.weights:
            wanted.append(spec.weights)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ValidationError(f"missing columns: {', '.join(missing)}")
        return spec


def read_table(path, required=None) -> tuple[list[str], NDArray]:
    """Header and float matrix of a comma-separated file.

    Malformed or non-finite entries raise with their data-row numbers
    (1-based, header excluded).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    cols = range(len(header)) if required is None else [header.index(c) for c in required]
    bad, nonfinite = [], []
    out = np.empty((len(rows) - 1, len(cols)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            bad.append(f"row {i + 1}: expected {len(header)} fields, found {len(row)}")
            continue
        try:
            vals = [float(row[j]) for j in cols]
        except ValueError as exc:
            bad.append(f"row {i + 1}: {exc}")
            continue
        if not all(math.isfinite(v) for v in vals):
            nonfinite.append(i + 1)
        out[i] = vals
    if bad:
        raise ValidationError(f"{path}: malformed rows; " + "; ".join(bad[:20]))
    if nonfinite:
        raise ValidationError(f"{path}: non-finite values in rows {_list(nonfinite)}")
    if out.shape[0] == 0:
        raise ValidationError(f"{path}: no data rows")
    return header if required is None else list(required), out


def _list(idx) -> str:
    idx = list(idx)
    s = ", ".join(str(i) for i in idx[:20])
    return s + (f" (and {len(idx) - 20} more)" if len(idx) > 20 else "")


def unit_rows(x: NDArray, what: str, path) -> NDArray:
    norms = np.linalg.norm(x, axis=1)
    off = np.flatnonzero(np.abs(norms - 1.0) > RENORM_TOL)
    if off.size:
        raise ValidationError(
            f"{path}: {what} rows are not unit vectors (rows {_list(off + 1)}; "
            f"norm of row {off[0] + 1} is {norms[off[0]]:.6g})"
        )
    # rows already unit to rounding are kept bit-for-bit so reloads are idempotent
    fix = np.abs(norms - 1.0) > 1e-14
    x = x.copy()
    x[fix] /= norms[fix, None]
    return x


def read_header(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise ValidationError(f"{path}: empty file, header row required")
    return [h.strip() for h in header]


def load_csv(path, spec: ColumnSpec | None = None) -> Dataset:
    """Read a dataset; unit-vector blocks within 1e-6 of norm one are renormalised."""
    spec = (spec or ColumnSpec()).resolve(read_header(path))
    if len(spec.response) < 2:
        raise ValidationError("the response block needs at least two columns")
    cols = list(spec.response) + list(spec.spherical) + list(spec.euclidean)
    if spec.weights:
        cols.append(spec.weights)
    _, M = read_table(path, cols)
    p, q_s, q_e = len(spec.response), len(spec.spherical), len(spec.euclidean)
    y = unit_rows(M[:, :p], "response", path)
    xs = unit_rows(M[:, p:p + q_s], "spherical covariate", path) if q_s else None
    xe = M[:, p + q_s:p + q_s + q_e] if q_e else None
    if spec.add_intercept:
        ones = np.ones((M.shape[0], 1))
        xe = ones if xe is None else np.hstack([ones, xe])
    w = M[:, -1] if spec.weights else None
    return Dataset(y, xs, xe, w)


def write_table(path, header, columns):
    """Write columns (equal-length 1-D arrays or lists) with floats at 17 significant digits."""
    n = len(columns[0]) if columns else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i in range(n):
            wr.writerow([_cell(c[i]) for c in columns])


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def dataset_columns(data: Dataset) -> tuple[list[str], list]:
    header, cols = [], []
    for prefix, block in (("y", data.y), ("xs", data.xs), ("xe", data.xe)):
        if block is not None:
            for j in range(block.shape[1]):
                header.append(f"{prefix}{j + 1}")
                cols.append(block[:, j])
    if data.weights is not None:
        header.append("w")
        cols.append(data.weights)
    return header, cols


def save_csv(path, data: Dataset):
    """Write ``y1..``, ``xs1..``, ``xe1..`` (and ``w`` when weighted)."""
    header, cols = dataset_columns(data)
    write_table(path, header, cols)


# ---------------------------------------------------------------------------
# Moment tensors


def _check_mt(m: NDArray, tol: float):
    trace = m[..., 0] + m[..., 1] + m[..., 2]
    frob = np.sqrt(np.sum(m[..., :3] ** 2, axis=-1) + 2 * np.sum(m[..., 3:] ** 2, axis=-1))
    bad_t = np.flatnonzero(np.abs(np.atleast_1d(trace)) > tol)
    bad_n = np.flatnonzero(np.abs(np.atleast_1d(frob) - 1.0) > tol)
    if bad_t.size:
        raise ValidationError(f"moment tensors with nonzero trace (rows {_list(bad_t + 1)})")
    if bad_n.size:
        raise ValidationError(f"moment tensors without unit Frobenius norm (rows {_list(bad_n + 1)})")


def normalize_mt(mt: ArrayLike) -> NDArray:
    """Remove the isotropic part and rescale to unit Frobenius norm.

    Components are ordered ``Mrr, Mtt, Mff, Mrt, Mrf, Mtf``.
    """
    m = np.array(mt, dtype=float)
    if m.shape[-1] != 6:
        raise ValidationError("moment tensors need six components")
    m[..., :3] -= m[..., :3].mean(axis=-1, keepdims=True)
    frob = np.sqrt(np.sum(m[..., :3] ** 2, axis=-1) + 2 * np.sum(m[..., 3:] ** 2, axis=-1))
    if np.any(frob == 0):
        raise ValidationError("moment tensor is purely isotropic")
    return m / frob[..., None]


def mt_to_s4(mt: ArrayLike, tol: float = 1e-8) -> NDArray:
    """Trace-free unit-norm tensor ``(Mrr, Mtt, Mff, Mrt, Mrf, Mtf)`` to a point of S^4."""
    m = np.asarray(mt, dtype=float)
    if m.shape[-1] != 6:
        raise ValidationError("moment tensors need six components")
    _check_mt(m, tol)
    rr, tt, ff, rt, rf, tf = np.moveaxis(m, -1, 0)
    return np.stack([(rr - tt) / _SQ2, (rr + tt - 2 * ff) / _SQ6, _SQ2 * rt, _SQ2 * rf, _SQ2 * tf], axis=-1)


def s4_to_mt(v: ArrayLike) -> NDArray:
    """Inverse of :func:`mt_to_s4`; the returned trace is exactly zero."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 5:
        raise ValidationError("points of S^4 have five coordinates")
    u1, u2, u3, u4, u5 = np.moveaxis(v, -1, 0)
    rr = u1 / _SQ2 + u2 / _SQ6
    tt = -u1 / _SQ2 + u2 / _SQ6
    ff = -(rr + tt)
    return np.stack([rr, tt, ff, u3 / _SQ2, u4 / _SQ2, u5 / _SQ2], axis=-1)
