"""CSV ingestion, CSV/JSON emission and the fit archive format."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ffvdfr.basis import TensorBasis
from ffvdfr.presmooth import MIN_OBSERVATIONS, VariableDomainDataset
from ffvdfr.vdfr import VdfrFit

ARCHIVE_MAGIC = "ffvdfr-fit"
ARCHIVE_VERSION = 1
CURVE_COLUMNS = ("subject_id", "t", "x")


class InputError(ValueError):
    """Schema or content problem in user-supplied tables.

    ``details`` is a JSON-ready dict (column, row, ids, ...).
    """

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: file is empty", file=str(path)) from None
        rows = [(i, row) for i, row in enumerate(reader, start=2) if row]
    return header, rows


def _number(text, path, row, column, allow_missing=False):
    text = text.strip()
    if text == "" or text.lower() in {"na", "nan"}:
        if allow_missing:
            return math.nan
        raise InputError(f"{path}: missing value in column {column!r} at row {row}",
                         file=str(path), column=column, row=row)
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"{path}: column {column!r} at row {row} is not a number: {text!r}",
                         file=str(path), column=column, row=row) from None
    if not math.isfinite(v):
        raise InputError(f"{path}: non-finite value in column {column!r} at row {row}",
                         file=str(path), column=column, row=row)
    return v


def _fill_gaps(t, x):
    """Linear interpolation over missing x; ends take the nearest observed value."""
    miss = np.isnan(x)
    if miss.all():
        return None
    if miss.any():
        x = x.copy()
        x[miss] = np.interp(t[miss], t[~miss], x[~miss])
    return x


def read_curves(path, impute: bool = False) -> dict:
    """``{subject_id: (t, x)}`` with t sorted ascending, in first-seen order."""
    header, rows = _read_rows(path)
    missing = [c for c in CURVE_COLUMNS if c not in header]
    if missing:
        raise InputError(f"{path}: missing column(s) {missing}; expected header "
                         f"{','.join(CURVE_COLUMNS)}", file=str(path), columns=missing)
    idx = {c: header.index(c) for c in CURVE_COLUMNS}
    raw: dict[str, list] = {}
    for line, row in rows:
        if len(row) != len(header):
            raise InputError(f"{path}: row {line} has {len(row)} fields, header has {len(header)}",
                             file=str(path), row=line)
        sid = row[idx["subject_id"]].strip()
        if not sid:
            raise InputError(f"{path}: empty subject_id at row {line}",
                             file=str(path), column="subject_id", row=line)
        t = _number(row[idx["t"]], path, line, "t")
        if t < 0:
            raise InputError(f"{path}: negative t at row {line}", file=str(path),
                             column="t", row=line)
        x = _number(row[idx["x"]], path, line, "x", allow_missing=impute)
        raw.setdefault(sid, []).append((t, x, line))
    out = {}
    for sid, obs in raw.items():
        obs.sort(key=lambda o: o[0])
        t = np.array([o[0] for o in obs])
        dup = np.flatnonzero(np.diff(t) == 0)
        if dup.size:
            line = obs[dup[0] + 1][2]
            raise InputError(f"{path}: duplicate (subject_id, t) = ({sid}, {t[dup[0]]:g}) "
                             f"at row {line}", file=str(path), row=line, subject_id=sid)
        x = np.array([o[1] for o in obs])
        if impute:
            x = _fill_gaps(t, x)
            if x is None:
                raise InputError(f"{path}: subject {sid} has no observed x values",
                                 file=str(path), ids=[sid])
        out[sid] = (t, x)
    return out


def read_subjects(path) -> tuple[list, np.ndarray, np.ndarray | None, list]:
    """``(ids, y, covariates or None, covariate_names)`` in file order."""
    header, rows = _read_rows(path)
    missing = [c for c in ("subject_id", "y") if c not in header]
    if missing:
        raise InputError(f"{path}: missing column(s) {missing}; expected header "
                         "subject_id,y[,covariates...]", file=str(path), columns=missing)
    i_id, i_y = header.index("subject_id"), header.index("y")
    cov_cols = [j for j in range(len(header)) if j not in (i_id, i_y)]
    names = [header[j] for j in cov_cols]
    ids, y, cov = [], [], []
    seen = set()
    for line, row in rows:
        if len(row) != len(header):
            raise InputError(f"{path}: row {line} has {len(row)} fields, header has {len(header)}",
                             file=str(path), row=line)
        sid = row[i_id].strip()
        if sid in seen:
            raise InputError(f"{path}: duplicate subject_id {sid!r} at row {line}",
                             file=str(path), row=line, subject_id=sid)
        seen.add(sid)
        ids.append(sid)
        y.append(_number(row[i_y], path, line, "y"))
        cov.append([_number(row[j], path, line, header[j]) for j in cov_cols])
    if not ids:
        raise InputError(f"{path}: no subject rows", file=str(path))
    c = np.array(cov, dtype=float) if names else None
    return ids, np.array(y), c, names


def load_dataset(curves_path, subjects_path, impute: bool = False,
                 min_observations: int = MIN_OBSERVATIONS) -> VariableDomainDataset:
    """Join the two tables into a dataset ordered as in the subjects file."""
    curves = read_curves(curves_path, impute=impute)
    ids, y, cov, names = read_subjects(subjects_path)
    no_subject = [sid for sid in curves if sid not in set(ids)]
    no_curve = [sid for sid in ids if sid not in curves]
    if no_subject:
        raise InputError(f"subject id(s) {no_subject} appear in {curves_path} but not in "
                         f"{subjects_path}", ids=no_subject)
    if no_curve:
        raise InputError(f"subject id(s) {no_curve} in {subjects_path} have no rows in "
                         f"{curves_path}", ids=no_curve)
    short = [sid for sid in ids if curves[sid][0].size < min_observations]
    if short:
        raise InputError(f"subject(s) with fewer than {min_observations} observations: {short}",
                         ids=short, min_observations=min_observations)
    return VariableDomainDataset(
        points=[curves[s][0] for s in ids],
        values=[curves[s][1] for s in ids],
        y=y, covariates=cov, ids=ids, covariate_names=names or None,
        min_observations=min_observations,
    )


def fmt(v) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer))
                    and not isinstance(v, bool) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_dataset(data: VariableDomainDataset, curves_path, subjects_path):
    write_csv(curves_path, CURVE_COLUMNS,
              ((sid, t, x) for sid, ts, xs in zip(data.ids, data.points, data.values)
               for t, x in zip(ts, xs)))
    names = list(data.covariate_names or [])
    cov = data.covariates if data.covariates is not None else np.empty((len(data), 0))
    write_csv(subjects_path, ["subject_id", "y", *names],
              ([sid, y, *c] for sid, y, c in zip(data.ids, data.y, cov)))


def _clean(obj):
    # strict JSON has no NaN/Infinity; those become null
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj, path=None) -> str:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# Fit archive
# ---------------------------------------------------------------------------


@dataclass
class FitArchive:
    """What the archive round-trips: the fit plus free-form metadata."""

    fit: VdfrFit
    meta: dict


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def fit_to_dict(fit: VdfrFit, meta: dict | None = None) -> dict:
    return {
        "format": ARCHIVE_MAGIC,
        "version": ARCHIVE_VERSION,
        "family": fit.family,
        "tensor": fit.tensor.to_dict(),
        "alpha": float(fit.alpha),
        "gamma": _floats(fit.gamma),
        "covariate_names": list(fit.covariate_names),
        "b": _floats(fit.b),
        "nu": _floats(fit.nu),
        "delta": _floats(fit.delta),
        "tau2_t": float(fit.tau2_t),
        "tau2_T": None if fit.tau2_T is None else float(fit.tau2_T),
        "phi": float(fit.phi),
        "ed": float(fit.ed),
        "deviance": float(fit.deviance),
        "aic": float(fit.aic),
        "convergence": {
            "iterations": int(fit.iterations),
            "rel_change": float(fit.rel_change),
            "converged": bool(fit.converged),
        },
        "kept_null": [int(k) for k in fit.kept_null],
        "meta": meta or {},
    }


def fit_from_dict(d: dict) -> FitArchive:
    if not isinstance(d, dict) or d.get("format") != ARCHIVE_MAGIC:
        raise InputError("not a fit archive (format tag missing or wrong)")
    if d.get("version") != ARCHIVE_VERSION:
        raise InputError(f"unsupported archive version {d.get('version')!r}; "
                         f"this build reads version {ARCHIVE_VERSION}")
    try:
        conv = d["convergence"]
        fit = VdfrFit(
            tensor=TensorBasis.from_dict(d["tensor"]),
            family=d["family"],
            alpha=float(d["alpha"]),
            gamma=np.array(d["gamma"], dtype=float),
            b=np.array(d["b"], dtype=float),
            nu=np.array(d["nu"], dtype=float),
            delta=np.array(d["delta"], dtype=float),
            tau2_t=float(d["tau2_t"]),
            tau2_T=None if d["tau2_T"] is None else float(d["tau2_T"]),
            phi=float(d["phi"]),
            ed=float(d["ed"]),
            deviance=float(d["deviance"]),
            aic=float(d["aic"]),
            iterations=int(conv["iterations"]),
            rel_change=float(conv["rel_change"]),
            converged=bool(conv["converged"]),
            kept_null=list(d["kept_null"]),
            fitted=np.empty(0),
            covariate_names=list(d["covariate_names"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"corrupt fit archive: {exc!r}") from exc
    if fit.b.size != fit.tensor.dimension:
        raise InputError("corrupt fit archive: coefficient count does not match the basis")
    return FitArchive(fit, dict(d.get("meta", {})))


def save_fit(fit: VdfrFit, path, meta: dict | None = None) -> str:
    return dump_json(fit_to_dict(fit, meta), path)


def load_fit(path) -> FitArchive:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read fit archive {path}: {exc}", file=str(path)) from exc
    return fit_from_dict(d)
