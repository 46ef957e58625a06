"""Long-format cohort CSV ingestion and export.

Schema: one row per observation with a required header. Reserved columns are
subject_id, time, outcome, and (optional) sampled; the exposure column is
named explicitly (default "exposure"); every remaining column is a cheap
covariate. UTF-8, "." decimal, empty string = missing. Rows are sorted by
time within subject on ingestion; subject order follows first appearance.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .lmm import Cohort, ModelSpec, Subject

RESERVED = ("subject_id", "time", "outcome", "sampled")


class CohortFormatError(ValueError):
    """Cohort file violates the schema; carries row numbers in the message."""


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return ""
    return repr(float(x))


def read_cohort(
    path: Union[str, Path],
    exposure_col: Optional[str] = None,
    mean_covariates: Optional[Sequence[str]] = None,
) -> Cohort:
    """Parse a long-format cohort CSV into an immutable Cohort.

    exposure_col defaults to "exposure" when that column exists; pass the
    actual column name otherwise. mean_covariates restricts which cheap
    covariates enter the outcome mean model (all of them by default).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CohortFormatError(f"{path}: missing header row")
        columns = list(reader.fieldnames)
        rows = list(reader)

    required = {"subject_id", "time", "outcome"}
    missing = required - set(columns)
    if missing:
        raise CohortFormatError(f"{path}: missing required column(s) {sorted(missing)}")
    if exposure_col is None:
        exposure_col = "exposure" if "exposure" in columns else None
    elif exposure_col not in columns:
        raise CohortFormatError(f"{path}: exposure column {exposure_col!r} not present")
    cheap_cols = [
        c for c in columns if c not in RESERVED and c != exposure_col
    ]

    errors: list[str] = []
    by_subject: dict[str, dict] = {}
    for lineno, row in enumerate(rows, start=2):
        sid = (row.get("subject_id") or "").strip()
        if not sid:
            errors.append(f"row {lineno}: empty subject_id")
            continue
        rec = by_subject.setdefault(
            sid, {"times": [], "outcomes": [], "cheap": None, "exposure": [], "sampled": []}
        )
        try:
            t_val = float(row["time"])
            y_val = float(row["outcome"])
        except (TypeError, ValueError):
            errors.append(f"row {lineno}: non-numeric time/outcome")
            continue
        rec["times"].append(t_val)
        rec["outcomes"].append(y_val)
        cheap = {}
        bad = False
        for c in cheap_cols:
            raw = (row.get(c) or "").strip()
            if raw == "":
                errors.append(f"row {lineno}: missing cheap covariate {c!r}")
                bad = True
                break
            try:
                cheap[c] = float(raw)
            except ValueError:
                errors.append(f"row {lineno}: non-numeric covariate {c!r}")
                bad = True
                break
        if bad:
            continue
        if rec["cheap"] is None:
            rec["cheap"] = cheap
        elif rec["cheap"] != cheap:
            errors.append(f"row {lineno}: cheap covariates vary within subject {sid!r}")
        if exposure_col is not None:
            raw = (row.get(exposure_col) or "").strip()
            if raw == "":
                rec["exposure"].append(None)
            elif raw in ("0", "1"):
                rec["exposure"].append(int(raw))
            else:
                errors.append(f"row {lineno}: exposure must be 0/1/empty, got {raw!r}")
        raw = (row.get("sampled") or "").strip() if "sampled" in columns else ""
        if raw == "":
            rec["sampled"].append(None)
        elif raw in ("0", "1"):
            rec["sampled"].append(bool(int(raw)))
        else:
            errors.append(f"row {lineno}: sampled must be 0/1/empty, got {raw!r}")

    subjects = []
    for sid, rec in by_subject.items():
        if not rec["times"]:
            continue  # all of this subject's rows were already rejected
        order = np.argsort(np.array(rec["times"]), kind="stable")
        times = np.array(rec["times"])[order]
        outcomes = np.array(rec["outcomes"])[order]
        if np.any(np.diff(times) <= 0):
            errors.append(f"subject {sid!r}: times are not strictly increasing")
            continue
        exposures = {e for e in rec["exposure"] if e is not None}
        if len(exposures) > 1:
            errors.append(f"subject {sid!r}: exposure varies within subject")
            continue
        exposure = exposures.pop() if exposures else None
        sampled_vals = {s for s in rec["sampled"] if s is not None}
        if len(sampled_vals) > 1:
            errors.append(f"subject {sid!r}: sampled flag varies within subject")
            continue
        sampled = sampled_vals.pop() if sampled_vals else None
        if sampled and exposure is None:
            errors.append(f"subject {sid!r}: marked sampled but exposure missing")
            continue
        subjects.append(
            Subject(
                id=sid,
                times=times,
                outcomes=outcomes,
                cheap=rec["cheap"] or {},
                exposure=exposure,
                sampled=sampled,
            )
        )
    if errors:
        raise CohortFormatError(f"{path}: " + "; ".join(errors[:20]))
    if not subjects:
        raise CohortFormatError(f"{path}: no subjects parsed")

    spec = ModelSpec(
        exposure=exposure_col or "exposure",
        cheap_covariates=tuple(cheap_cols),
        mean_covariates=tuple(mean_covariates) if mean_covariates is not None else None,
    )
    return Cohort(tuple(subjects), spec)


def write_cohort(path: Union[str, Path], cohort: Cohort) -> None:
    """Write a cohort back to long-format CSV.

    The exposure column carries the model's exposure name; floats are written
    with repr so a read/write round trip is exact.
    """
    path = Path(path)
    spec = cohort.spec
    cheap_cols = list(spec.cheap_covariates)
    header = ["subject_id", "time", "outcome", *cheap_cols, spec.exposure, "sampled"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in cohort:
            exposure = "" if s.exposure is None else str(int(s.exposure))
            sampled = "" if s.sampled is None else str(int(s.sampled))
            for t, y in zip(s.times, s.outcomes):
                writer.writerow(
                    [s.id, _fmt(t), _fmt(y)]
                    + [_fmt(s.cheap[c]) for c in cheap_cols]
                    + [exposure, sampled]
                )
