"""Reading trial data and writing reports and plot-ready curve tables."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from doseequiv.bootstrap import EquivalenceReport, report_from_dict, report_to_dict
from doseequiv.errors import DataError, EmptyGroup, MalformedRow, MixedSchema
from doseequiv.model import CountTable, DoseDesign, GumbelParams, LinkParams, link_prob

SUBJECT_COLUMNS = ("y_eff", "y_tox")
COUNT_COLUMNS = ("n", "z", "z00", "z01", "z10", "z11")
REFERENCE_NAMES = ("ref", "reference", "r", "control")
_SHORT = {"efficacy": "e", "toxicity": "t"}


# ---------------------------------------------------------------------------
# Input
# ---------------------------------------------------------------------------

def _binary(value: str, column: str, line: int) -> int:
    if value not in ("0", "1"):
        raise MalformedRow(line, f"{column} must be 0 or 1, got {value!r}")
    return int(value)


def _count(value: str, column: str, line: int) -> int:
    try:
        v = int(value)
    except ValueError:
        raise MalformedRow(line, f"{column} must be a nonnegative integer, got {value!r}") from None
    if v < 0:
        raise MalformedRow(line, f"{column} must be a nonnegative integer, got {value!r}")
    return v


def _dose(value: str, line: int) -> float:
    try:
        d = float(value)
    except ValueError:
        raise MalformedRow(line, f"dose must be a number, got {value!r}") from None
    if not math.isfinite(d):
        raise MalformedRow(line, f"dose must be finite, got {value!r}")
    return d


def _row_kind(row: dict, line: int) -> str:
    has_subject = bool(row.get("y_eff", "").strip())
    has_count = any(row.get(c, "").strip() for c in COUNT_COLUMNS)
    if has_subject and has_count:
        raise MixedSchema(f"line {line}: row carries both subject and count fields")
    if not (has_subject or has_count):
        raise MalformedRow(line, "row has neither y_eff nor count fields")
    return "subject" if has_subject else "count"


def _order_groups(names: list[str]) -> list[str]:
    if len(names) != 2:
        raise DataError(f"expected exactly two groups, found {len(names)}: {names}")
    ref = [g for g in names if g.strip().lower() in REFERENCE_NAMES]
    return ref + [g for g in names if g not in ref] if len(ref) == 1 else names


def parse_subject_csv(path) -> tuple[CountTable, CountTable]:
    """Read one trial into ``(reference, test)`` count tables.

    Rows are either one subject each (``group, dose, y_eff[, y_tox]``) or
    pre-aggregated (``group, dose, n, z`` or ``group, dose, n, z00, z01, z10,
    z11``).  The reference group is the one named ``ref``/``reference``
    (case-insensitive) if present, otherwise the first group in the file.

    Raises
    ------
    MalformedRow
        For an unreadable value, with its line number.
    MixedSchema
        If subject rows and count rows appear in the same file.
    EmptyGroup
        If a group has fewer than two distinct doses.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        fields = [f.strip() for f in reader.fieldnames]
        reader.fieldnames = fields
        for required in ("group", "dose"):
            if required not in fields:
                raise DataError(f"{path}: header lacks column {required!r}")
        bivariate = "y_tox" in fields or "z00" in fields
        if not ("y_eff" in fields or "z" in fields or "z00" in fields):
            raise DataError(f"{path}: header has neither y_eff nor count columns")

        kinds = set()
        # group -> dose -> counts (length 1 or 4) and n
        tally: dict[str, dict[float, list]] = defaultdict(dict)
        order: list[str] = []
        for row in reader:
            line = reader.line_num
            row = {k: (v or "").strip() for k, v in row.items() if k is not None}
            if not any(row.values()):
                continue
            kind = _row_kind(row, line)
            kinds.add(kind)
            if len(kinds) > 1:
                raise MixedSchema(f"line {line}: subject and count rows in the same file")
            group = row["group"]
            if not group:
                raise MalformedRow(line, "group is empty")
            if group not in tally:
                order.append(group)
            dose = _dose(row["dose"], line)
            cells = tally[group]
            if kind == "subject":
                ye = _binary(row["y_eff"], "y_eff", line)
                if bivariate:
                    yt = _binary(row.get("y_tox", ""), "y_tox", line)
                    entry = cells.setdefault(dose, [np.zeros(4, dtype=np.int64), 0])
                    entry[0][2 * ye + yt] += 1
                else:
                    entry = cells.setdefault(dose, [np.zeros(1, dtype=np.int64), 0])
                    entry[0][0] += ye
                entry[1] += 1
            else:
                if dose in cells:
                    raise MalformedRow(line, f"duplicate count row for group {group!r} dose {dose:g}")
                n = _count(row.get("n", ""), "n", line)
                if bivariate:
                    z = np.array([_count(row.get(c, ""), c, line) for c in ("z00", "z01", "z10", "z11")])
                    if z.sum() != n:
                        raise MalformedRow(line, f"cell counts sum to {z.sum()}, not n={n}")
                else:
                    z = np.array([_count(row.get("z", ""), "z", line)])
                    if z[0] > n:
                        raise MalformedRow(line, f"z={z[0]} exceeds n={n}")
                if n < 1:
                    raise MalformedRow(line, "n must be >= 1")
                cells[dose] = [z, n]

    tables = []
    for group in _order_groups(order):
        cells = tally[group]
        if len(cells) < 2:
            raise EmptyGroup(f"group {group!r} has {len(cells)} distinct dose(s); need >= 2")
        doses = sorted(cells)
        design = DoseDesign(tuple(doses), tuple(cells[d][1] for d in doses))
        z = np.stack([cells[d][0] for d in doses])
        tables.append(CountTable(design, z if bivariate else z[:, 0], label=group))
    return tables[0], tables[1]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _version() -> str:
    from doseequiv import __version__

    return __version__


def report_document(report: EquivalenceReport) -> dict:
    """JSON-ready document: flat summary fields followed by the full report."""
    doc: dict = {"software": {"name": "doseequiv", "version": _version()}}
    doc["kind"] = report.kind.value
    doc["seed"] = report.config.seed
    for ep in report.endpoints:
        s = _SHORT[ep]
        doc[f"statistic_{s}"] = report.statistics[ep]
        doc[f"argmax_{s}"] = report.argmax_doses[ep]
        doc[f"quantile_{s}"] = report.quantiles[ep]
        doc[f"p_{s}"] = report.p_values[ep]
        doc[f"reject_{s}"] = report.reject[ep]
        doc[f"null_{s}"] = report.null_branch[ep]
    doc["reject_global"] = report.reject_global
    doc["report"] = report_to_dict(report)
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def emit_report(report: EquivalenceReport, path) -> Path:
    """Write ``report`` as JSON; identical reports give byte-identical files."""
    path = Path(path)
    try:
        path.write_text(dumps(report_document(report)), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path) -> EquivalenceReport:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    return report_from_dict(doc["report"])


def reports_equal(a: EquivalenceReport, b: EquivalenceReport) -> bool:
    """Exact equality of two reports, field by field."""
    return report_to_dict(a) == report_to_dict(b)


# ---------------------------------------------------------------------------
# Curve tables
# ---------------------------------------------------------------------------

def curve_table(params, grid) -> tuple[list[str], np.ndarray]:
    """Columns and values of the plot table for a ``(reference, test)`` parameter pair."""
    ref, test = params
    grid = np.asarray(grid, dtype=float)
    if isinstance(ref, GumbelParams) != isinstance(test, GumbelParams):
        raise ValueError("both groups need the same model type")
    if isinstance(ref, GumbelParams):
        ee = [np.asarray(link_prob(p.efficacy, grid)) for p in (ref, test)]
        et = [np.asarray(link_prob(p.toxicity, grid)) for p in (ref, test)]
        cols = ["dose", "eta_ref_e", "eta_test_e", "eta_ref_t", "eta_test_t", "abs_diff_e", "abs_diff_t"]
        data = [grid, *ee, *et, np.abs(ee[0] - ee[1]), np.abs(et[0] - et[1])]
    else:
        if not (isinstance(ref, LinkParams) and isinstance(test, LinkParams)):
            raise TypeError("params must be LinkParams or GumbelParams")
        ee = [np.asarray(link_prob(p, grid)) for p in (ref, test)]
        cols = ["dose", "eta_ref_e", "eta_test_e", "abs_diff_e"]
        data = [grid, *ee, np.abs(ee[0] - ee[1])]
    return cols, np.column_stack(data)


def emit_curve_table(params, grid, path) -> Path:
    """CSV of both groups' curves and their absolute difference at every grid node."""
    cols, values = curve_table(params, grid)
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in values:
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write curve table to {path}: {exc}") from exc
    return path
