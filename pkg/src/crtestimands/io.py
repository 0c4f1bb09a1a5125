"""CSV ingestion and the flat TOML simulation config."""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .core import (
    ClusterRecord,
    ObservedDataset,
    OutcomeKind,
    PotentialClusterRecord,
    PotentialOutcomeDataset,
    ValidationError,
)
from .simulation import DgpConfig

OBSERVED_HEADER = ("cluster_id", "treatment", "outcome")
POTENTIAL_HEADER = ("cluster_id", "y1", "y0")


def _read_rows(path: str | Path, required: Sequence[str]):
    """Yield ``(line_number, {column: text})`` after checking the header."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except (OSError, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or not any(h.strip() for h in header):
        raise ValidationError(f"{path}: no data rows")
    header = [h.strip() for h in header]
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise ValidationError(f"{path}: duplicate header column(s) {', '.join(dupes)}")
    missing = [c for c in required if c not in header]
    if missing:
        raise ValidationError(f"{path}: header lacks column(s) {', '.join(missing)}")
    pos = {c: header.index(c) for c in required}
    rows = []
    for line_no, raw in enumerate(reader, start=2):
        if not raw or all(not f.strip() for f in raw):
            continue
        if len(raw) != len(header):
            raise ValidationError(f"{path}, line {line_no}: expected {len(header)} fields, got {len(raw)}")
        row = {c: raw[i].strip() for c, i in pos.items()}
        for c, v in row.items():
            if v == "":
                raise ValidationError(f"{path}, line {line_no}: missing value for {c}")
        rows.append((line_no, row))
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return rows


def _number(text: str, column: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"{where}: non-numeric {column} {text!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"{where}: non-finite {column} {text!r}")
    return value


def _check_binary(value: float, column: str, where: str, kind: OutcomeKind | None) -> None:
    if kind is OutcomeKind.BINARY and value not in (0.0, 1.0):
        raise ValidationError(f"{where}: {column} {value:g} outside {{0, 1}} for a binary outcome")


def load_observed_csv(path: str | Path, outcome_kind: OutcomeKind | str | None = None) -> ObservedDataset:
    """Read ``cluster_id,treatment,outcome`` rows into a dataset grouped by cluster."""
    kind = None if outcome_kind is None else OutcomeKind(outcome_kind)
    groups: dict[str, tuple[int, list[float]]] = {}
    for line_no, row in _read_rows(path, OBSERVED_HEADER):
        where = f"{path}, line {line_no}"
        cid = row["cluster_id"]
        t = _number(row["treatment"], "treatment", where)
        if t not in (0.0, 1.0):
            raise ValidationError(f"{where}: treatment must be 0 or 1, got {row['treatment']!r}")
        y = _number(row["outcome"], "outcome", where)
        _check_binary(y, "outcome", where, kind)
        if cid in groups:
            if groups[cid][0] != int(t):
                raise ValidationError(f"{where}: cluster {cid!r} has both treatment 0 and 1")
            groups[cid][1].append(y)
        else:
            groups[cid] = (int(t), [y])
    return ObservedDataset([ClusterRecord(c, t, ys) for c, (t, ys) in groups.items()], kind)


def load_potential_csv(path: str | Path, outcome_kind: OutcomeKind | str | None = None) -> PotentialOutcomeDataset:
    """Read ``cluster_id,y1,y0`` rows into a potential-outcome table."""
    kind = None if outcome_kind is None else OutcomeKind(outcome_kind)
    groups: dict[str, tuple[list[float], list[float]]] = {}
    for line_no, row in _read_rows(path, POTENTIAL_HEADER):
        where = f"{path}, line {line_no}"
        y1 = _number(row["y1"], "y1", where)
        y0 = _number(row["y0"], "y0", where)
        _check_binary(y1, "y1", where, kind)
        _check_binary(y0, "y0", where, kind)
        g = groups.setdefault(row["cluster_id"], ([], []))
        g[0].append(y1)
        g[1].append(y0)
    return PotentialOutcomeDataset([PotentialClusterRecord(c, a, b) for c, (a, b) in groups.items()], kind)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_observed_csv(data: ObservedDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBSERVED_HEADER)
        for c in data.clusters:
            for y in c.outcomes:
                w.writerow((c.cluster_id, c.treatment, _fmt(y)))


def write_potential_csv(po: PotentialOutcomeDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POTENTIAL_HEADER)
        for c in po.clusters:
            for a, b in zip(c.y1, c.y0):
                w.writerow((c.cluster_id, _fmt(a), _fmt(b)))


def load_config(path: str | Path) -> DgpConfig:
    """Parse a flat TOML document whose keys are :class:`DgpConfig` fields."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ValidationError(f"{path}: config must be flat, found table(s) {', '.join(nested)}")
    return DgpConfig.from_mapping(doc)


def dump_config(config: DgpConfig) -> str:
    """Inverse of :func:`load_config` for the value types a config holds."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, list):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    return "".join(f"{k} = {val(v)}\n" for k, v in config.to_mapping().items())
