"""Dataset, truth-sidecar, table and report file formats.

Datasets are comma-separated with a header row and one row per chunk:
``patient_id, scan_id, chunk_index, gender, ca_label, group_label, f0 ..``.
Floats are written with ``repr`` so a read/write cycle is byte-identical.
Reports are JSON documents with sorted keys and a ``schema_version`` field.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from bioage.core import ChunkSample, DataFormatError, validate_dataset
from bioage.synth import TruthRecord

REPORT_SCHEMA_VERSION = 1
BASE_COLUMNS = ["patient_id", "scan_id", "chunk_index", "gender", "ca_label", "group_label"]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, format_table(header, rows))


def format_dataset(dataset: Sequence[ChunkSample]) -> str:
    d = len(dataset[0].features) if dataset else 0
    header = BASE_COLUMNS + [f"f{j}" for j in range(d)]
    rows = (
        [s.patient_id, s.scan_id, s.chunk_index, s.gender, float(s.ca_label), s.group_label,
         *(float(v) for v in s.features)]
        for s in dataset
    )
    return format_table(header, rows)


def write_dataset(path, dataset: Sequence[ChunkSample]) -> None:
    atomic_write_text(path, format_dataset(dataset))


def parse_dataset(text: str, *, validate: bool = True) -> list[ChunkSample]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("dataset file is empty") from None
    if header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise DataFormatError(f"unexpected dataset header {header[:len(BASE_COLUMNS)]}")
    feat_cols = header[len(BASE_COLUMNS):]
    if feat_cols != [f"f{j}" for j in range(len(feat_cols))]:
        raise DataFormatError("feature columns must be named f0 .. f{d-1}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            sample = ChunkSample(
                patient_id=row[0],
                scan_id=row[1],
                chunk_index=int(row[2]),
                gender=int(row[3]),
                ca_label=float(row[4]),
                group_label=row[5],
                features=tuple(float(v) for v in row[6:]),
            )
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        if not math.isfinite(sample.ca_label) or not all(map(math.isfinite, sample.features)):
            raise DataFormatError(f"line {lineno}: non-finite value")
        out.append(sample)
    if validate:
        validate_dataset(out)
    return out


def read_dataset(path, *, validate: bool = True) -> list[ChunkSample]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataFormatError(f"dataset file not found: {path}") from None
    return parse_dataset(text, validate=validate)


def write_truth(path, truth: Mapping[str, TruthRecord]) -> None:
    write_table(
        path,
        ["patient_id", "true_ba", "group_label"],
        ([t.patient_id, float(t.true_ba), t.group_label] for t in truth.values()),
    )


def read_truth(path) -> dict[str, TruthRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["patient_id"]: TruthRecord(r["patient_id"], float(r["true_ba"]), r["group_label"]) for r in rows}


def dumps_report(kind: str, config: Mapping, body: Mapping) -> str:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "report": kind, "config": config, **body}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(path, kind: str, config: Mapping, body: Mapping) -> None:
    atomic_write_text(path, dumps_report(kind, config, body))


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
