"""Aggregate bench records into summary rows and write them out.

Statistics are computed on exact fractions and rounded once, half-even, to
six decimal places, so identical inputs always give identical CSV bytes.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

from .bench import BenchRecord, Metric

PLACES = 6
NONE_PROFILE = "none"
CSV_FIELDS = ["profile", "payload_size", "metric", "n", "mean", "median", "p95", "drop_rate", "ratio_vs_none"]
RECORD_FIELDS = [
    "profile", "payload_size", "metric", "value", "packets_sent", "packets_received", "repetition_index", "timestamp",
]

PathLike = Union[str, Path]


class ReportError(Exception):
    pass


class EmptyInput(ReportError):
    pass


class MissingBaseline(ReportError):
    pass


@dataclass(frozen=True)
class ReportRow:
    profile: str
    payload_size: int
    metric: str
    n: int
    mean: Optional[Decimal]
    median: Optional[Decimal]
    p95: Optional[Decimal]
    drop_rate: Decimal
    ratio_vs_none: Optional[Decimal] = None


def quantize(value: Fraction) -> Decimal:
    scaled = round(value * 10**PLACES)  # Fraction.__round__ is exact, ties to even
    return Decimal(scaled).scaleb(-PLACES)


def _median(sorted_values: Sequence[Fraction]) -> Fraction:
    mid = len(sorted_values) // 2
    if len(sorted_values) % 2:
        return sorted_values[mid]
    return (sorted_values[mid - 1] + sorted_values[mid]) / 2


def _nearest_rank(sorted_values: Sequence[Fraction], pct: int) -> Fraction:
    rank = math.ceil(pct * len(sorted_values) / 100)
    return sorted_values[max(rank, 1) - 1]


def aggregate(records: Iterable[BenchRecord]) -> list[ReportRow]:
    groups: dict[tuple[str, int, str], list[BenchRecord]] = defaultdict(list)
    for r in records:
        groups[(r.profile, r.payload_size, r.metric.value)].append(r)
    if not groups:
        raise EmptyInput("no records to aggregate")
    rows = []
    for (profile, size, metric), recs in groups.items():
        values = sorted(Fraction(r.value) for r in recs if r.value is not None)
        sent = sum(r.packets_sent for r in recs)
        received = sum(r.packets_received for r in recs)
        drop = 1 - Fraction(received, sent) if sent else Fraction(1)
        if values:
            mean, median, p95 = sum(values) / len(values), _median(values), _nearest_rank(values, 95)
            stats = tuple(quantize(v) for v in (mean, median, p95))
        else:
            stats = (None, None, None)
        rows.append(ReportRow(profile, size, metric, len(values), *stats, drop_rate=quantize(drop)))
    rows.sort(key=lambda row: (row.metric, row.profile != NONE_PROFILE, row.profile, row.payload_size))
    return rows


def ratio_vs_none(rows: Iterable[ReportRow]) -> list[ReportRow]:
    """Fill ratio_vs_none on throughput rows: mean / mean of the none row of the same size."""
    rows = list(rows)
    baseline = {
        r.payload_size: r.mean
        for r in rows
        if r.profile == NONE_PROFILE and r.metric == Metric.THROUGHPUT.value
    }
    out = []
    for r in rows:
        if r.metric != Metric.THROUGHPUT.value:
            out.append(r)
            continue
        if r.payload_size not in baseline:
            raise MissingBaseline(f"no {NONE_PROFILE} throughput row for {r.payload_size}-byte payloads")
        base = baseline[r.payload_size]
        if r.mean is None or base is None or base == 0:
            ratio = None
        else:
            ratio = quantize(Fraction(r.mean) / Fraction(base))
        out.append(replace(r, ratio_vs_none=ratio))
    return out


# ---------------------------------------------------------------- CSV / table


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, Decimal):
        return f"{value:f}"
    return str(value)


def write_csv(rows: Iterable[ReportRow], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow(_cell(getattr(r, name)) for name in CSV_FIELDS)


def emit_csv(rows: Iterable[ReportRow], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        write_csv(rows, fh)


def read_csv(stream: TextIO) -> list[ReportRow]:
    reader = csv.DictReader(stream)
    if reader.fieldnames != CSV_FIELDS:
        raise ReportError(f"unexpected CSV header {reader.fieldnames}")

    def dec(text: str) -> Optional[Decimal]:
        return Decimal(text) if text else None

    return [
        ReportRow(
            profile=row["profile"],
            payload_size=int(row["payload_size"]),
            metric=row["metric"],
            n=int(row["n"]),
            mean=dec(row["mean"]),
            median=dec(row["median"]),
            p95=dec(row["p95"]),
            drop_rate=Decimal(row["drop_rate"]),
            ratio_vs_none=dec(row["ratio_vs_none"]),
        )
        for row in reader
    ]


def parse_csv(path: PathLike) -> list[ReportRow]:
    with open(path, newline="") as fh:
        return read_csv(fh)


def write_table(rows: Iterable[ReportRow], stream: TextIO) -> None:
    """Whitespace-separated columns, '#' header, NaN for absent values (gnuplot friendly)."""
    table = [["#"] + CSV_FIELDS]
    for r in rows:
        table.append([""] + [_cell(getattr(r, name)) or "NaN" for name in CSV_FIELDS])
    widths = [max(len(line[i]) for line in table) for i in range(len(table[0]))]
    for line in table:
        stream.write("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() + "\n")


# ---------------------------------------------------------------- raw records


def write_records(records: Iterable[BenchRecord], path: PathLike) -> int:
    count = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow([
                r.profile, r.payload_size, r.metric.value, "" if r.value is None else repr(r.value),
                r.packets_sent, r.packets_received, r.repetition_index, repr(r.timestamp),
            ])
            count += 1
    return count


def read_records(path: PathLike) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORD_FIELDS:
            raise ReportError(f"{path}: not a bench record file")
        return [
            BenchRecord(
                profile=row["profile"],
                payload_size=int(row["payload_size"]),
                metric=Metric(row["metric"]),
                value=float(row["value"]) if row["value"] else None,
                packets_sent=int(row["packets_sent"]),
                packets_received=int(row["packets_received"]),
                repetition_index=int(row["repetition_index"]),
                timestamp=float(row["timestamp"]),
            )
            for row in reader
        ]
