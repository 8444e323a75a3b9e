"""Attention-map key statistics.

Takes causal attention maps (one per layer/head per run), averages each key
column over the query dimension, ranks keys, and aggregates how often each
token label lands in the top k across many maps. Labels are classified into
the retention-relevant categories: sequence-start tokens, punctuation,
slots near an image block's begin marker, and slots near its end marker.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .seqmodel import PUNCT_CHARS

ROW_SUM_TOL = 1e-9

CATEGORIES = ("starting", "punctuation", "near_boi", "near_eoi", "other")


@dataclass(frozen=True)
class AttentionRecord:
    """One causal attention map: row i covers keys 0..i, zero-padded."""

    labels: tuple[str, ...]
    rows: np.ndarray  # (n, n), float64

    def validate(self) -> None:
        n = len(self.labels)
        if n == 0:
            raise ValueError("empty attention record")
        if self.rows.shape != (n, n):
            raise ValueError(f"rows shape {self.rows.shape}, expected ({n}, {n})")
        for i in range(n):
            if i + 1 < n and np.any(self.rows[i, i + 1 :] != 0.0):
                raise ValueError(f"row {i} has nonzero padding beyond key {i}")
            s = self.rows[i, : i + 1].sum()
            if abs(s - 1.0) > ROW_SUM_TOL:
                raise ValueError(f"row {i} sums to {s}, expected 1")


@dataclass(frozen=True)
class OccurrenceTable:
    """Label -> number of maps whose top-k keys carried that label."""

    counts: tuple[tuple[str, int], ...]  # sorted by count descending
    total_maps: int

    def as_dict(self) -> dict[str, int]:
        return dict(self.counts)


def key_mean_attention(record: AttentionRecord) -> np.ndarray:
    """Mean attention per key over every query row, padding included.

    When each row sums to one, the output sums to one as well.
    """
    record.validate()
    return record.rows.mean(axis=0)


def top_k_keys(means: Sequence[float], k: int = 10) -> list[int]:
    """Indices of the k largest means, descending, ties to the lower index."""
    if k < 1:
        raise ValueError("k must be at least 1")
    order = sorted(range(len(means)), key=lambda j: (-float(means[j]), j))
    return order[:k]


def aggregate_occurrence(records: Iterable[AttentionRecord], k: int = 10) -> OccurrenceTable:
    """Count, per label, the maps where it appeared among the top-k keys.

    A label is counted at most once per map, so no count can exceed the
    number of maps analyzed.
    """
    counts: dict[str, int] = {}
    total = 0
    for record in records:
        total += 1
        means = key_mean_attention(record)
        top = top_k_keys(means, k)
        for label in {record.labels[j] for j in top}:
            counts[label] = counts.get(label, 0) + 1
    if total == 0:
        raise ValueError("no records to aggregate")
    ordered = tuple(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))
    return OccurrenceTable(ordered, total)


def classify_token(label: str, m: int, k_head: int, k_tail: int) -> str:
    """Token category for retention analysis. Unknown labels are 'other'."""
    if label == "BOS":
        return "starting"
    if len(label) == 1 and label in PUNCT_CHARS:
        return "punctuation"
    if label == "BOI":
        return "near_boi"
    if label == "EOI":
        return "near_eoi"
    if label.startswith("IMG") and label[3:].isdigit():
        slot = int(label[3:])
        if slot < k_head:
            return "near_boi"
        if slot >= m - k_tail:
            return "near_eoi"
    return "other"


def category_shares(table: OccurrenceTable, m: int, k_head: int, k_tail: int) -> dict[str, float]:
    """Occurrence-weighted share of each category among top-k labels."""
    totals = {cat: 0 for cat in CATEGORIES}
    for label, count in table.counts:
        totals[classify_token(label, m, k_head, k_tail)] += count
    grand = sum(totals.values())
    if grand == 0:
        return {cat: 0.0 for cat in CATEGORIES}
    return {cat: totals[cat] / grand for cat in CATEGORIES}


# -- attention dump ingestion ----------------------------------------------------

def records_from_dumps(dumps: Iterable[dict]) -> list[AttentionRecord]:
    """Rebuild full causal maps from per-step dump records.

    Dumps carry, per step and per layer/head, the attention row over the
    retained keys along with their original positions; rows are scattered
    back to original-position columns, leaving exact zeros at evicted keys.
    One record per (layer, head) group.
    """
    groups: dict[tuple[int, int], list[dict]] = {}
    for rec in dumps:
        groups.setdefault((rec["layer"], rec["head"]), []).append(rec)
    records = []
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r["t"])
        width = max(r["t"] for r in recs)
        labels: list[str | None] = [None] * width
        rows = np.zeros((width, width))
        for r in recs:
            i = r["t"] - 1
            for pos, label, weight in zip(r["positions"], r["labels"], r["row"]):
                if pos > i:
                    raise ValueError(f"dump at t={r['t']} attends to future position {pos}")
                rows[i, pos] = weight
                if labels[pos] is None:
                    labels[pos] = label
                elif labels[pos] != label:
                    raise ValueError(f"conflicting labels for position {pos}")
        if any(l is None for l in labels):
            missing = [i for i, l in enumerate(labels) if l is None]
            raise ValueError(f"positions never observed in dumps: {missing[:5]}")
        record = AttentionRecord(tuple(labels), rows)
        record.validate()
        records.append(record)
    return records


def load_dump_file(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            for field in ("t", "layer", "head", "labels", "positions", "row"):
                if field not in rec:
                    raise ValueError(f"{path}: line {lineno}: missing field {field!r}")
            out.append(rec)
    return out


def load_records(path) -> list[AttentionRecord]:
    """Load attention records from a dump file or a directory of dump files.

    Each file is one run; maps are grouped per (layer, head) within a file.
    """
    if os.path.isdir(path):
        records = []
        for name in sorted(os.listdir(path)):
            if name.endswith(".jsonl"):
                records.extend(records_from_dumps(load_dump_file(os.path.join(path, name))))
        if not records:
            raise ValueError(f"{path}: no .jsonl dump files found")
        return records
    return records_from_dumps(load_dump_file(path))


def write_occurrence_csv(table: OccurrenceTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "count"])
        for label, count in table.counts:
            writer.writerow([label, count])


def write_category_csv(
    table: OccurrenceTable, m: int, k_head: int, k_tail: int, path
) -> None:
    shares = category_shares(table, m, k_head, k_tail)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", "share"])
        for cat in CATEGORIES:
            writer.writerow([cat, repr(shares[cat])])
