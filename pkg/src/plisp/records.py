"""Predict records, JSONL serialization, and effective-sample-size reports."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .errors import LispError


@dataclass(frozen=True)
class PredictRecord:
    sweep: int
    particle: int
    weight: float
    label: str
    value: object


@dataclass(frozen=True)
class EssRow:
    target: str
    group: int
    ess: float


class EmptyInputError(LispError):
    pass


def value_to_json(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, list)):
        return [value_to_json(v) for v in value]
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize value of type {type(value).__name__}")


def record_to_json(record: PredictRecord) -> str:
    return json.dumps(
        {
            "sweep": record.sweep,
            "particle": record.particle,
            "weight": record.weight,
            "label": record.label,
            "value": value_to_json(record.value),
        },
        sort_keys=True,
    )


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for record in records:
            fh.write(record_to_json(record))
            fh.write("\n")


def read_jsonl(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                PredictRecord(
                    obj["sweep"], obj["particle"], obj["weight"], obj["label"], obj["value"]
                )
            )
    return records


def _canonical(value):
    if isinstance(value, list):
        return tuple(_canonical(v) for v in value)
    if isinstance(value, tuple):
        return tuple(_canonical(v) for v in value)
    if isinstance(value, np.ndarray):
        return ("arr", value.shape, value.tobytes())
    return value


_GROUP_RE = re.compile(r"^\((\S+) (\d+)\)$")


def _label_group(label: str):
    m = _GROUP_RE.match(label)
    if m:
        return m.group(1), int(m.group(2))
    return label, 0


def compute_ess(records) -> list[EssRow]:
    """ESS per predict label over the aggregate sample set.

    Per-sweep weights are assumed normalized; aggregate weights renormalize
    over all sweeps.  For each unique value the total aggregate weight V_k is
    summed and ESS = 1 / sum_k V_k^2.
    """
    if not records:
        raise EmptyInputError("no records")
    by_label = {}
    for rec in records:
        by_label.setdefault(rec.label, []).append(rec)
    rows = []
    for label, recs in by_label.items():
        total = sum(r.weight for r in recs)
        if total <= 0:
            raise EmptyInputError(f"records for {label!r} carry no weight")
        masses = {}
        for r in recs:
            key = _canonical(r.value)
            masses[key] = masses.get(key, 0.0) + r.weight / total
        ess = 1.0 / sum(v * v for v in masses.values())
        target, group = _label_group(label)
        rows.append(EssRow(target, group, ess))
    rows.sort(key=lambda r: (r.target, r.group))
    return rows


def ess_rows_to_json(rows) -> str:
    return "\n".join(
        json.dumps({"target": r.target, "group": r.group, "ess": r.ess}, sort_keys=True)
        for r in rows
    )
