"""Per-iteration metrics rows and their CSV encoding.

The file starts with a ``#schema=...`` comment line, then a header row. Column
layout for E experts and M mechanisms::

    iteration, phase, d_objective, expert_loss, ortho_residual,
    degenerate_count, reloc_donor, reloc_recipient, reloc_moved,
    claims_e{i}, spread_e{i}, score_std_e{i}            for i < E
    claims_e{i}_m{k}, score_e{i}_m{k}                   for i < E, k < M

Empty cells mean "not available" (no relocation, no label access). Floats are
written with ``repr`` so reading and re-writing is lossless. Wall-clock time
is deliberately absent: it lives in ``timing.csv`` so that metrics files from
identical runs are byte-identical.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

SCHEMA = "podnn-metrics/1"

_FIXED = [
    "iteration",
    "phase",
    "d_objective",
    "expert_loss",
    "ortho_residual",
    "degenerate_count",
    "reloc_donor",
    "reloc_recipient",
    "reloc_moved",
]


@dataclass
class MetricsRecord:
    iteration: int
    phase: str
    d_objective: Optional[float]
    expert_loss: Optional[float]
    ortho_residual: float
    degenerate_count: int
    claims: list  # per expert, winners before relocation
    spread: list  # per expert hidden spread on claimed points
    score_std: list  # per expert std of scores on claimed points
    reloc_donor: Optional[int] = None
    reloc_recipient: Optional[int] = None
    reloc_moved: int = 0
    # label-derived, filled by the evaluation probe; None without label access
    claims_by_mechanism: Optional[list] = None
    score_by_mechanism: Optional[list] = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def n_experts(self) -> int:
        return len(self.claims)

    def claim_matrix(self) -> np.ndarray:
        if self.claims_by_mechanism is None:
            raise ValueError("record carries no per-mechanism claims")
        return np.asarray(self.claims_by_mechanism, dtype=np.int64)


def header(n_experts: int, n_mechanisms: int) -> list[str]:
    cols = list(_FIXED)
    for i in range(n_experts):
        cols += [f"claims_e{i}", f"spread_e{i}", f"score_std_e{i}"]
    for i in range(n_experts):
        for k in range(n_mechanisms):
            cols += [f"claims_e{i}_m{k}", f"score_e{i}_m{k}"]
    return cols


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _row(rec: MetricsRecord, n_mechanisms: int) -> list[str]:
    row = [
        _fmt(rec.iteration),
        rec.phase,
        _fmt(rec.d_objective),
        _fmt(rec.expert_loss),
        _fmt(rec.ortho_residual),
        _fmt(rec.degenerate_count),
        _fmt(rec.reloc_donor),
        _fmt(rec.reloc_recipient),
        _fmt(rec.reloc_moved),
    ]
    for i in range(rec.n_experts):
        row += [_fmt(rec.claims[i]), _fmt(rec.spread[i]), _fmt(rec.score_std[i])]
    for i in range(rec.n_experts):
        for k in range(n_mechanisms):
            cl = rec.claims_by_mechanism[i][k] if rec.claims_by_mechanism is not None else None
            sc = rec.score_by_mechanism[i][k] if rec.score_by_mechanism is not None else None
            row += [_fmt(cl), _fmt(sc)]
    return row


class MetricsWriter:
    """Append-only CSV writer; the header goes out with the first row."""

    def __init__(self, path, n_experts: int, n_mechanisms: int):
        self.path = Path(path)
        self.n_experts = n_experts
        self.n_mechanisms = n_mechanisms
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._fh.write(f"#schema={SCHEMA}\n")
        self._csv.writerow(header(n_experts, n_mechanisms))

    def write(self, rec: MetricsRecord) -> None:
        self._csv.writerow(_row(rec, self.n_mechanisms))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(path, records: Iterable[MetricsRecord], n_experts: int, n_mechanisms: int) -> None:
    with MetricsWriter(path, n_experts, n_mechanisms) as w:
        for rec in records:
            w.write(rec)


def _parse_num(s: str, kind=float):
    return None if s == "" else kind(s)


def read_metrics(path) -> tuple[list[MetricsRecord], int, int]:
    """Parse a metrics.csv; returns (records, n_experts, n_mechanisms)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != f"#schema={SCHEMA}":
        raise ValueError(f"{path}: missing or unsupported schema line")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    cols = next(reader)
    n_experts = sum(1 for c in cols if c.startswith("claims_e") and "_m" not in c)
    n_mech = sum(1 for c in cols if c.startswith("claims_e0_m"))
    if cols != header(n_experts, n_mech):
        raise ValueError(f"{path}: header does not match schema {SCHEMA}")
    records = []
    for raw in reader:
        r = dict(zip(cols, raw))
        cbm = [[_parse_num(r[f"claims_e{i}_m{k}"], int) for k in range(n_mech)] for i in range(n_experts)]
        sbm = [[_parse_num(r[f"score_e{i}_m{k}"]) for k in range(n_mech)] for i in range(n_experts)]
        has_labels = n_mech > 0 and all(v is not None for row in cbm for v in row)
        records.append(
            MetricsRecord(
                iteration=int(r["iteration"]),
                phase=r["phase"],
                d_objective=_parse_num(r["d_objective"]),
                expert_loss=_parse_num(r["expert_loss"]),
                ortho_residual=float(r["ortho_residual"]),
                degenerate_count=int(r["degenerate_count"]),
                claims=[int(r[f"claims_e{i}"]) for i in range(n_experts)],
                spread=[float(r[f"spread_e{i}"]) for i in range(n_experts)],
                score_std=[float(r[f"score_std_e{i}"]) for i in range(n_experts)],
                reloc_donor=_parse_num(r["reloc_donor"], int),
                reloc_recipient=_parse_num(r["reloc_recipient"], int),
                reloc_moved=int(r["reloc_moved"]),
                claims_by_mechanism=cbm if has_labels else None,
                score_by_mechanism=sbm if has_labels else None,
            )
        )
    return records, n_experts, n_mech
