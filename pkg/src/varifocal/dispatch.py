"""Per-case karyotype dispatch.

Chromosomes are first assigned to their most probable type.  Each type is then
checked in ascending order against its capacity (two copies, one for Y): an
overfull type keeps its most confident members, one extra copy being allowed
only when every candidate clears the confidence threshold, and the rest move to
their second most probable type without further capacity checks.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

N_TYPES = 24
Y_INDEX = 23
X_INDEX = 22
TYPE_NAMES = tuple([str(i) for i in range(1, 23)] + ["X", "Y"])
DEFAULT_THRESHOLD = 0.9


class DispatchError(ValueError):
    pass


@dataclass
class CaseProbabilities:
    case_id: str
    probs: np.ndarray
    chromosome_ids: Optional[list] = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != N_TYPES:
            raise DispatchError(f"case {self.case_id}: expected N×{N_TYPES} probabilities, got {p.shape}")
        if p.shape[0] == 0:
            raise DispatchError(f"case {self.case_id} is empty")
        if not np.isfinite(p).all() or (p < 0).any():
            raise DispatchError(f"case {self.case_id}: probabilities must be finite and non-negative")
        bad = np.flatnonzero(np.abs(p.sum(axis=1) - 1.0) > 1e-6)
        if bad.size:
            raise DispatchError(f"case {self.case_id}: rows {bad[:5].tolist()} do not sum to 1")
        self.probs = p
        if self.chromosome_ids is None:
            self.chromosome_ids = list(range(1, p.shape[0] + 1))
        elif len(self.chromosome_ids) != p.shape[0]:
            raise DispatchError("chromosome_ids length does not match probability rows")


@dataclass
class KaryotypeAssignment:
    case_id: str
    sets: list  # sets[k] = sorted row indices assigned to type k
    warnings: list = field(default_factory=list)

    def labels(self) -> np.ndarray:
        n = sum(len(s) for s in self.sets)
        out = np.full(n, -1, dtype=np.int64)
        for k, members in enumerate(self.sets):
            out[list(members)] = k
        return out

    def to_json(self, chromosome_ids: Optional[Sequence] = None) -> dict:
        ids = chromosome_ids
        return {
            "case_id": self.case_id,
            "assignments": {
                TYPE_NAMES[k]: [ids[i] if ids is not None else i for i in members]
                for k, members in enumerate(self.sets)
            },
            "warnings": list(self.warnings),
        }


def argmax_assignment(probs) -> np.ndarray:
    """Most probable type per row; ties go to the lowest type index."""
    p = probs.probs if isinstance(probs, CaseProbabilities) else np.asarray(probs)
    return np.argmax(p, axis=1)


def _second_choice(row: np.ndarray, k: int) -> int:
    masked = row.copy()
    masked[k] = -np.inf
    return int(np.argmax(masked))


def capacity(k: int) -> int:
    return 1 if k == Y_INDEX else 2


def abnormality_warnings(sets: Sequence[Sequence[int]]) -> list[str]:
    warnings = []
    for k in range(X_INDEX):
        n = len(sets[k])
        if n != 2:
            warnings.append(f"type {TYPE_NAMES[k]}: {n} chromosome(s) assigned, expected 2")
    nx, ny = len(sets[X_INDEX]), len(sets[Y_INDEX])
    if nx + ny != 2:
        warnings.append(f"sex chromosomes: {nx} X + {ny} Y assigned, expected 2 in total")
    return warnings


def dispatch_case(probs: CaseProbabilities, th: float = DEFAULT_THRESHOLD) -> KaryotypeAssignment:
    if not 0.0 < th < 1.0:
        raise DispatchError(f"threshold must lie in (0, 1), got {th}")
    p = probs.probs
    first = argmax_assignment(p)
    candidates: list[list[int]] = [[] for _ in range(N_TYPES)]
    for i, j in enumerate(first):
        candidates[j].append(i)

    out: list[list[int]] = [[] for _ in range(N_TYPES)]
    for k in range(N_TYPES):
        cap = capacity(k)
        members = candidates[k]
        if len(members) <= cap:
            out[k].extend(members)
            continue
        ranked = sorted(members, key=lambda i: (-p[i, k], i))
        top = ranked[:cap + 1]
        keep = top if all(p[i, k] > th for i in top) else ranked[:cap]
        out[k].extend(keep)
        for i in ranked[len(keep):]:
            out[_second_choice(p[i], k)].append(i)

    sets = [sorted(s) for s in out]
    return KaryotypeAssignment(probs.case_id, sets, abnormality_warnings(sets))


# ---------------------------------------------------------------------------
# file formats


def read_probability_csv(path, case_id: Optional[str] = None) -> CaseProbabilities:
    """Read ``chromosome_id, p_1 .. p_24`` rows; the case id defaults to the file stem."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [f"p_{j}" for j in range(1, N_TYPES + 1)]
        missing = [c for c in ["chromosome_id"] + cols if c not in (reader.fieldnames or [])]
        if missing:
            raise DispatchError(f"{path}: missing columns {missing}")
        ids, rows = [], []
        for rec in reader:
            ids.append(rec["chromosome_id"])
            rows.append([float(rec[c]) for c in cols])
    if not rows:
        raise DispatchError(f"{path}: no chromosome rows")
    return CaseProbabilities(case_id or path.stem, np.array(rows), ids)


def write_probability_csv(path, probs: CaseProbabilities) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["chromosome_id"] + [f"p_{j}" for j in range(1, N_TYPES + 1)])
        for cid, row in zip(probs.chromosome_ids, probs.probs):
            w.writerow([cid] + [repr(float(v)) for v in row])


def write_assignment_json(path, assignment: KaryotypeAssignment, chromosome_ids=None) -> None:
    Path(path).write_text(json.dumps(assignment.to_json(chromosome_ids), indent=2) + "\n", encoding="utf-8")
