"""Binary trait matrices with missing entries and column registration rules."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ABSENT = 0
PRESENT = 1
UNKNOWN = 2

_TOKENS = {"0": ABSENT, "1": PRESENT, "?": UNKNOWN}
_SYMBOLS = {ABSENT: "0", PRESENT: "1", UNKNOWN: "?"}


class TraitDataError(ValueError):
    """Malformed or inconsistent trait data."""


@dataclass(frozen=True)
class RegistrationRule:
    """A column thinning rule built from elementary conditions 1..6.

    Condition k keeps a column when:

    1. ``Y > 0``        2. ``Y > 1``        3. ``Y < L``
    4. ``Y < L - 1``    5. ``Y + Q < L``    6. ``Y + Q < L - 1``

    where ``Y`` counts visible 1's and ``Q`` counts ?'s in the column.
    """

    conditions: frozenset[int]

    def __post_init__(self):
        conds = frozenset(int(c) for c in self.conditions)
        bad = conds - {1, 2, 3, 4, 5, 6}
        if bad:
            raise ValueError(f"unknown registration conditions {sorted(bad)}")
        if 1 not in conds:
            raise ValueError("registration rule must include condition 1")
        object.__setattr__(self, "conditions", conds)

    @classmethod
    def parse(cls, text: str | int | Iterable[int]) -> "RegistrationRule":
        if isinstance(text, int):
            return cls(frozenset([text]))
        if isinstance(text, str):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            try:
                return cls(frozenset(int(p) for p in parts))
            except ValueError as exc:
                raise ValueError(f"bad rule specification {text!r}: {exc}") from None
        return cls(frozenset(text))

    def __str__(self) -> str:
        return ",".join(str(c) for c in sorted(self.conditions))

    def keep(self, y: int, q: int, n_leaves: int) -> bool:
        c = self.conditions
        if 1 in c and not y > 0:
            return False
        if 2 in c and not y > 1:
            return False
        if 3 in c and not y < n_leaves:
            return False
        if 4 in c and not y < n_leaves - 1:
            return False
        if 5 in c and not y + q < n_leaves:
            return False
        if 6 in c and not y + q < n_leaves - 1:
            return False
        return True

    def keep_mask(self, y: np.ndarray, q: np.ndarray, n_leaves: int) -> np.ndarray:
        """Vectorised :meth:`keep` over arrays of column statistics."""
        y = np.asarray(y)
        q = np.asarray(q)
        ok = np.ones(y.shape, dtype=bool)
        c = self.conditions
        if 1 in c:
            ok &= y > 0
        if 2 in c:
            ok &= y > 1
        if 3 in c:
            ok &= y < n_leaves
        if 4 in c:
            ok &= y < n_leaves - 1
        if 5 in c:
            ok &= y + q < n_leaves
        if 6 in c:
            ok &= y + q < n_leaves - 1
        return ok

    def discarded_y(self, n_leaves: int) -> set[int]:
        """Values of ``Y`` that cause a column to be dropped."""
        out = {0}
        if 2 in self.conditions:
            out.add(1)
        if 3 in self.conditions or 4 in self.conditions:
            out.add(n_leaves)
        if 4 in self.conditions:
            out.add(n_leaves - 1)
        return {v for v in out if 0 <= v <= n_leaves}

    def discarded_absent(self) -> set[int]:
        """Numbers of *visible absent* cells ``L - Y - Q`` that cause a drop."""
        out = set()
        if 5 in self.conditions or 6 in self.conditions:
            out.add(0)
        if 6 in self.conditions:
            out.add(1)
        return out


R1 = RegistrationRule(frozenset({1}))


@dataclass(frozen=True)
class ColumnView:
    index: int
    entries: tuple[int, ...]
    y: int
    q: int
    present: frozenset[int]


@dataclass(frozen=True, eq=False)
class TraitMatrix:
    """An ``L x N`` matrix over {0, 1, ?} with language and class labels.

    Cells are stored as small integers: 0 absent, 1 present, 2 unknown.
    """

    languages: tuple[str, ...]
    classes: tuple[str, ...]
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8, copy=True)
        langs = tuple(str(s) for s in self.languages)
        classes = tuple(str(s) for s in self.classes)
        if cells.ndim != 2 or cells.shape != (len(langs), len(classes)):
            raise TraitDataError(
                f"cell array shape {cells.shape} does not match "
                f"{len(langs)} languages x {len(classes)} classes"
            )
        if len(langs) < 2:
            raise TraitDataError("need at least two languages")
        if len(classes) < 1:
            raise TraitDataError("need at least one cognacy class")
        for kind, labels in (("language", langs), ("class", classes)):
            if len(set(labels)) != len(labels):
                dup = sorted({x for x in labels if labels.count(x) > 1})
                raise TraitDataError(f"duplicate {kind} labels: {dup}")
        if not np.isin(cells, (ABSENT, PRESENT, UNKNOWN)).all():
            raise TraitDataError("cells must be 0, 1 or unknown")
        cells.setflags(write=False)
        object.__setattr__(self, "languages", langs)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "cells", cells)

    @property
    def n_languages(self) -> int:
        return len(self.languages)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def __eq__(self, other):
        if not isinstance(other, TraitMatrix):
            return NotImplemented
        return (
            self.languages == other.languages
            and self.classes == other.classes
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.languages, self.classes, self.cells.tobytes()))

    def column_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-column ``(Y, Q)`` arrays."""
        return (
            (self.cells == PRESENT).sum(axis=0),
            (self.cells == UNKNOWN).sum(axis=0),
        )

    def reorder(self, languages: Sequence[str]) -> "TraitMatrix":
        """Return a copy with rows permuted to follow ``languages``."""
        languages = tuple(languages)
        if sorted(languages) != sorted(self.languages):
            raise TraitDataError("language sets differ")
        pos = {lab: i for i, lab in enumerate(self.languages)}
        rows = [pos[lab] for lab in languages]
        return TraitMatrix(languages, self.classes, self.cells[rows])

    def select_columns(self, keep: np.ndarray | Sequence[int]) -> "TraitMatrix":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return TraitMatrix(
            self.languages, tuple(self.classes[j] for j in keep), self.cells[:, keep]
        )

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["language", *self.classes])
        for lab, row in zip(self.languages, self.cells):
            writer.writerow([lab, *(_SYMBOLS[int(v)] for v in row)])
        return buf.getvalue()


def parse_trait_matrix(text: str) -> TraitMatrix:
    """Parse a comma- or tab-delimited matrix.

    The first row holds class labels (its first field names the language
    column and is ignored); each later row is a language label followed by
    one cell per class.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TraitDataError("empty matrix text")
    delimiter = "\t" if lines[0].count("\t") > lines[0].count(",") else ","
    rows = list(csv.reader(lines, delimiter=delimiter))
    header = [h.strip() for h in rows[0]]
    classes = header[1:]
    n = len(classes)
    languages = []
    cells = np.empty((len(rows) - 1, n), dtype=np.int8)
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != n + 1:
            raise TraitDataError(
                f"row {r} ({row[0].strip() if row else ''!r}) has {len(row) - 1} cells, expected {n}"
            )
        languages.append(row[0].strip())
        for c, tok in enumerate(row[1:], start=1):
            tok = tok.strip()
            if tok not in _TOKENS:
                raise TraitDataError(
                    f"illegal cell {tok!r} at row {r} ({languages[-1]}), column {c} ({classes[c - 1]})"
                )
            cells[r - 1, c - 1] = _TOKENS[tok]
    return TraitMatrix(tuple(languages), tuple(classes), cells)


def read_trait_matrix(path) -> TraitMatrix:
    with open(path) as fh:
        return parse_trait_matrix(fh.read())


def column_stats(matrix: TraitMatrix, a: int) -> ColumnView:
    """Statistics of column ``a`` (1-based, as in the matrix notation)."""
    if not 1 <= a <= matrix.n_classes:
        raise IndexError(f"column {a} out of range 1..{matrix.n_classes}")
    col = matrix.cells[:, a - 1]
    present = frozenset(int(i) for i in np.flatnonzero(col == PRESENT))
    return ColumnView(
        index=a,
        entries=tuple(int(v) for v in col),
        y=len(present),
        q=int((col == UNKNOWN).sum()),
        present=present,
    )


def row_missing_counts(matrix: TraitMatrix) -> np.ndarray:
    """Number of unknown cells in each language row."""
    return (matrix.cells == UNKNOWN).sum(axis=1)


def check_registration_consistency(matrix: TraitMatrix, rule: RegistrationRule) -> list[int]:
    """1-based indices of columns the rule would have discarded."""
    y, q = matrix.column_counts()
    ok = rule.keep_mask(y, q, matrix.n_languages)
    return [int(j) + 1 for j in np.flatnonzero(~ok)]
