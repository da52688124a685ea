"""Constraint grid: a rectangular array of field elements checked by
equality constraints, lookup-table memberships, and per-row polynomial
gates activated by selector columns.

The checker here is a mock prover: it evaluates every constraint
directly against the witness instead of compiling to a proof system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property


class UnassignedCellError(Exception):
    """An active constraint references a cell that was never assigned."""


class CapacityExceededError(Exception):
    """The grid ran out of rows."""


# ---------------------------------------------------------------------------
# Row-local polynomial expressions


@dataclass(frozen=True)
class Cell:
    """Absolute cell position."""

    row: int
    col: int


@dataclass(frozen=True)
class Poly:
    """Expression tree over one row's cells, evaluated mod q.

    op is one of "cell" (ref holds a column index), "const" (ref holds a
    field element), "+", "-", "*" (args hold operands).
    """

    op: str
    ref: int = 0
    args: tuple["Poly", ...] = ()

    def eval(self, row_values, q: int) -> int:
        if self.op == "cell":
            v = row_values[self.ref]
            if v is None:
                raise UnassignedCellError(f"column {self.ref} unassigned")
            return v
        if self.op == "const":
            return self.ref
        a = self.args[0].eval(row_values, q)
        b = self.args[1].eval(row_values, q)
        if self.op == "+":
            return (a + b) % q
        if self.op == "-":
            return (a - b) % q
        return a * b % q

    def columns(self) -> set[int]:
        if self.op == "cell":
            return {self.ref}
        cols: set[int] = set()
        for a in self.args:
            cols |= a.columns()
        return cols

    def to_json(self):
        if self.op == "cell":
            return ["x", self.ref]
        if self.op == "const":
            return ["c", hex(self.ref)]
        return [self.op, self.args[0].to_json(), self.args[1].to_json()]


def col(j: int) -> Poly:
    return Poly("cell", j)


def const(v: int) -> Poly:
    return Poly("const", v)


def padd(a: Poly, b: Poly) -> Poly:
    return Poly("+", args=(a, b))


def psub(a: Poly, b: Poly) -> Poly:
    return Poly("-", args=(a, b))


def pmul(a: Poly, b: Poly) -> Poly:
    return Poly("*", args=(a, b))


def psum(terms: list[Poly]) -> Poly:
    acc = const(0)
    for t in terms:
        acc = padd(acc, t)
    return acc


# ---------------------------------------------------------------------------
# Constraints and tables


@dataclass(frozen=True)
class Gate:
    """Polynomial that must vanish on every row where the selector is 1."""

    name: str
    selector: str
    poly: Poly


@dataclass(frozen=True)
class Equality:
    """Two cells constrained equal (the permutation argument stand-in)."""

    a: Cell
    b: Cell


@dataclass(frozen=True)
class Lookup:
    """Column tuple constrained to lie in a table on selected rows."""

    name: str
    selector: str
    columns: tuple[int, ...]
    table_id: str


@dataclass(frozen=True)
class LookupTable:
    """Fixed relation of field-element tuples.

    Explicit tables carry their rows and occupy that many grid rows.
    Range tables (arity 1, contiguous [lo, hi)) are kept intensional:
    materializing 2^(2N) tuples is infeasible, so membership is checked
    against the bounds and no grid rows are reserved.
    """

    table_id: str
    arity: int
    rows: frozenset = field(default_factory=frozenset)
    range_bounds: tuple[int, int] | None = None

    @classmethod
    def explicit(cls, table_id: str, rows) -> "LookupTable":
        rows = frozenset(tuple(r) for r in rows)
        if not rows:
            raise ValueError("explicit table needs at least one row")
        arity = len(next(iter(rows)))
        if any(len(r) != arity for r in rows):
            raise ValueError("table rows must share one arity")
        return cls(table_id, arity, rows=rows)

    @classmethod
    def value_range(cls, table_id: str, lo: int, hi: int) -> "LookupTable":
        if lo >= hi:
            raise ValueError("empty range table")
        return cls(table_id, 1, range_bounds=(lo, hi))

    @property
    def is_range(self) -> bool:
        return self.range_bounds is not None

    @property
    def size(self) -> int:
        if self.is_range:
            return self.range_bounds[1] - self.range_bounds[0]
        return len(self.rows)

    def contains(self, tup: tuple[int, ...]) -> bool:
        if self.is_range:
            lo, hi = self.range_bounds
            return lo <= tup[0] < hi
        return tup in self.rows

    @cached_property
    def _pair_map(self) -> dict:
        return {a: b for a, b in self.rows}

    def mapping(self) -> dict:
        """Domain-to-output map for arity-2 nonlinearity tables."""
        if self.arity != 2:
            raise ValueError("mapping requires an arity-2 table")
        return self._pair_map

    def to_json(self):
        if self.is_range:
            return {
                "id": self.table_id,
                "arity": 1,
                "kind": "range",
                "lo": hex(self.range_bounds[0]),
                "hi": hex(self.range_bounds[1]),
            }
        return {
            "id": self.table_id,
            "arity": self.arity,
            "kind": "explicit",
            "rows": sorted([hex(v) for v in r] for r in self.rows),
        }


Constraint = Gate | Equality | Lookup


# ---------------------------------------------------------------------------
# Grid


class Grid:
    """R x C cell array plus named 0/1 selector columns. R is a power of two."""

    def __init__(self, rows: int, cols: int):
        if rows < 1 or rows & (rows - 1):
            raise ValueError("row count must be a power of two")
        if cols < 1:
            raise ValueError("need at least one column")
        self.rows = rows
        self.cols = cols
        self.cells: dict[tuple[int, int], int] = {}
        self.selectors: dict[str, list[int]] = {}

    def assign(self, row: int, c: int, value: int, q: int):
        if not (0 <= row < self.rows and 0 <= c < self.cols):
            raise IndexError(f"cell ({row},{c}) outside {self.rows}x{self.cols} grid")
        value %= q
        old = self.cells.get((row, c))
        if old is not None and old != value:
            raise ValueError(f"cell ({row},{c}) already assigned")
        self.cells[(row, c)] = value

    def get(self, row: int, c: int) -> int | None:
        return self.cells.get((row, c))

    def value(self, cell: Cell) -> int:
        v = self.cells.get((cell.row, cell.col))
        if v is None:
            raise UnassignedCellError(f"cell ({cell.row},{cell.col}) unassigned")
        return v

    def selector_rows(self, name: str):
        column = self.selectors.get(name)
        if column is None:
            return ()
        return tuple(r for r, bit in enumerate(column) if bit)

    def tampered(self, row: int, c: int, value: int) -> "Grid":
        """Copy with one cell overridden; for soundness harnesses."""
        g = Grid(self.rows, self.cols)
        g.cells = dict(self.cells)
        g.selectors = {k: list(v) for k, v in self.selectors.items()}
        g.cells[(row, c)] = value
        return g

    def to_json(self) -> str:
        """Canonical column-major dump, hex field elements."""
        cols = []
        for c in range(self.cols):
            cols.append(
                [
                    hex(self.cells[(r, c)]) if (r, c) in self.cells else None
                    for r in range(self.rows)
                ]
            )
        doc = {
            "rows": self.rows,
            "cols": self.cols,
            "cells": cols,
            "selectors": {k: v for k, v in sorted(self.selectors.items())},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Checking


@dataclass(frozen=True)
class Violation:
    constraint: str
    row: int
    detail: str


@dataclass
class ViolationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def summary(self, limit: int = 8) -> str:
        if self.ok:
            return "all constraints satisfied"
        head = [f"{v.constraint} @row {v.row}: {v.detail}" for v in self.violations[:limit]]
        more = len(self.violations) - len(head)
        if more > 0:
            head.append(f"... and {more} more")
        return "\n".join(head)


def check_constraints(
    grid: Grid,
    constraints: list[Constraint],
    tables: list[LookupTable],
    q: int,
) -> ViolationReport:
    """Evaluate every constraint against the witness.

    Returns the exact set of violated (constraint, row) pairs; raises
    UnassignedCellError if an active constraint touches an empty cell.
    """
    table_map = {t.table_id: t for t in tables}
    report = ViolationReport()

    for idx, cons in enumerate(constraints):
        if isinstance(cons, Gate):
            needed = sorted(cons.poly.columns())
            for r in grid.selector_rows(cons.selector):
                row_values = {c: grid.get(r, c) for c in needed}
                for c, v in row_values.items():
                    if v is None:
                        raise UnassignedCellError(
                            f"gate {cons.name} row {r} references unassigned column {c}"
                        )
                residual = cons.poly.eval(row_values, q)
                if residual:
                    report.violations.append(
                        Violation(f"gate:{cons.name}", r, f"residual {hex(residual)}")
                    )
        elif isinstance(cons, Equality):
            va = grid.get(cons.a.row, cons.a.col)
            vb = grid.get(cons.b.row, cons.b.col)
            if va is None or vb is None:
                raise UnassignedCellError(f"equality #{idx} references unassigned cell")
            if va != vb:
                report.violations.append(
                    Violation(
                        f"equality:{idx}",
                        cons.a.row,
                        f"({cons.a.row},{cons.a.col})={hex(va)} != ({cons.b.row},{cons.b.col})={hex(vb)}",
                    )
                )
        elif isinstance(cons, Lookup):
            table = table_map.get(cons.table_id)
            if table is None:
                raise KeyError(f"lookup {cons.name} references unknown table {cons.table_id}")
            for r in grid.selector_rows(cons.selector):
                tup = []
                for c in cons.columns:
                    v = grid.get(r, c)
                    if v is None:
                        raise UnassignedCellError(
                            f"lookup {cons.name} row {r} references unassigned column {c}"
                        )
                    tup.append(v)
                if not table.contains(tuple(tup)):
                    report.violations.append(
                        Violation(
                            f"lookup:{cons.name}",
                            r,
                            "missing-tuple (" + ",".join(hex(v) for v in tup) + ")",
                        )
                    )
        else:
            raise TypeError(f"unknown constraint type {type(cons)!r}")

    return report


def constraints_to_json(
    grid_rows: int,
    grid_cols: int,
    selectors: dict[str, list[int]],
    constraints: list[Constraint],
    tables: list[LookupTable],
) -> str:
    """Canonical dump of the constraint system without witness values."""
    gates, equalities, lookups = [], [], []
    for cons in constraints:
        if isinstance(cons, Gate):
            gates.append({"name": cons.name, "selector": cons.selector, "poly": cons.poly.to_json()})
        elif isinstance(cons, Equality):
            equalities.append([cons.a.row, cons.a.col, cons.b.row, cons.b.col])
        else:
            lookups.append(
                {
                    "name": cons.name,
                    "selector": cons.selector,
                    "columns": list(cons.columns),
                    "table": cons.table_id,
                }
            )
    doc = {
        "rows": grid_rows,
        "cols": grid_cols,
        "selectors": {k: v for k, v in sorted(selectors.items())},
        "gates": gates,
        "equalities": equalities,
        "lookups": lookups,
        "tables": [t.to_json() for t in sorted(tables, key=lambda t: t.table_id)],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
