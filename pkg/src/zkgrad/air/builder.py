"""Single-writer grid builder: allocates rows, assigns witness values,
and registers constraints as gadgets are synthesized."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..fxp import FxpSpec
from .grid import (
    CapacityExceededError,
    Cell,
    Constraint,
    Equality,
    Gate,
    Grid,
    Lookup,
    LookupTable,
    Poly,
    ViolationReport,
    check_constraints,
    col,
    const,
    constraints_to_json,
    psub,
)

RANGE_N = "range_n"
RANGE_2N = "range_2n"


@dataclass
class Circuit:
    """Finished witness grid plus its constraint system."""

    grid: Grid
    constraints: list[Constraint]
    tables: list[LookupTable]
    labels: dict[str, Cell]
    spec: FxpSpec
    rows_used: int

    def check(self) -> ViolationReport:
        return check_constraints(self.grid, self.constraints, self.tables, self.spec.field_modulus)

    def check_grid(self, grid: Grid) -> ViolationReport:
        """Check a (possibly tampered) grid against this circuit's constraints."""
        return check_constraints(grid, self.constraints, self.tables, self.spec.field_modulus)

    def grid_json(self) -> str:
        return self.grid.to_json()

    def constraints_json(self) -> str:
        return constraints_to_json(
            self.grid.rows, self.grid.cols, self.grid.selectors, self.constraints, self.tables
        )

    def constrained_cells(self) -> list[Cell]:
        """Cells referenced by at least one constraint; perturbation targets."""
        touched: set[tuple[int, int]] = set()
        for cons in self.constraints:
            if isinstance(cons, Gate):
                cols = cons.poly.columns()
                for r in self.grid.selector_rows(cons.selector):
                    touched.update((r, c) for c in cols)
            elif isinstance(cons, Equality):
                touched.add((cons.a.row, cons.a.col))
                touched.add((cons.b.row, cons.b.col))
            else:
                for r in self.grid.selector_rows(cons.selector):
                    touched.update((r, c) for c in cons.columns)
        return [Cell(r, c) for r, c in sorted(touched) if (r, c) in self.grid.cells]


class GridBuilder:
    """Accumulates cells, selectors, and constraints; finalize() emits the grid.

    Rows for explicit lookup tables are reserved up front, so tables must
    be registered before the first gadget row is allocated. With
    fixed_rows=None the final row count is the next power of two that
    fits; otherwise allocation past the limit raises CapacityExceededError.
    """

    def __init__(self, spec: FxpSpec, cols: int = 16, fixed_rows: int | None = None):
        if cols < 8:
            raise ValueError("builder needs at least 8 columns")
        if fixed_rows is not None and (fixed_rows < 1 or fixed_rows & (fixed_rows - 1)):
            raise ValueError("fixed row count must be a power of two")
        self.spec = spec
        self.cols = cols
        self.fixed_rows = fixed_rows
        self.cells: dict[tuple[int, int], int] = {}
        self.sel_rows: dict[str, set[int]] = {}
        self.constraints: list[Constraint] = []
        self.tables: dict[str, LookupTable] = {}
        self.labels: dict[str, Cell] = {}
        self.reserved_rows = 0
        self.next_row = 0
        self._rows_allocated = False
        self._registered: set[str] = set()
        self._consts: dict[int, Cell] = {}
        self._const_row = -1
        self._const_fill = 0

    # -- tables ------------------------------------------------------------

    def register_table(self, table: LookupTable):
        if table.table_id in self.tables:
            if self.tables[table.table_id] != table:
                raise ValueError(f"table id {table.table_id} already registered differently")
            return
        if not table.is_range:
            if self._rows_allocated:
                raise ValueError("explicit tables must be registered before rows are allocated")
            if self.fixed_rows is not None and self.reserved_rows + table.size > self.fixed_rows:
                raise CapacityExceededError(
                    f"table {table.table_id} ({table.size} rows) does not fit in {self.fixed_rows}"
                )
            self.reserved_rows += table.size
            self.next_row = self.reserved_rows
        self.tables[table.table_id] = table

    def ensure_range_tables(self):
        if RANGE_N not in self.tables:
            self.tables[RANGE_N] = LookupTable.value_range(RANGE_N, 0, self.spec.range_bound)
        if RANGE_2N not in self.tables:
            self.tables[RANGE_2N] = LookupTable.value_range(RANGE_2N, 0, self.spec.wide_bound)

    # -- rows and cells ------------------------------------------------------

    def new_row(self, selector: str) -> int:
        if self.fixed_rows is not None and self.next_row >= self.fixed_rows:
            raise CapacityExceededError(f"grid capacity {self.fixed_rows} rows exceeded")
        r = self.next_row
        self.next_row += 1
        self._rows_allocated = True
        self.sel_rows.setdefault(selector, set()).add(r)
        return r

    def put(self, row: int, c: int, value: int) -> Cell:
        """Assign a cell; value is reduced into the field."""
        value %= self.spec.field_modulus
        old = self.cells.get((row, c))
        if old is not None and old != value:
            raise ValueError(f"cell ({row},{c}) already assigned")
        self.cells[(row, c)] = value
        return Cell(row, c)

    def value(self, cell: Cell) -> int:
        return self.cells[(cell.row, cell.col)]

    def signed(self, cell: Cell) -> int:
        return self.spec.decode(self.cells[(cell.row, cell.col)])

    def resolve(self, x) -> int:
        """Field value of a Cell or of an int literal."""
        if isinstance(x, Cell):
            return self.value(x)
        return x % self.spec.field_modulus

    def copy_in(self, x, row: int, c: int) -> Cell:
        """Place x's value at (row, c); equality-link it when x is a cell."""
        dst = self.put(row, c, self.resolve(x))
        if isinstance(x, Cell):
            self.constraints.append(Equality(x, dst))
        return dst

    def link(self, a: Cell, b: Cell):
        self.constraints.append(Equality(a, b))

    def label(self, name: str, cell: Cell):
        self.labels[name] = cell

    # -- constants -----------------------------------------------------------

    def const_cell(self, value: int) -> Cell:
        """Cell pinned to a public constant by a dedicated gate."""
        value %= self.spec.field_modulus
        hit = self._consts.get(value)
        if hit is not None:
            return hit
        if self._const_row < 0 or self._const_fill >= self.cols:
            # one selector per constants row; pin gates reference it
            self._const_sel = f"const_r{self.next_row}"
            self._const_row = self.new_row(self._const_sel)
            self._const_fill = 0
        cell = self.put(self._const_row, self._const_fill, value)
        self.constraints.append(
            Gate(
                f"const:{self._const_row}:{self._const_fill}",
                self._const_sel,
                psub(col(self._const_fill), const(value)),
            )
        )
        self._const_fill += 1
        self._consts[value] = cell
        return cell

    # -- constraint registration (once per family) ---------------------------

    def gate_once(self, name: str, selector: str, poly: Poly):
        key = f"g:{name}"
        if key not in self._registered:
            self._registered.add(key)
            self.constraints.append(Gate(name, selector, poly))

    def lookup_once(self, name: str, selector: str, columns: tuple[int, ...], table_id: str):
        key = f"l:{name}"
        if key not in self._registered:
            self._registered.add(key)
            if table_id not in self.tables:
                raise KeyError(f"lookup {name} references unregistered table {table_id}")
            self.constraints.append(Lookup(name, selector, columns, table_id))

    # -- finalize --------------------------------------------------------------

    def finalize(self) -> Circuit:
        rows_needed = max(self.next_row, 1)
        if self.fixed_rows is not None:
            total = self.fixed_rows
        else:
            total = 1
            while total < rows_needed:
                total *= 2
        grid = Grid(total, self.cols)
        q = self.spec.field_modulus
        for (r, c), v in self.cells.items():
            grid.assign(r, c, v, q)
        for name, rows in self.sel_rows.items():
            column = [0] * total
            for r in rows:
                column[r] = 1
            grid.selectors[name] = column
        return Circuit(
            grid=grid,
            constraints=list(self.constraints),
            tables=sorted(self.tables.values(), key=lambda t: t.table_id),
            labels=dict(self.labels),
            spec=self.spec,
            rows_used=self.next_row,
        )
