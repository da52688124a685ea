"""Gadget library: each function synthesizes witness rows and registers
the constraints that force them.

Cell inputs are equality-linked into the gadget's rows; plain int inputs
are taken as canonical field elements and become free witness cells.
Every gadget family owns one selector column and a fixed row layout, so
its gate polynomials are shared across all instances.
"""

from __future__ import annotations

import decimal
from dataclasses import dataclass

from ..fxp import RangeOverflowError, round_div
from .builder import RANGE_2N, RANGE_N, GridBuilder
from .grid import (
    CapacityExceededError,
    Cell,
    LookupTable,
    col,
    const,
    padd,
    pmul,
    psub,
    psum,
)


class WidthExceededError(Exception):
    """Vector too wide for one grid row."""


class ShapeMismatchError(Exception):
    """Paired vectors of different lengths."""


class DomainMissError(Exception):
    """Lookup input outside the table's domain column."""


def _offset(b: GridBuilder) -> int:
    """Signed values are range-checked through x -> x + 2^(N-1)."""
    return b.spec.range_bound >> 1


# ---------------------------------------------------------------------------
# Linear plumbing rows


def gadget_add(b: GridBuilder, x, y) -> Cell:
    """d = x + y in the field; row [x, y, d]."""
    r = b.new_row("add")
    b.gate_once("add", "add", psub(col(2), padd(col(0), col(1))))
    xv = b.resolve(x)
    yv = b.resolve(y)
    b.copy_in(x, r, 0)
    b.copy_in(y, r, 1)
    return b.put(r, 2, xv + yv)


def gadget_sub(b: GridBuilder, x, y) -> Cell:
    """d = x - y in the field; row [x, y, d]."""
    r = b.new_row("sub")
    b.gate_once("sub", "sub", psub(col(2), psub(col(0), col(1))))
    xv = b.resolve(x)
    yv = b.resolve(y)
    b.copy_in(x, r, 0)
    b.copy_in(y, r, 1)
    return b.put(r, 2, xv - yv)


def gadget_mul_raw(b: GridBuilder, x, y) -> Cell:
    """p = x * y in the field, no rescaling; row [x, y, p]."""
    r = b.new_row("mul")
    b.gate_once("mul", "mul", psub(col(2), pmul(col(0), col(1))))
    xv = b.resolve(x)
    yv = b.resolve(y)
    b.copy_in(x, r, 0)
    b.copy_in(y, r, 1)
    return b.put(r, 2, xv * yv)


def gadget_signed_range(b: GridBuilder, x) -> Cell:
    """Constrain a signed value to (-2^(N-1), 2^(N-1)) via the offset map."""
    b.ensure_range_tables()
    off = _offset(b)
    r = b.new_row("rng")
    b.gate_once("rng", "rng", psub(col(1), padd(col(0), const(off))))
    b.lookup_once("rng", "rng", (1,), RANGE_N)
    cell = b.copy_in(x, r, 0)
    shifted = b.spec.decode(b.resolve(x)) + off
    if not 0 <= shifted < b.spec.range_bound:
        raise RangeOverflowError(f"signed value {shifted - off} outside offset range")
    b.put(r, 1, shifted)
    return cell


# ---------------------------------------------------------------------------
# Vector gadgets: sum, dot product with bias, nonlinearity lookup


def gadget_sum(b: GridBuilder, xs) -> Cell:
    """z = sum(xs) in the field; one row, inputs left of the output column."""
    width = b.cols - 1
    if len(xs) > width:
        raise WidthExceededError(f"{len(xs)} inputs exceed {width} columns")
    r = b.new_row("sum")
    b.gate_once("sum", "sum", psub(col(b.cols - 1), psum([col(j) for j in range(width)])))
    total = 0
    zero = b._consts.get(0)
    for j in range(width):
        if j < len(xs):
            v = b.resolve(xs[j])
            b.copy_in(xs[j], r, j)
            total += v
        else:
            if zero is None:
                zero = b.const_cell(0)
            b.copy_in(zero, r, j)
    return b.put(r, b.cols - 1, total)


def _dot_width(cols: int) -> int:
    return (cols - 2) // 2


def gadget_dot_bias(b: GridBuilder, xs, ys, bias=None) -> Cell:
    """z = bias + sum(x_i * y_i), chained over rows for long vectors.

    Each row holds up to (C-2)//2 pairs; the accumulated value is copied
    into the bias column of the next row.
    """
    if len(xs) != len(ys):
        raise ShapeMismatchError(f"{len(xs)} xs vs {len(ys)} ys")
    n = _dot_width(b.cols)
    bcol, zcol = b.cols - 2, b.cols - 1
    b.gate_once(
        "dot",
        "dot",
        psub(
            col(zcol),
            padd(col(bcol), psum([pmul(col(j), col(n + j)) for j in range(n)])),
        ),
    )
    if bias is None:
        bias = b.const_cell(0)
    acc = bias
    chunks = max(1, (len(xs) + n - 1) // n)
    zero = None
    for k in range(chunks):
        r = b.new_row("dot")
        part = b.resolve(acc)
        for j in range(n):
            i = k * n + j
            if i < len(xs):
                xv = b.resolve(xs[i])
                yv = b.resolve(ys[i])
                b.copy_in(xs[i], r, j)
                b.copy_in(ys[i], r, n + j)
                part += xv * yv
            else:
                if zero is None:
                    zero = b.const_cell(0)
                b.copy_in(zero, r, j)
                b.copy_in(zero, r, n + j)
        b.copy_in(acc, r, bcol)
        acc = b.put(r, zcol, part)
    return acc


def gadget_lookup_nonlin(b: GridBuilder, x, table_id: str) -> Cell:
    """y = table(x) via an (input, output) pair lookup; row [x, y]."""
    table = b.tables.get(table_id)
    if table is None:
        raise KeyError(f"table {table_id} not registered")
    xv = b.resolve(x)
    mapping = table.mapping()
    if xv not in mapping:
        raise DomainMissError(f"value {hex(xv)} not in domain of table {table_id}")
    sel = f"lk_{table_id}"
    r = b.new_row(sel)
    b.lookup_once(f"nonlin:{table_id}", sel, (0, 1), table_id)
    b.copy_in(x, r, 0)
    return b.put(r, 1, mapping[xv])


# ---------------------------------------------------------------------------
# Rounded division and signed rescale


def gadget_round_div(b: GridBuilder, a, c) -> tuple[Cell, Cell]:
    """Force q = round-half-up(a / c) via 2a + c = 2c*q + r, 0 <= r < 2c.

    Row [a, c, q, r, d] with d = 2c - r - 1; range lookups pin a, r, d to
    [0, 2^2N) and c, q to [0, 2^N). The strict d form (rather than 2c - r)
    removes the r = 2c ambiguity for even divisors.
    """
    b.ensure_range_tables()
    b.gate_once(
        "div:euclid",
        "div",
        psub(
            padd(pmul(const(2), col(0)), col(1)),
            padd(pmul(pmul(const(2), col(1)), col(2)), col(3)),
        ),
    )
    b.gate_once(
        "div:strict",
        "div",
        psub(col(4), psub(psub(pmul(const(2), col(1)), col(3)), const(1))),
    )
    b.lookup_once("div:a", "div", (0,), RANGE_2N)
    b.lookup_once("div:c", "div", (1,), RANGE_N)
    b.lookup_once("div:q", "div", (2,), RANGE_N)
    b.lookup_once("div:r", "div", (3,), RANGE_2N)
    b.lookup_once("div:d", "div", (4,), RANGE_2N)

    av = b.resolve(a)
    cv = b.resolve(c)
    if cv == 0:
        raise ZeroDivisionError("division gadget with zero divisor")
    if av >= b.spec.wide_bound:
        raise RangeOverflowError(f"dividend {av} >= 2^(2N)")
    if cv >= b.spec.range_bound:
        raise RangeOverflowError(f"divisor {cv} >= 2^N")
    qv = round_div(av, cv)
    if qv >= b.spec.range_bound:
        raise RangeOverflowError(f"quotient {qv} >= 2^N")
    rv = 2 * av + cv - 2 * cv * qv
    r = b.new_row("div")
    b.copy_in(a, r, 0)
    b.copy_in(c, r, 1)
    q_cell = b.put(r, 2, qv)
    r_cell = b.put(r, 3, rv)
    b.put(r, 4, 2 * cv - rv - 1)
    return q_cell, r_cell


def gadget_rescale_signed(b: GridBuilder, x, divisor: int | None = None) -> Cell:
    """z = round-to-nearest(x / divisor) for signed x, ties away from zero.

    Row [x, s, m, c, q, r, d, z]: s is the sign bit, m the magnitude, and
    the q/r/d trio is the rounded-division core applied to m.
    """
    b.ensure_range_tables()
    b.gate_once("sdiv:bool", "sdiv", psub(pmul(col(1), col(1)), col(1)))
    b.gate_once(
        "sdiv:sign",
        "sdiv",
        padd(psub(col(0), col(2)), pmul(const(2), pmul(col(1), col(2)))),
    )
    b.gate_once(
        "sdiv:euclid",
        "sdiv",
        psub(
            padd(pmul(const(2), col(2)), col(3)),
            padd(pmul(pmul(const(2), col(3)), col(4)), col(5)),
        ),
    )
    b.gate_once(
        "sdiv:strict",
        "sdiv",
        psub(col(6), psub(psub(pmul(const(2), col(3)), col(5)), const(1))),
    )
    b.gate_once(
        "sdiv:out",
        "sdiv",
        padd(psub(col(7), col(4)), pmul(const(2), pmul(col(1), col(4)))),
    )
    b.lookup_once("sdiv:m", "sdiv", (2,), RANGE_2N)
    b.lookup_once("sdiv:c", "sdiv", (3,), RANGE_N)
    b.lookup_once("sdiv:q", "sdiv", (4,), RANGE_N)
    b.lookup_once("sdiv:r", "sdiv", (5,), RANGE_2N)
    b.lookup_once("sdiv:d", "sdiv", (6,), RANGE_2N)

    cv = b.spec.scale_factor if divisor is None else divisor
    if cv == 0:
        raise ZeroDivisionError("rescale with zero divisor")
    if not 0 < cv < b.spec.range_bound:
        raise RangeOverflowError(f"divisor {cv} outside [1, 2^N)")
    xs = b.spec.decode(b.resolve(x))
    m = abs(xs)
    if m >= b.spec.wide_bound:
        raise RangeOverflowError(f"magnitude {m} >= 2^(2N)")
    s = 1 if xs < 0 else 0
    qv = round_div(m, cv)
    if qv >= b.spec.range_bound:
        raise RangeOverflowError(f"quotient {qv} >= 2^N")
    rv = 2 * m + cv - 2 * cv * qv

    r = b.new_row("sdiv")
    b.copy_in(x, r, 0)
    b.put(r, 1, s)
    b.put(r, 2, m)
    c_cell = b.put(r, 3, cv)
    b.link(c_cell, b.const_cell(cv))
    b.put(r, 4, qv)
    b.put(r, 5, rv)
    b.put(r, 6, 2 * cv - rv - 1)
    return b.put(r, 7, -qv if s else qv)


def gadget_mul_rescale(b: GridBuilder, x, y, divisor: int | None = None) -> Cell:
    """Signed product with one rounded rescale: the in-grid mul_rescale."""
    return gadget_rescale_signed(b, gadget_mul_raw(b, x, y), divisor)


# ---------------------------------------------------------------------------
# Pairwise max and softmax


def gadget_max(b: GridBuilder, x, y) -> Cell:
    """c = max(x, y) for nonnegative encodings below 2^N.

    Row [a, b, c, d1, d2]: gate (c-a)(c-b) = 0 picks one input, and the
    range checks on d1 = c-a, d2 = c-b force c to dominate both.
    """
    b.ensure_range_tables()
    b.gate_once("max:pick", "max", pmul(psub(col(2), col(0)), psub(col(2), col(1))))
    b.gate_once("max:d1", "max", psub(col(3), psub(col(2), col(0))))
    b.gate_once("max:d2", "max", psub(col(4), psub(col(2), col(1))))
    b.lookup_once("max:d1", "max", (3,), RANGE_N)
    b.lookup_once("max:d2", "max", (4,), RANGE_N)

    xv = b.resolve(x)
    yv = b.resolve(y)
    if xv >= b.spec.range_bound or yv >= b.spec.range_bound:
        raise RangeOverflowError("max gadget inputs must be below 2^N")
    cv = max(xv, yv)
    r = b.new_row("max")
    b.copy_in(x, r, 0)
    b.copy_in(y, r, 1)
    c_cell = b.put(r, 2, cv)
    b.put(r, 3, cv - xv)
    b.put(r, 4, cv - yv)
    return c_cell


_DEC = decimal.Context(prec=40)


def exp_floor(scale_factor: int) -> int:
    """Raw-unit table floor L = ceil(SF * ln(2*SF)); e^(-L/SF) rounds to 0."""
    return int(
        (_DEC.ln(decimal.Decimal(2 * scale_factor)) * scale_factor).to_integral_value(
            decimal.ROUND_CEILING
        )
    )


def exp_value(scale_factor: int, t: int) -> int:
    """Round(SF * e^(t/SF)) via decimal arithmetic, platform-deterministic."""
    e = _DEC.exp(decimal.Decimal(t) / scale_factor) * scale_factor
    return int((e + decimal.Decimal("0.5")).to_integral_value(decimal.ROUND_FLOOR))


def exp_lookup_table(spec, table_id: str = "exp") -> tuple[LookupTable, int]:
    """Exponential table over raw inputs in [-L, 0], outputs Round(SF*e^(t/SF)).

    Inputs below the floor are clamped onto it, where the entry is 0.
    """
    sf = spec.scale_factor
    floor = exp_floor(sf)
    rows = [(spec.encode(t), exp_value(sf, t)) for t in range(-floor, 1)]
    return LookupTable.explicit(table_id, rows), floor


@dataclass
class SoftmaxCells:
    """Output cells plus the intermediates tests like to inspect."""

    outputs: list[Cell]
    exps: list[Cell]
    total: Cell


def gadget_softmax(b: GridBuilder, xs, exp_table_id: str, exp_floor: int) -> SoftmaxCells:
    """Stable fixed-point softmax: y_i = round_div(SF * e_i, sum e_j).

    e_i is the table exponential of x_i minus the running pairwise max;
    numerators carry an extra scale factor so the division by the
    unscaled sum keeps full precision. Inputs are signed logits.
    """
    if not xs:
        raise ShapeMismatchError("softmax needs at least one input")
    off = _offset(b)
    off_cell = b.const_cell(off)
    clamp_cell = b.const_cell(off - exp_floor)
    sf_cell = b.const_cell(b.spec.scale_factor)

    shifted = [gadget_add(b, x, off_cell) for x in xs]
    mx = shifted[0]
    for sh in shifted[1:]:
        mx = gadget_max(b, sh, mx)
    exps = []
    for sh in shifted:
        t = gadget_sub(b, sh, mx)                # x_i - max, in (-2^(N-1), 0]
        ts = gadget_add(b, t, off_cell)
        tc = gadget_max(b, ts, clamp_cell)       # clamp below the table floor
        t_in = gadget_sub(b, tc, off_cell)
        exps.append(gadget_lookup_nonlin(b, t_in, exp_table_id))
    total = gadget_sum(b, exps)
    outputs = []
    for e in exps:
        numer = gadget_mul_raw(b, e, sf_cell)
        q_cell, _ = gadget_round_div(b, numer, total)
        outputs.append(q_cell)
    return SoftmaxCells(outputs, exps, total)


# ---------------------------------------------------------------------------
# Packing


@dataclass
class PackLayout:
    """Row ranges and outputs of instances packed into one grid."""

    row_ranges: list[tuple[int, int]]
    outputs: list
    rows_per_instance: int


def pack_instances(b: GridBuilder, synth, inputs_list) -> PackLayout:
    """Lay out count instances of a gadget in disjoint row ranges.

    All instances share the family selectors and lookup tables already
    registered on the builder. Capacity is checked up front by probing
    one instance on a scratch builder.
    """
    if not inputs_list:
        return PackLayout([], [], 0)
    probe = GridBuilder(b.spec, b.cols, None)
    for table in b.tables.values():
        probe.register_table(table)
    synth(probe, *inputs_list[0])
    rpi = probe.next_row - probe.reserved_rows
    if b.fixed_rows is not None:
        available = b.fixed_rows - b.next_row
        if rpi * len(inputs_list) > available:
            raise CapacityExceededError(
                f"{len(inputs_list)} instances x {rpi} rows exceed {available} free rows"
            )
    ranges, outputs = [], []
    for inputs in inputs_list:
        start = b.next_row
        outputs.append(synth(b, *inputs))
        ranges.append((start, b.next_row))
    return PackLayout(ranges, outputs, rpi)
