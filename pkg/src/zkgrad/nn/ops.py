"""Two interchangeable arithmetic backends for the step recipe.

DirectOps computes on signed raw integers. GridOps performs the same
operations while synthesizing a constraint-grid witness, so a step run
against it yields both the updated weights and the grid that proves
them. Values are opaque handles: ints for DirectOps, cells for GridOps.
"""

from __future__ import annotations

from ..air import builder as air_builder
from ..air import gadgets
from ..fxp import FxpSpec, RangeOverflowError, round_div
from .model import ModelTables


def _round_div_signed(a: int, c: int) -> int:
    return -round_div(-a, c) if a < 0 else round_div(a, c)


class DirectOps:
    """Plain integer execution; the fast path for training."""

    is_witness = False

    def __init__(self, spec: FxpSpec, tables: ModelTables):
        self.spec = spec
        self.tables = tables

    def input(self, raw: int) -> int:
        half = self.spec.range_bound >> 1
        if not -half <= raw < half:
            raise RangeOverflowError(f"input {raw} outside signed range")
        return raw

    def const(self, raw: int) -> int:
        return raw

    def raw(self, h: int) -> int:
        return h

    def add(self, x: int, y: int) -> int:
        z = x + y
        if abs(z) >= self.spec.wide_bound:
            raise RangeOverflowError("sum overflow")
        return z

    def sub(self, x: int, y: int) -> int:
        z = x - y
        if abs(z) >= self.spec.wide_bound:
            raise RangeOverflowError("difference overflow")
        return z

    def _checked_quotient(self, value: int, divisor: int) -> int:
        if abs(value) >= self.spec.wide_bound:
            raise RangeOverflowError("rescale operand overflow")
        q = _round_div_signed(value, divisor)
        if abs(q) >= self.spec.range_bound:
            raise RangeOverflowError("rescaled value overflow")
        return q

    def rescale(self, x: int, divisor: int | None = None) -> int:
        return self._checked_quotient(x, divisor or self.spec.scale_factor)

    def mul_rescale(self, x: int, y: int, divisor: int | None = None) -> int:
        return self._checked_quotient(x * y, divisor or self.spec.scale_factor)

    def dot_rescale(self, xs, ys) -> int:
        acc = 0
        for x, y in zip(xs, ys):
            acc += x * y
            if abs(acc) >= self.spec.wide_bound:
                raise RangeOverflowError("dot accumulator overflow")
        return self._checked_quotient(acc, self.spec.scale_factor)

    def nonlin(self, x: int, name: str) -> int:
        return self.tables.tables[name].apply(self.spec, x)

    def softmax(self, xs) -> list[int]:
        # integer twin of the softmax gadget: shift, fold max, clamp to the
        # exponential table floor, rescale numerators by SF, divide by the sum
        off = self.spec.range_bound >> 1
        floor = self.tables.exp_floor
        shifted = [x + off for x in xs]
        mx = shifted[0]
        for sh in shifted[1:]:
            mx = max(sh, mx)
        exps = []
        for sh in shifted:
            t = sh - mx
            tc = max(t + off, off - floor) - off
            exps.append(self.nonlin(tc, "exp"))
        total = sum(exps)
        return [round_div(self.spec.scale_factor * e, total) for e in exps]


class GridOps:
    """Witness-synthesizing execution over a grid builder."""

    is_witness = True

    def __init__(self, builder: air_builder.GridBuilder, tables: ModelTables):
        self.b = builder
        self.spec = builder.spec
        self.tables = tables
        tables.register_all(builder)

    def input(self, raw: int):
        return gadgets.gadget_signed_range(self.b, self.spec.encode(raw))

    def const(self, raw: int):
        return self.b.const_cell(self.spec.encode(raw))

    def raw(self, h) -> int:
        return self.b.signed(h)

    def add(self, x, y):
        return gadgets.gadget_add(self.b, x, y)

    def sub(self, x, y):
        return gadgets.gadget_sub(self.b, x, y)

    def rescale(self, x, divisor: int | None = None):
        return gadgets.gadget_rescale_signed(self.b, x, divisor)

    def mul_rescale(self, x, y, divisor: int | None = None):
        return gadgets.gadget_mul_rescale(self.b, x, y, divisor)

    def dot_rescale(self, xs, ys):
        acc = gadgets.gadget_dot_bias(self.b, list(xs), list(ys))
        return gadgets.gadget_rescale_signed(self.b, acc)

    def nonlin(self, x, name: str):
        return gadgets.gadget_lookup_nonlin(self.b, x, name)

    def softmax(self, xs) -> list:
        res = gadgets.gadget_softmax(self.b, list(xs), "exp", self.tables.exp_floor)
        return res.outputs
