from .builder import RANGE_2N, RANGE_N, Circuit, GridBuilder
from .gadgets import (
    DomainMissError,
    PackLayout,
    ShapeMismatchError,
    SoftmaxCells,
    WidthExceededError,
    exp_lookup_table,
    gadget_add,
    gadget_dot_bias,
    gadget_lookup_nonlin,
    gadget_max,
    gadget_mul_raw,
    gadget_mul_rescale,
    gadget_rescale_signed,
    gadget_round_div,
    gadget_signed_range,
    gadget_softmax,
    gadget_sub,
    gadget_sum,
    pack_instances,
)
from .grid import (
    CapacityExceededError,
    Cell,
    Equality,
    Gate,
    Grid,
    Lookup,
    LookupTable,
    UnassignedCellError,
    Violation,
    ViolationReport,
    check_constraints,
    constraints_to_json,
)
