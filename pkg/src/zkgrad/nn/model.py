"""Model graphs, their fixed-point parameters, and training configuration.

A graph is an ordered layer list. Embedding layers each consume one
categorical input field; Concat merges their outputs into the vector the
dense stack operates on. Models without embeddings take a raw feature
vector instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..commit import HashStream
from ..fxp import FxpScalar, FxpSpec, FxpTensor, quantize
from ..air.gadgets import DomainMissError, exp_floor, exp_value
from ..air.grid import LookupTable


@dataclass(frozen=True)
class Embedding:
    vocab: int
    dim: int

    kind: str = field(default="embedding", init=False)


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True

    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class ReLU6:
    kind: str = field(default="relu6", init=False)


@dataclass(frozen=True)
class Concat:
    kind: str = field(default="concat", init=False)


@dataclass(frozen=True)
class Softmax:
    kind: str = field(default="softmax", init=False)


Layer = Embedding | Dense | ReLU6 | Concat | Softmax

LOSS_MSE = "mse"
LOSS_CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[Layer, ...]
    loss: str
    frozen: tuple[bool, ...] = ()
    relu6_bound_units: int = 16  # nonlinearity table half-domain, in real units

    def __post_init__(self):
        if self.loss not in (LOSS_MSE, LOSS_CROSS_ENTROPY):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not self.frozen:
            object.__setattr__(self, "frozen", tuple(False for _ in self.layers))
        if len(self.frozen) != len(self.layers):
            raise ValueError("frozen flags must align with layers")
        self._validate_shapes()

    def _validate_shapes(self):
        pending: list[int] = []
        current: int | None = None
        saw_softmax = False
        for layer in self.layers:
            if isinstance(layer, Embedding):
                if current is not None:
                    raise ValueError("embeddings must precede the dense stack")
                pending.append(layer.dim)
            elif isinstance(layer, Concat):
                if not pending:
                    raise ValueError("concat with no pending embeddings")
                current = sum(pending)
            elif isinstance(layer, Dense):
                if current is None:
                    if pending:
                        raise ValueError("embeddings need a concat before dense layers")
                    current = layer.in_dim  # feature-vector input
                if layer.in_dim != current:
                    raise ValueError(f"dense expects {layer.in_dim}, got {current}")
                current = layer.out_dim
            elif isinstance(layer, ReLU6):
                if current is None:
                    raise ValueError("relu6 before any vector is formed")
            elif isinstance(layer, Softmax):
                if current is None:
                    raise ValueError("softmax before any vector is formed")
                saw_softmax = True
        if current is None:
            raise ValueError("model produces no output vector")
        if saw_softmax != (self.loss == LOSS_CROSS_ENTROPY):
            raise ValueError("softmax output and cross-entropy loss must pair up")
        object.__setattr__(self, "_out_dim", current)

    @property
    def out_dim(self) -> int:
        return self._out_dim

    @property
    def input_fields(self) -> int:
        """Number of categorical inputs (zero means feature-vector input)."""
        return sum(1 for l in self.layers if isinstance(l, Embedding))

    @property
    def feature_dim(self) -> int | None:
        if self.input_fields:
            return None
        first = next(l for l in self.layers if isinstance(l, Dense))
        return first.in_dim

    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Embedding, Dense))]

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = {"kind": l.kind}
            if isinstance(l, Embedding):
                d.update(vocab=l.vocab, dim=l.dim)
            elif isinstance(l, Dense):
                d.update(in_dim=l.in_dim, out_dim=l.out_dim, bias=l.bias)
            layers.append(d)
        return {
            "layers": layers,
            "loss": self.loss,
            "frozen": [1 if f else 0 for f in self.frozen],
            "relu6_bound_units": self.relu6_bound_units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        layers = []
        for ld in d["layers"]:
            kind = ld["kind"]
            if kind == "embedding":
                layers.append(Embedding(ld["vocab"], ld["dim"]))
            elif kind == "dense":
                layers.append(Dense(ld["in_dim"], ld["out_dim"], ld["bias"]))
            elif kind == "relu6":
                layers.append(ReLU6())
            elif kind == "concat":
                layers.append(Concat())
            elif kind == "softmax":
                layers.append(Softmax())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(
            tuple(layers),
            d["loss"],
            tuple(bool(f) for f in d["frozen"]),
            d.get("relu6_bound_units", 16),
        )


def recommender_model(n_users: int, n_items: int, embedding_dim: int = 8,
                      hidden_dims: tuple[int, ...] = ()) -> ModelGraph:
    """Two embeddings, concat, dense stack down to one rating output."""
    layers: list[Layer] = [Embedding(n_users, embedding_dim), Embedding(n_items, embedding_dim), Concat()]
    width = 2 * embedding_dim
    for h in hidden_dims:
        layers.append(Dense(width, h))
        layers.append(ReLU6())
        width = h
    layers.append(Dense(width, 1))
    return ModelGraph(tuple(layers), LOSS_MSE)


# ---------------------------------------------------------------------------
# Nonlinearity tables shared by the direct path and the grid path


@dataclass
class NonlinTable:
    """An integer nonlinearity with its raw domain.

    The direct path evaluates the function; the grid path materializes
    the (input, output) lookup table, lazily since it can run to millions
    of rows at large scale factors.
    """

    name: str
    lo: int  # inclusive raw domain bounds
    hi: int
    fn: object  # int -> int
    spec: FxpSpec
    _table: LookupTable | None = None
    _memo: dict = field(default_factory=dict)

    def apply(self, spec: FxpSpec, raw: int) -> int:
        if not self.lo <= raw <= self.hi:
            raise DomainMissError(f"{self.name}: raw {raw} outside [{self.lo}, {self.hi}]")
        hit = self._memo.get(raw)
        if hit is None:
            hit = self._memo[raw] = self.fn(raw)
        return hit

    def lookup_table(self) -> LookupTable:
        if self._table is None:
            rows = [
                (self.spec.encode(t), self.spec.encode(self.fn(t)))
                for t in range(self.lo, self.hi + 1)
            ]
            self._table = LookupTable.explicit(self.name, rows)
        return self._table


def relu6_tables(spec: FxpSpec, bound_units: int) -> tuple[NonlinTable, NonlinTable]:
    sf = spec.scale_factor
    bound = bound_units * sf
    fwd = NonlinTable("relu6", -bound, bound, lambda t: min(max(t, 0), 6 * sf), spec)
    bwd = NonlinTable(
        "relu6_deriv", -bound, bound, lambda t: sf if 0 < t < 6 * sf else 0, spec
    )
    return fwd, bwd


@dataclass
class ModelTables:
    """Nonlinearities a model needs, keyed for both execution paths."""

    tables: dict[str, NonlinTable]
    exp_floor: int | None = None

    @classmethod
    def build(cls, model: ModelGraph, spec: FxpSpec) -> "ModelTables":
        tables: dict[str, NonlinTable] = {}
        floor = None
        if any(isinstance(l, ReLU6) for l in model.layers):
            fwd, bwd = relu6_tables(spec, model.relu6_bound_units)
            tables[fwd.name] = fwd
            tables[bwd.name] = bwd
        if any(isinstance(l, Softmax) for l in model.layers):
            floor = exp_floor(spec.scale_factor)
            tables["exp"] = NonlinTable(
                "exp", -floor, 0, lambda t: exp_value(spec.scale_factor, t), spec
            )
        return cls(tables, floor)

    def register_all(self, builder):
        for t in self.tables.values():
            builder.register_table(t.lookup_table())


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class Weights:
    """Per-layer fixed-point parameters plus the commitment blinding salt."""

    tensors: dict[int, dict[str, FxpTensor]]
    spec: FxpSpec
    salt: bytes = b"\x00" * 16

    def clone_raws(self) -> dict[int, dict[str, list[int]]]:
        return {
            i: {k: list(t.data) for k, t in params.items()} for i, params in self.tensors.items()
        }

    def replace(self, raws: dict[int, dict[str, list[int]]]) -> "Weights":
        tensors = {
            i: {
                k: FxpTensor(self.tensors[i][k].shape, tuple(vals), self.spec)
                for k, vals in params.items()
            }
            for i, params in raws.items()
        }
        return Weights(tensors, self.spec, self.salt)


GradientSet = dict[int, dict[str, list[int]]]  # negated loss gradient, raw units


def weight_bytes(weights: Weights) -> bytes:
    """Canonical serialization: spec header, then layer order, row-major
    raw int64 little-endian."""
    out = bytearray()
    out += weights.spec.scale_factor.to_bytes(8, "little")
    out += weights.spec.range_bits.to_bytes(2, "little")
    for i in sorted(weights.tensors):
        for key in sorted(weights.tensors[i]):
            tensor = weights.tensors[i][key]
            for v in tensor.data:
                out += int(v).to_bytes(8, "little", signed=True)
    return bytes(out)


def _uniform_floats(stream: HashStream, count: int, half_width: float) -> list[float]:
    return [((stream.next_word() >> 11) / (1 << 53) * 2.0 - 1.0) * half_width for _ in range(count)]


def init_float_params(model: ModelGraph, seed: bytes, hash_name: str = "sha256") -> dict:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    stream = HashStream(b"init" + seed, hash_name)
    params: dict[int, dict[str, list[float]]] = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            hw = 1.0 / layer.dim**0.5
            params[i] = {"table": _uniform_floats(stream, layer.vocab * layer.dim, hw)}
        elif isinstance(layer, Dense):
            hw = 1.0 / layer.in_dim**0.5
            params[i] = {"w": _uniform_floats(stream, layer.in_dim * layer.out_dim, hw)}
            if layer.bias:
                params[i]["b"] = _uniform_floats(stream, layer.out_dim, hw)
    return params


def init_weights(model: ModelGraph, spec: FxpSpec, seed: bytes, salt: bytes = b"\x00" * 16,
                 hash_name: str = "sha256") -> Weights:
    floats = init_float_params(model, seed, hash_name)
    tensors: dict[int, dict[str, FxpTensor]] = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            tensors[i] = {
                "table": FxpTensor.from_reals((layer.vocab, layer.dim), floats[i]["table"], spec)
            }
        elif isinstance(layer, Dense):
            tensors[i] = {
                "w": FxpTensor.from_reals((layer.in_dim, layer.out_dim), floats[i]["w"], spec)
            }
            if layer.bias:
                tensors[i]["b"] = FxpTensor.from_reals((layer.out_dim,), floats[i]["b"], spec)
    return Weights(tensors, spec, salt)


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters; the learning rate is carried in fixed point."""

    learning_rate: FxpScalar
    batch_size: int
    epochs: int
    spec: FxpSpec
    init_seed: bytes = b"\x00" * 16

    def __post_init__(self):
        if self.learning_rate.raw < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    @classmethod
    def make(cls, lr: float, batch_size: int, epochs: int, spec: FxpSpec,
             init_seed: bytes = b"\x00" * 16) -> "TrainConfig":
        """Quantize a float learning rate, rejecting one that underflows
        to a zero raw step at this scale factor."""
        eta = quantize(lr, spec)
        if lr > 0 and eta.raw < 1:
            raise ValueError(
                "learning rate underflows to zero at this scale factor; "
                "increase it or the scale factor"
            )
        return cls(eta, batch_size, epochs, spec, init_seed)
