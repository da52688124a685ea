"""Grid witnesses for SGD steps and plain forward passes.

A step witness runs the exact step recipe against GridOps, so the
updated weights read from the labeled output cells are bit-identical to
the direct path by construction. The constraint skeleton depends only on
the architecture, batch size, and gather pattern, which lets a verifier
re-derive it without the private values.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..air.builder import Circuit, GridBuilder
from ..fxp import FxpSpec, FxpTensor
from .model import Dense, Embedding, ModelGraph, ModelTables, TrainConfig, Weights
from .ops import GridOps
from .train import GatherPattern, gather_pattern, run_sgd_step, _forward_one, _load_param_handles

DEFAULT_COLS = 16


@dataclass
class StepWitness:
    circuit: Circuit
    new_weights: Weights
    predictions: FxpTensor
    pattern: GatherPattern

    def output_cells(self) -> dict:
        return {k: v for k, v in self.circuit.labels.items() if k.startswith("out:")}


def emit_step_witness(model: ModelGraph, weights: Weights, batch, config: TrainConfig,
                      cols: int = DEFAULT_COLS) -> StepWitness:
    """Witness one SGD step: forward, backward, and update for the batch."""
    tables = ModelTables.build(model, config.spec)
    builder = GridBuilder(config.spec, cols)
    ops = GridOps(builder, tables)
    result = run_sgd_step(ops, model, weights, batch, config)
    for idx, layer_params in result.updated_handles.items():
        for key, value in layer_params.items():
            if key == "table":
                for slot, cells in value.items():
                    for k, cell in enumerate(cells):
                        builder.label(f"out:{idx}:table:{slot}:{k}", cell)
            else:
                for k, cell in enumerate(value):
                    builder.label(f"out:{idx}:{key}:{k}", cell)
    return StepWitness(builder.finalize(), result.new_weights, result.predictions, result.pattern)


@dataclass
class InferenceWitness:
    circuit: Circuit
    predictions: FxpTensor
    pattern: GatherPattern


def emit_inference_witness(model: ModelGraph, weights: Weights, inputs_list,
                           cols: int = DEFAULT_COLS) -> InferenceWitness:
    """Witness forward passes for a list of inputs (audit scoring)."""
    spec = weights.spec
    tables = ModelTables.build(model, spec)
    builder = GridBuilder(spec, cols)
    ops = GridOps(builder, tables)
    batch = [(inputs, None) for inputs in inputs_list]
    pattern, slot_ids = gather_pattern(model, batch)
    handles = _load_param_handles(ops, model, weights, slot_ids)
    raws = []
    for pos, inputs in enumerate(inputs_list):
        slots = [pattern[f][pos] for f in range(model.input_fields)]
        out, _ = _forward_one(ops, model, handles, inputs, slots)
        for j, cell in enumerate(out):
            builder.label(f"pred:{pos}:{j}", cell)
        raws.extend(ops.raw(h) for h in out)
    preds = FxpTensor((len(inputs_list), model.out_dim), tuple(raws), spec)
    return InferenceWitness(builder.finalize(), preds, pattern)


# ---------------------------------------------------------------------------
# Skeleton re-derivation (verifier side)


def zero_weights(model: ModelGraph, spec: FxpSpec) -> Weights:
    tensors = {}
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            tensors[idx] = {"table": FxpTensor((layer.vocab, layer.dim), (0,) * (layer.vocab * layer.dim), spec)}
        elif isinstance(layer, Dense):
            tensors[idx] = {"w": FxpTensor((layer.in_dim, layer.out_dim), (0,) * (layer.in_dim * layer.out_dim), spec)}
            if layer.bias:
                tensors[idx]["b"] = FxpTensor((layer.out_dim,), (0,) * layer.out_dim, spec)
    return Weights(tensors, spec)


def dummy_batch(model: ModelGraph, batch_size: int, pattern: GatherPattern):
    """A batch of zero examples reproducing a gather pattern's structure."""
    batch = []
    for pos in range(batch_size):
        if model.input_fields:
            inputs = tuple(pattern[f][pos] for f in range(model.input_fields))
        else:
            inputs = tuple(0 for _ in range(model.feature_dim))
        target = 0 if model.loss == "cross_entropy" else tuple(0 for _ in range(model.out_dim))
        batch.append((inputs, target))
    return batch


def step_skeleton_json(model: ModelGraph, config: TrainConfig, batch_size: int,
                       pattern: GatherPattern, cols: int = DEFAULT_COLS) -> str:
    """Constraint-system dump an honest step witness must match."""
    witness = emit_step_witness(
        model, zero_weights(model, config.spec), dummy_batch(model, batch_size, pattern), config, cols
    )
    return witness.circuit.constraints_json()


def inference_skeleton_json(model: ModelGraph, spec: FxpSpec, count: int,
                            pattern: GatherPattern, cols: int = DEFAULT_COLS) -> str:
    inputs = dummy_batch(model, count, pattern)
    witness = emit_inference_witness(model, zero_weights(model, spec), [i for i, _ in inputs], cols)
    return witness.circuit.constraints_json()
