"""Forward, backward, and SGD update written once against the ops
interface, so the integer fast path and the witness path share one code
path. Includes the float reference trainer used as a parity oracle.

The update follows w' = w + eta * dw with dw holding the negated loss
gradient, so the step descends. Gradient accumulations keep raw products
in wide integers and divide once per output element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..fxp import FxpTensor
from .model import (
    Concat,
    Dense,
    Embedding,
    LOSS_MSE,
    ModelGraph,
    ModelTables,
    ReLU6,
    Softmax,
    TrainConfig,
    Weights,
    init_float_params,
)
from .ops import DirectOps

GatherPattern = list[list[int]]  # per embedding field, per example: unique-row slot


def gather_pattern(model: ModelGraph, batch) -> tuple[GatherPattern, list[list[int]]]:
    """Deduplicate embedding rows touched by a batch.

    Returns per-field example->slot assignments plus the slot->row-id
    tables. The pattern (not the ids) shapes the witness layout, so it is
    published as step metadata for skeleton re-derivation.
    """
    fields = model.input_fields
    pattern: GatherPattern = []
    slot_ids: list[list[int]] = []
    for f in range(fields):
        seen: dict[int, int] = {}
        slots = []
        for inputs, _ in batch:
            row = inputs[f]
            if row not in seen:
                seen[row] = len(seen)
            slots.append(seen[row])
        pattern.append(slots)
        slot_ids.append(list(seen))
    return pattern, slot_ids


def _load_param_handles(ops, model: ModelGraph, weights: Weights, slot_ids):
    """Wrap the step's parameters as ops inputs, embeddings by touched row."""
    handles: dict[int, dict] = {}
    f = 0
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            table = weights.tensors[idx]["table"].data
            rows = {}
            for slot, row in enumerate(slot_ids[f]):
                rows[slot] = [ops.input(table[row * layer.dim + k]) for k in range(layer.dim)]
            handles[idx] = {"table": rows}
            f += 1
        elif isinstance(layer, Dense):
            params = weights.tensors[idx]
            handles[idx] = {"w": [ops.input(v) for v in params["w"].data]}
            if layer.bias:
                handles[idx]["b"] = [ops.input(v) for v in params["b"].data]
    return handles


def _forward_one(ops, model: ModelGraph, handles, inputs, slots_for_example):
    """One example's forward pass; returns (output vector, per-layer input cache)."""
    pending = []
    cur = None
    cache: dict[int, list] = {}
    f = 0
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            pending.append(handles[idx]["table"][slots_for_example[f]])
            f += 1
        elif isinstance(layer, Concat):
            cur = [h for vec in pending for h in vec]
        elif isinstance(layer, Dense):
            if cur is None:
                cur = [ops.input(v) for v in inputs]
            cache[idx] = cur
            w = handles[idx]["w"]
            out = []
            for j in range(layer.out_dim):
                colw = [w[i * layer.out_dim + j] for i in range(layer.in_dim)]
                acc = ops.dot_rescale(cur, colw)
                if layer.bias:
                    acc = ops.add(acc, handles[idx]["b"][j])
                out.append(acc)
            cur = out
        elif isinstance(layer, ReLU6):
            cache[idx] = cur
            cur = [ops.nonlin(h, "relu6") for h in cur]
        elif isinstance(layer, Softmax):
            cache[idx] = cur
            cur = ops.softmax(cur)
    return cur, cache


def _loss_neg_grad(ops, model: ModelGraph, output, target, batch_size: int, sf: int):
    """Negated loss gradient at the model output (logits for CE)."""
    if model.loss == LOSS_MSE:
        grads = []
        for j, pred in enumerate(output):
            y = ops.input(target[j])
            d = ops.sub(y, pred)
            grads.append(ops.rescale(ops.add(d, d), batch_size))  # 2(y - pred)/B
        return grads
    # cross entropy fused with softmax: (onehot - prob)/B at the logits
    grads = []
    for j, prob in enumerate(output):
        onehot = ops.input(sf if j == target else 0)
        grads.append(ops.rescale(ops.sub(onehot, prob), batch_size))
    return grads


def _backward(ops, model: ModelGraph, handles, caches, upstream, pattern: GatherPattern):
    """Propagate negated gradients through the stack; returns per-layer grads.

    upstream: per example, gradient vector at the model output (at the
    logits when the model ends in softmax).
    """
    grads: dict[int, dict] = {}
    n_examples = len(upstream)
    gs = list(upstream)
    emb_layers = [i for i, l in enumerate(model.layers) if isinstance(l, Embedding)]
    for idx in reversed(range(len(model.layers))):
        layer = model.layers[idx]
        if isinstance(layer, Softmax):
            continue  # fused into the cross-entropy gradient
        if isinstance(layer, ReLU6):
            for b in range(n_examples):
                x = caches[b][idx]
                gs[b] = [
                    ops.mul_rescale(g, ops.nonlin(x[i], "relu6_deriv"))
                    for i, g in enumerate(gs[b])
                ]
        elif isinstance(layer, Dense):
            xs = [caches[b][idx] for b in range(n_examples)]
            if not model.frozen[idx]:
                gw = []
                for i in range(layer.in_dim):
                    for j in range(layer.out_dim):
                        gw.append(
                            ops.dot_rescale(
                                [xs[b][i] for b in range(n_examples)],
                                [gs[b][j] for b in range(n_examples)],
                            )
                        )
                grads[idx] = {"w": gw}
                if layer.bias:
                    gb = []
                    for j in range(layer.out_dim):
                        acc = gs[0][j]
                        for b in range(1, n_examples):
                            acc = ops.add(acc, gs[b][j])
                        gb.append(acc)
                    grads[idx]["b"] = gb
            w = handles[idx]["w"]
            for b in range(n_examples):
                gs[b] = [
                    ops.dot_rescale(
                        [w[i * layer.out_dim + j] for j in range(layer.out_dim)], gs[b]
                    )
                    for i in range(layer.in_dim)
                ]
        elif isinstance(layer, Concat):
            # split each example's gradient back into embedding slices
            dims = [model.layers[e].dim for e in emb_layers]
            slices = []
            for b in range(n_examples):
                parts, pos = [], 0
                for d in dims:
                    parts.append(gs[b][pos : pos + d])
                    pos += d
                slices.append(parts)
            gs = slices  # now per example: list of per-field gradient slices
        elif isinstance(layer, Embedding):
            f = emb_layers.index(idx)
            if model.frozen[idx]:
                continue
            rows: dict[int, list] = {}
            for b in range(n_examples):
                slot = pattern[f][b]
                part = gs[b][f]
                if slot in rows:
                    rows[slot] = [ops.add(a, g) for a, g in zip(rows[slot], part)]
                else:
                    rows[slot] = list(part)
            grads[idx] = {"table": rows}
    return grads


def _update(ops, model: ModelGraph, config: TrainConfig, handles, grads):
    """w' = w + eta * dw for every unfrozen parameter."""
    eta = ops.const(config.learning_rate.raw)
    updated: dict[int, dict] = {}
    for idx, layer_grads in grads.items():
        updated[idx] = {}
        for key, value in layer_grads.items():
            if key == "table":
                updated[idx][key] = {
                    slot: [ops.add(w, ops.mul_rescale(eta, g)) for w, g in zip(handles[idx]["table"][slot], gvec)]
                    for slot, gvec in value.items()
                }
            else:
                updated[idx][key] = [
                    ops.add(w, ops.mul_rescale(eta, g)) for w, g in zip(handles[idx][key], value)
                ]
    return updated


@dataclass
class StepResult:
    new_weights: Weights
    predictions: FxpTensor
    updated_handles: dict
    param_handles: dict
    pattern: GatherPattern
    slot_ids: list[list[int]]


def run_sgd_step(ops, model: ModelGraph, weights: Weights, batch, config: TrainConfig) -> StepResult:
    """One SGD step against either ops backend.

    batch: list of (inputs, target) pairs; inputs is a tuple of
    categorical ids (embedding models) or raw feature values, target is
    a tuple of raw values (MSE) or a class index (cross entropy).
    """
    pattern, slot_ids = gather_pattern(model, batch)
    handles = _load_param_handles(ops, model, weights, slot_ids)
    outputs, caches = [], []
    for pos, (inputs, _) in enumerate(batch):
        slots = [pattern[f][pos] for f in range(model.input_fields)]
        out, cache = _forward_one(ops, model, handles, inputs, slots)
        outputs.append(out)
        caches.append(cache)
    upstream = [
        _loss_neg_grad(ops, model, outputs[pos], batch[pos][1], len(batch), config.spec.scale_factor)
        for pos in range(len(batch))
    ]
    grads = _backward(ops, model, handles, caches, upstream, pattern)
    updated = _update(ops, model, config, handles, grads)

    emb_order = [i for i in model.param_layers() if isinstance(model.layers[i], Embedding)]
    raws = weights.clone_raws()
    for idx, layer_params in updated.items():
        layer = model.layers[idx]
        for key, value in layer_params.items():
            if key == "table":
                for slot, hvec in value.items():
                    row = slot_ids[emb_order.index(idx)][slot]
                    for k, h in enumerate(hvec):
                        raws[idx]["table"][row * layer.dim + k] = ops.raw(h)
            else:
                raws[idx][key] = [ops.raw(h) for h in value]
    preds = FxpTensor(
        (len(batch), model.out_dim),
        tuple(ops.raw(h) for out in outputs for h in out),
        config.spec,
    )
    return StepResult(weights.replace(raws), preds, updated, handles, pattern, slot_ids)


# ---------------------------------------------------------------------------
# Public fixed-point API


@dataclass
class ForwardTrace:
    """Activations retained for the backward pass."""

    caches: list[dict]
    outputs: list[list[int]]
    pattern: GatherPattern
    slot_ids: list[list[int]]
    handles: dict


def forward_fxp(model: ModelGraph, weights: Weights, batch,
                tables: ModelTables | None = None) -> tuple[ForwardTrace, FxpTensor]:
    """Fixed-point forward pass; returns activations and predictions."""
    spec = weights.spec
    ops = DirectOps(spec, tables or ModelTables.build(model, spec))
    pattern, slot_ids = gather_pattern(model, batch)
    handles = _load_param_handles(ops, model, weights, slot_ids)
    outputs, caches = [], []
    for pos, (inputs, _) in enumerate(batch):
        slots = [pattern[f][pos] for f in range(model.input_fields)]
        out, cache = _forward_one(ops, model, handles, inputs, slots)
        outputs.append(out)
        caches.append(cache)
    preds = FxpTensor((len(batch), model.out_dim), tuple(h for out in outputs for h in out), spec)
    return ForwardTrace(caches, outputs, pattern, slot_ids, handles), preds


def backward_fxp(model: ModelGraph, weights: Weights, trace: ForwardTrace, batch,
                 tables: ModelTables | None = None) -> dict:
    """Negated loss gradients, quantized; mirrors the witness semantics."""
    spec = weights.spec
    ops = DirectOps(spec, tables or ModelTables.build(model, spec))
    upstream = [
        _loss_neg_grad(ops, model, trace.outputs[pos], batch[pos][1], len(batch), spec.scale_factor)
        for pos in range(len(batch))
    ]
    return _backward(ops, model, trace.handles, trace.caches, upstream, trace.pattern)


def sgd_step(model: ModelGraph, weights: Weights, grads: dict, config: TrainConfig,
             slot_ids: list[list[int]]) -> Weights:
    """Apply w' = w + eta * dw on the direct path."""
    ops = DirectOps(config.spec, ModelTables(tables={}))
    emb_order = [i for i in model.param_layers() if isinstance(model.layers[i], Embedding)]
    handles = {}
    for idx in grads:
        if "table" in grads[idx]:
            f = emb_order.index(idx)
            layer = model.layers[idx]
            table = weights.tensors[idx]["table"].data
            handles[idx] = {
                "table": {
                    slot: [table[row * layer.dim + k] for k in range(layer.dim)]
                    for slot, row in enumerate(slot_ids[f])
                }
            }
        else:
            handles[idx] = {k: list(weights.tensors[idx][k].data) for k in grads[idx]}
    updated = _update(ops, model, config, handles, grads)
    raws = weights.clone_raws()
    for idx, layer_params in updated.items():
        layer = model.layers[idx]
        for key, value in layer_params.items():
            if key == "table":
                f = emb_order.index(idx)
                for slot, hvec in value.items():
                    row = slot_ids[f][slot]
                    for k, h in enumerate(hvec):
                        raws[idx]["table"][row * layer.dim + k] = h
            else:
                raws[idx][key] = list(value)
    return weights.replace(raws)


def batches_for_epoch(examples, order, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start : start + batch_size]]


def train_fxp(model: ModelGraph, examples, config: TrainConfig, traversal,
              weights: Weights | None = None) -> Weights:
    """Full fixed-point training run on the direct path."""
    from .model import init_weights

    spec = config.spec
    tables = ModelTables.build(model, spec)
    ops = DirectOps(spec, tables)
    if weights is None:
        weights = init_weights(model, spec, config.init_seed)
    for epoch in range(config.epochs):
        for batch in batches_for_epoch(examples, traversal[epoch], config.batch_size):
            weights = run_sgd_step(ops, model, weights, batch, config).new_weights
    return weights


def mse_fxp(model: ModelGraph, weights: Weights, examples,
            tables: ModelTables | None = None) -> float:
    """Mean squared error of fixed-point predictions, in real units."""
    sf = weights.spec.scale_factor
    _, preds = forward_fxp(model, weights, examples, tables)
    total = 0.0
    for pos, (_, target) in enumerate(examples):
        for j in range(model.out_dim):
            err = preds.data[pos * model.out_dim + j] / sf - target[j] / sf
            total += err * err
    return total / (len(examples) * model.out_dim)


# ---------------------------------------------------------------------------
# Float reference trainer


def _float_forward_one(model: ModelGraph, params, inputs):
    pending, cur = [], None
    cache = {}
    f = 0
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            cache[idx] = inputs[f]
            pending.append(params[idx]["table"][inputs[f]])
            f += 1
        elif isinstance(layer, Concat):
            cur = np.concatenate(pending)
        elif isinstance(layer, Dense):
            if cur is None:
                cur = np.asarray(inputs, dtype=np.float64)
            cache[idx] = cur
            cur = cur @ params[idx]["w"]
            if layer.bias:
                cur = cur + params[idx]["b"]
        elif isinstance(layer, ReLU6):
            cache[idx] = cur
            cur = np.clip(cur, 0.0, 6.0)
        elif isinstance(layer, Softmax):
            cache[idx] = cur
            e = np.exp(cur - cur.max())
            cur = e / e.sum()
    return cur, cache


def float_params(model: ModelGraph, seed: bytes) -> dict:
    floats = init_float_params(model, seed)
    params = {}
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            params[idx] = {
                "table": np.array(floats[idx]["table"], dtype=np.float64).reshape(layer.vocab, layer.dim)
            }
        elif isinstance(layer, Dense):
            params[idx] = {
                "w": np.array(floats[idx]["w"], dtype=np.float64).reshape(layer.in_dim, layer.out_dim)
            }
            if layer.bias:
                params[idx]["b"] = np.array(floats[idx]["b"], dtype=np.float64)
    return params


def float_backward_batch(model: ModelGraph, params, batch, sf: int):
    """Accumulated negated gradients for one batch (float reference)."""
    grads = {
        idx: {k: np.zeros_like(v) for k, v in layer.items()} for idx, layer in params.items()
    }
    n = len(batch)
    emb_layers = [i for i, l in enumerate(model.layers) if isinstance(l, Embedding)]
    for inputs, target in batch:
        out, cache = _float_forward_one(model, params, inputs)
        if model.loss == LOSS_MSE:
            y = np.array([t / sf for t in target])
            g = 2.0 * (y - out) / n
        else:
            onehot = np.zeros_like(out)
            onehot[target] = 1.0
            g = (onehot - out) / n
        for idx in reversed(range(len(model.layers))):
            layer = model.layers[idx]
            if isinstance(layer, Softmax):
                continue
            if isinstance(layer, ReLU6):
                x = cache[idx]
                g = g * ((x > 0) & (x < 6.0))
            elif isinstance(layer, Dense):
                x = cache[idx]
                if not model.frozen[idx]:
                    grads[idx]["w"] += np.outer(x, g)
                    if layer.bias:
                        grads[idx]["b"] += g
                g = params[idx]["w"] @ g
            elif isinstance(layer, Concat):
                dims = [model.layers[e].dim for e in emb_layers]
                parts, pos = [], 0
                for d in dims:
                    parts.append(g[pos : pos + d])
                    pos += d
                g = parts
            elif isinstance(layer, Embedding):
                if not model.frozen[idx]:
                    f = emb_layers.index(idx)
                    grads[idx]["table"][cache[idx]] += g[f]
    return grads


def train_float(model: ModelGraph, examples, config: TrainConfig, traversal,
                lr: float | None = None) -> dict:
    """fp64 reference trajectory with the same init and traversal."""
    params = float_params(model, config.init_seed)
    sf = config.spec.scale_factor
    step = config.learning_rate.raw / sf if lr is None else lr
    for epoch in range(config.epochs):
        for batch in batches_for_epoch(examples, traversal[epoch], config.batch_size):
            grads = float_backward_batch(model, params, batch, sf)
            for idx, layer_grads in grads.items():
                if model.frozen[idx]:
                    continue
                for key, g in layer_grads.items():
                    params[idx][key] = params[idx][key] + step * g
    return params


def mse_float(model: ModelGraph, params, examples, sf: int) -> float:
    total = 0.0
    for inputs, target in examples:
        out, _ = _float_forward_one(model, params, inputs)
        y = np.array([t / sf for t in target])
        total += float(((out - y) ** 2).sum())
    return total / (len(examples) * model.out_dim)
