"""Concrete audit functions proven through the audit-report pipeline:
censorship (quantile of an item's score), counterfactual (train twice,
compare a metric), copyright (cosine dissimilarity of features), and
demographic summary statistics.

Each audit runs in two modes: an estimator-only mode for statistics, and
a proving mode where every scoring or similarity computation is
synthesized as a constraint grid and wrapped in a step proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from . import protocol
from .air import gadgets
from .air.builder import GridBuilder
from .air.grid import LookupTable, col, const, padd, pmul, psub
from .commit import HashStream
from .fxp import FxpSpec, FxpTensor, round_div
from .nn.model import ModelGraph, ModelTables, TrainConfig, Weights
from .nn.ops import DirectOps, GridOps
from .nn.train import gather_pattern, _forward_one, _load_param_handles
from .nn.witness import DEFAULT_COLS, emit_inference_witness, zero_weights

HINT_TABLE = "hint_pm1"  # u - (SF-1) in [0, 3): the inverse-norm hint window


@dataclass(frozen=True)
class AuditParams:
    """Statistical knobs shared by the audits."""

    epsilon: float = 0.05
    delta: float = 0.1
    tau: float = 0.9
    user: int = 0
    nonce: int = 0
    exhaustive: bool = False
    population: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")


def hoeffding_samples(epsilon: float, delta: float) -> int:
    """Samples for an epsilon-accurate Bernoulli estimate at confidence 1-delta."""
    if not 0 < epsilon < 1 or not 0 < delta < 1:
        raise ValueError("epsilon and delta must lie in (0, 1)")
    return math.ceil(math.log(2.0 / delta) / (2.0 * epsilon * epsilon))


@dataclass(frozen=True)
class QuantileEstimate:
    """Fraction of sampled scores at or below the target's score."""

    numerator: int
    n: int
    epsilon: float
    delta: float
    exhaustive: bool = False

    def __post_init__(self):
        if not self.exhaustive and self.n < hoeffding_samples(self.epsilon, self.delta):
            raise ValueError("sample count below the Hoeffding requirement")

    @property
    def point(self) -> float:
        return self.numerator / self.n

    def as_fraction(self) -> Fraction:
        return Fraction(self.numerator, self.n)


# ---------------------------------------------------------------------------
# Censorship audit


def sample_indices(root: bytes, nonce: int, population: int, count: int,
                   hash_name: str = "sha256") -> list[int]:
    """Audit sampling stream, seeded by the Merkle root so the prover
    cannot cherry-pick."""
    stream = HashStream(root + b"censorship" + nonce.to_bytes(8, "little"), hash_name)
    return [stream.next_below(population) for _ in range(count)]


def _score_items(model: ModelGraph, weights: Weights, user: int, items,
                 tables: ModelTables) -> list[int]:
    ops = DirectOps(weights.spec, tables)
    batch = [((user, item), None) for item in items]
    pattern, slot_ids = gather_pattern(model, batch)
    handles = _load_param_handles(ops, model, weights, slot_ids)
    scores = []
    for pos, (inputs, _) in enumerate(batch):
        slots = [pattern[f][pos] for f in range(model.input_fields)]
        out, _ = _forward_one(ops, model, handles, inputs, slots)
        scores.append(out[0])
    return scores


def estimate_quantile(model: ModelGraph, weights: Weights, root: bytes, item: int,
                      params: AuditParams, hash_name: str = "sha256"):
    """Score the target and the sampled population; ties count as below,
    which favors the provider. Returns (estimate, sampled item ids)."""
    tables = ModelTables.build(model, weights.spec)
    item_layer = [l for l in model.layers if l.kind == "embedding"][1]
    population = list(params.population) if params.population else list(range(item_layer.vocab))

    if params.exhaustive:
        sampled = list(population)
    else:
        n = hoeffding_samples(params.epsilon, params.delta)
        draws = sample_indices(root, params.nonce, len(population), n, hash_name)
        sampled = [population[i] for i in draws]

    target_score = _score_items(model, weights, params.user, [item], tables)[0]
    sample_scores = _score_items(model, weights, params.user, sampled, tables)
    numerator = sum(1 for s in sample_scores if s <= target_score)
    estimate = QuantileEstimate(
        numerator, len(sampled), params.epsilon, params.delta, params.exhaustive
    )
    return estimate, sampled


def censorship_audit(item: int, weights: Weights, transcript: dict, params: AuditParams,
                     prove: bool = True, pack: int = 16,
                     hash_name: str = "sha256"):
    """Quantile of an item's score among sampled items for one user.

    Returns the estimate, and in proving mode also an audit report whose
    scoring passes are witnessed.
    """
    model, config = protocol.config_from_header(transcript["header"])
    root = bytes.fromhex(transcript["merkle_root"])
    estimate, sampled = estimate_quantile(model, weights, root, item, params, hash_name)
    numerator = estimate.numerator
    if not prove:
        return estimate, None

    proofs = []
    backend = protocol.MockBackend(hash_name)
    cols = transcript["header"]["grid_cols"]
    todo = [item] + sampled
    for start in range(0, len(todo), pack):
        chunk = todo[start : start + pack]
        witness = emit_inference_witness(
            model, weights, [(params.user, it) for it in chunk], cols
        )
        io = {
            "circuit": "inference",
            "count": len(chunk),
            "gather_pattern": witness.pattern,
        }
        proofs.append(backend.prove_step(witness.circuit, io))
    outputs = {
        "item": item,
        "user": params.user,
        "epsilon": str(params.epsilon),
        "delta": str(params.delta),
        "quantile": {"numerator": numerator, "n": len(sampled)},
        "exhaustive": params.exhaustive,
        "nonce": params.nonce,
    }
    report = protocol.prove_audit(
        "censorship",
        {"epsilon": str(params.epsilon), "delta": str(params.delta), "nonce": params.nonce},
        outputs,
        proofs,
        weights,
        transcript,
        hash_name,
    )
    return estimate, report


# ---------------------------------------------------------------------------
# Counterfactual audit


@dataclass(frozen=True)
class ArmConfig:
    """One training arm: hyperparameters plus an optional dataset edit."""

    train: TrainConfig
    salt_seed: bytes = b"\x00" * 16
    drop_item: int | None = None
    drop_fraction: float = 0.0


def apply_arm_edit(examples, arm: ArmConfig):
    if arm.drop_item is None or arm.drop_fraction <= 0:
        return list(examples)
    hits = [i for i, (inputs, _) in enumerate(examples) if inputs[1] == arm.drop_item]
    drop = set(hits[: math.ceil(len(hits) * arm.drop_fraction)])
    return [ex for i, ex in enumerate(examples) if i not in drop]


def _mean_item_score_circuit(model: ModelGraph, weights: Weights, item: int, users,
                             cols: int) -> tuple:
    """One grid scoring the item for every user and folding the mean."""
    spec = weights.spec
    tables = ModelTables.build(model, spec)
    builder = GridBuilder(spec, cols)
    ops = GridOps(builder, tables)
    batch = [((u, item), None) for u in users]
    pattern, slot_ids = gather_pattern(model, batch)
    handles = _load_param_handles(ops, model, weights, slot_ids)
    acc = None
    for pos, (inputs, _) in enumerate(batch):
        slots = [pattern[f][pos] for f in range(model.input_fields)]
        out, _ = _forward_one(ops, model, handles, inputs, slots)
        acc = out[0] if acc is None else ops.add(acc, out[0])
    mean_cell = ops.rescale(acc, len(users))
    builder.label("mean", mean_cell)
    mean_raw = ops.raw(mean_cell)
    return builder.finalize(), mean_raw, pattern


def mean_item_score(model: ModelGraph, weights: Weights, item: int,
                    tables: ModelTables) -> int:
    """Direct-path twin of the mean circuit (must agree bit for bit)."""
    users = range([l for l in model.layers if l.kind == "embedding"][0].vocab)
    ops = DirectOps(weights.spec, tables)
    batch = [((u, item), None) for u in users]
    pattern, slot_ids = gather_pattern(model, batch)
    handles = _load_param_handles(ops, model, weights, slot_ids)
    acc = None
    for pos, (inputs, _) in enumerate(batch):
        slots = [pattern[f][pos] for f in range(model.input_fields)]
        out, _ = _forward_one(ops, model, handles, inputs, slots)
        acc = out[0] if acc is None else ops.add(acc, out[0])
    return ops.rescale(acc, len(batch))


def counterfactual_audit(arm_a: ArmConfig, arm_b: ArmConfig, examples, model: ModelGraph,
                         metric_item: int, hash_name: str = "sha256",
                         cols: int = DEFAULT_COLS) -> dict:
    """Train both arms, prove both transcripts, and prove the metric
    (mean predicted score of one item over all users) on each."""
    results = {}
    for name, arm in (("a", arm_a), ("b", arm_b)):
        arm_examples = apply_arm_edit(examples, arm)
        try:
            results[name] = protocol.prove_training(
                arm_examples, model, arm.train, arm.salt_seed, hash_name, cols
            )
        except protocol.StepAbort as exc:
            raise protocol.StepAbort(exc.step_index, exc.cause) from exc

    backend = protocol.MockBackend(hash_name)
    values, proofs = {}, []
    n_users = [l for l in model.layers if l.kind == "embedding"][0].vocab
    for name in ("a", "b"):
        circuit, mean_raw, pattern = _mean_item_score_circuit(
            model, results[name].final_weights, metric_item, range(n_users), cols
        )
        io = {
            "circuit": "mean_item_score",
            "count": n_users,
            "gather_pattern": pattern,
            "arm": name,
            "value_raw": mean_raw,
        }
        proofs.append(backend.prove_step(circuit, io))
        values[name] = mean_raw

    outputs = {
        "metric": "mean_item_score",
        "item": metric_item,
        "value_a_raw": values["a"],
        "value_b_raw": values["b"],
        "delta_raw": values["a"] - values["b"],
        "arm_b_commitment": results["b"].transcript["final_commitment"],
    }
    report = protocol.prove_audit(
        "counterfactual",
        {"metric": "mean_item_score", "item": metric_item},
        outputs,
        proofs,
        results["a"].final_weights,
        results["a"].transcript,
        hash_name,
    )
    return {
        "transcript_a": results["a"].transcript,
        "transcript_b": results["b"].transcript,
        "report": report,
        "delta_raw": values["a"] - values["b"],
    }


def verify_counterfactual(bundle: dict) -> protocol.VerifyResult:
    va = protocol.verify_training(bundle["transcript_a"])
    if not va:
        return protocol.VerifyResult(False, f"arm-a: {va.reason}")
    vb = protocol.verify_training(bundle["transcript_b"])
    if not vb:
        return protocol.VerifyResult(False, f"arm-b: {vb.reason}")
    vr = protocol.verify_audit(bundle["report"], bundle["transcript_a"])
    if not vr:
        return vr
    out = bundle["report"]["outputs"]
    if out["arm_b_commitment"] != bundle["transcript_b"]["final_commitment"]:
        return protocol.VerifyResult(False, "arm-b-commitment: report does not match")
    if out["delta_raw"] != out["value_a_raw"] - out["value_b_raw"]:
        return protocol.VerifyResult(False, "delta: inconsistent with arm values")
    return protocol.VerifyResult(True)


# ---------------------------------------------------------------------------
# Copyright audit


class ZeroNormError(ValueError):
    """Cosine similarity undefined for a zero feature vector."""


def _hint_inverse_norm(spec: FxpSpec, n2s: int) -> tuple[int, int]:
    """Witness hint w ~ SF/norm with u = rescale(rescale(w*w), n2s) in
    SF +- 1; the adjacent-integer search always lands in the window."""
    if n2s <= 0:
        raise ZeroNormError("zero or negative squared norm")
    sf = spec.scale_factor
    w0 = round(math.isqrt((sf**3 * 4) // n2s) / 2)  # nearest int to sqrt(SF^3/n2s)
    best = None
    for w in (w0 - 1, w0, w0 + 1):
        if w < 1:
            continue
        u = round_div(round_div(w * w, sf) * n2s, sf)
        score = abs(u - sf)
        if best is None or score < best[0]:
            best = (score, w, u)
    if best is None or best[0] > 1:
        raise ValueError(f"no inverse-norm hint for n2s={n2s}")
    return best[1], best[2]


def cosine_fxp(x: FxpTensor, c: FxpTensor) -> int:
    """Fixed-point cosine similarity, raw units; direct-path twin of the
    copyright circuit."""
    spec = x.spec
    if x.shape != c.shape:
        raise gadgets.ShapeMismatchError(f"{x.shape} vs {c.shape}")
    ops = DirectOps(spec, ModelTables(tables={}))
    dot = ops.dot_rescale(x.data, c.data)
    nx2 = ops.dot_rescale(x.data, x.data)
    nc2 = ops.dot_rescale(c.data, c.data)
    wx, _ = _hint_inverse_norm(spec, nx2)
    wc, _ = _hint_inverse_norm(spec, nc2)
    return ops.mul_rescale(ops.mul_rescale(dot, wx), wc)


def _copyright_rows(builder: GridBuilder, ops: GridOps, x_handles, c_handles, tau_raw: int):
    """Similarity plus the threshold-compare row; returns (cos, flag) cells."""
    spec = builder.spec
    sf = spec.scale_factor
    dot = ops.dot_rescale(x_handles, c_handles)
    nx2 = ops.dot_rescale(x_handles, x_handles)
    nc2 = ops.dot_rescale(c_handles, c_handles)

    builder.register_table(LookupTable.value_range(HINT_TABLE, 0, 3))
    flags = []
    w_cells = []
    for n2 in (nx2, nc2):
        n2_raw = ops.raw(n2)
        w_raw, u_raw = _hint_inverse_norm(spec, n2_raw)
        w = builder.put(builder.new_row("hintw"), 0, w_raw)
        u = ops.mul_rescale(ops.mul_rescale(w, w), n2)
        # e = u - (SF - 1) confined to [0, 3): |u - SF| <= 1
        r = builder.new_row("hint")
        builder.gate_once("hint:e", "hint", psub(col(1), psub(col(0), const(sf - 1))))
        builder.lookup_once("hint:e", "hint", (1,), HINT_TABLE)
        builder.copy_in(u, r, 0)
        builder.put(r, 1, ops.raw(u) - (sf - 1))
        w_cells.append(w)
    cos = ops.mul_rescale(ops.mul_rescale(dot, w_cells[0]), w_cells[1])

    # flag s = [cos >= tau], boundary inclusive: m = s(x-t) + (1-s)(t-1-x) >= 0
    builder.ensure_range_tables()
    builder.gate_once("cmp:bool", "cmp", psub(pmul(col(2), col(2)), col(2)))
    builder.gate_once(
        "cmp:m",
        "cmp",
        psub(
            col(3),
            padd(
                pmul(col(2), psub(col(0), col(1))),
                pmul(psub(const(1), col(2)), psub(psub(col(1), const(1)), col(0))),
            ),
        ),
    )
    builder.lookup_once("cmp:m", "cmp", (3,), "range_n")
    cos_raw = ops.raw(cos)
    s = 1 if cos_raw >= tau_raw else 0
    m = (cos_raw - tau_raw) if s else (tau_raw - 1 - cos_raw)
    r = builder.new_row("cmp")
    builder.copy_in(cos, r, 0)
    tau_cell = builder.copy_in(builder.const_cell(tau_raw), r, 1)
    builder.put(r, 2, s)
    builder.put(r, 3, m)
    return cos, s


def copyright_audit(features: list[tuple[str, FxpTensor]], claimant: FxpTensor, tau_raw: int,
                    weights: Weights | None = None, transcript: dict | None = None,
                    prove: bool = True, hash_name: str = "sha256",
                    cols: int = DEFAULT_COLS) -> dict:
    """Per-item cosine similarity against a claimant's feature vector.

    An item is flagged when similarity >= tau (boundary inclusive); the
    aggregate verdict passes only if no item is flagged.
    """
    spec = claimant.spec
    if all(v == 0 for v in claimant.data):
        raise ZeroNormError("claimant feature has zero norm")
    verdicts = []
    proofs = []
    backend = protocol.MockBackend(hash_name)
    for name, feat in features:
        if feat.shape != claimant.shape:
            raise gadgets.ShapeMismatchError(f"{name}: {feat.shape} vs claimant {claimant.shape}")
        if all(v == 0 for v in feat.data):
            raise ZeroNormError(f"{name}: zero-norm feature")
        cos_raw = cosine_fxp(feat, claimant)
        flagged = cos_raw >= tau_raw
        verdicts.append({"item": name, "similarity_raw": cos_raw, "flagged": flagged})
        if prove:
            builder = GridBuilder(spec, cols)
            ops = GridOps(builder, ModelTables(tables={}))
            xs = [ops.input(v) for v in feat.data]
            cs = [ops.input(v) for v in claimant.data]
            cos_cell, s = _copyright_rows(builder, ops, xs, cs, tau_raw)
            circuit = builder.finalize()
            io = {
                "circuit": "copyright",
                "dim": len(feat.data),
                "tau_raw": tau_raw,
                "item": name,
                "flagged": bool(s),
            }
            proofs.append(backend.prove_step(circuit, io))
            assert ops.raw(cos_cell) == cos_raw
    outputs = {
        "tau_raw": tau_raw,
        "verdicts": verdicts,
        "pass": not any(v["flagged"] for v in verdicts),
    }
    if not prove or transcript is None:
        return {"outputs": outputs, "report": None}
    report = protocol.prove_audit(
        "copyright", {"tau_raw": tau_raw}, outputs, proofs, weights, transcript, hash_name
    )
    return {"outputs": outputs, "report": report}


def copyright_csv(outputs: dict) -> str:
    lines = ["item,similarity_raw,flagged"]
    for v in outputs["verdicts"]:
        lines.append(f"{v['item']},{v['similarity_raw']},{int(v['flagged'])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Demographic audit


def _demographic_circuit(spec: FxpSpec, labels: list[int], categories: int,
                         cols: int) -> tuple:
    builder = GridBuilder(spec, cols)
    if categories + 1 > cols:
        raise gadgets.WidthExceededError(f"{categories} categories need {categories + 1} columns")
    sel = "demog"
    one = const(1)
    polys = []
    for k in range(categories):
        polys.append((f"demog:pick{k}", pmul(col(1 + k), psub(col(0), const(k)))))
        polys.append((f"demog:bool{k}", psub(pmul(col(1 + k), col(1 + k)), col(1 + k))))
    total = const(0)
    for k in range(categories):
        total = padd(total, col(1 + k))
    polys.append(("demog:onehot", psub(total, one)))
    for name, poly in polys:
        builder.gate_once(name, sel, poly)

    bit_cells = [[] for _ in range(categories)]
    for label in labels:
        r = builder.new_row(sel)
        builder.put(r, 0, label)
        for k in range(categories):
            cell = builder.put(r, 1 + k, 1 if label == k else 0)
            bit_cells[k].append(cell)
    counts = []
    for k in range(categories):
        acc = bit_cells[k][0]
        for cell in bit_cells[k][1:]:
            acc = gadgets.gadget_add(builder, acc, cell)
        builder.label(f"count:{k}", acc)
        counts.append(builder.value(acc))
    return builder.finalize(), counts


def demographic_audit(labels: list[int], categories: int, spec: FxpSpec,
                      weights: Weights | None = None, transcript: dict | None = None,
                      prove: bool = True, hash_name: str = "sha256",
                      cols: int = DEFAULT_COLS) -> dict:
    """Proven per-category counts and proportions over the dataset labels."""
    for label in labels:
        if not 0 <= label < categories:
            raise ValueError(f"label {label} outside declared categories [0, {categories})")
    direct_counts = [0] * categories
    for label in labels:
        direct_counts[label] += 1
    outputs = {
        "categories": categories,
        "counts": direct_counts,
        "total": len(labels),
        "proportions": [
            {"numerator": c, "denominator": len(labels)} for c in direct_counts
        ],
    }
    if not prove or transcript is None:
        return {"outputs": outputs, "report": None}
    circuit, counts = _demographic_circuit(spec, labels, categories, cols)
    assert counts == direct_counts
    backend = protocol.MockBackend(hash_name)
    io = {"circuit": "demographic", "count": len(labels), "categories": categories}
    proof = backend.prove_step(circuit, io)
    report = protocol.prove_audit(
        "demographic", {"categories": categories}, outputs, [proof], weights, transcript, hash_name
    )
    return {"outputs": outputs, "report": report}


# ---------------------------------------------------------------------------
# Skeletons for audit verification


def mean_skeleton_json(model: ModelGraph, spec: FxpSpec, count: int, pattern,
                       cols: int) -> str:
    """Re-derive the mean-score circuit's constraints from its pattern."""
    users = list(pattern[0])
    circuit, _, _ = _mean_item_score_circuit(model, zero_weights(model, spec), 0, users, cols)
    return circuit.constraints_json()


def audit_skeleton_json(io: dict, spec: FxpSpec, cols: int) -> str:
    kind = io.get("circuit")
    if kind == "copyright":
        dim = io["dim"]
        dummy = FxpTensor((dim,), tuple([spec.scale_factor] + [0] * (dim - 1)), spec)
        builder = GridBuilder(spec, cols)
        ops = GridOps(builder, ModelTables(tables={}))
        xs = [ops.input(v) for v in dummy.data]
        cs = [ops.input(v) for v in dummy.data]
        _copyright_rows(builder, ops, xs, cs, io["tau_raw"])
        return builder.finalize().constraints_json()
    if kind == "demographic":
        circuit, _ = _demographic_circuit(spec, [0] * io["count"], io["categories"], cols)
        return circuit.constraints_json()
    raise ValueError(f"unknown audit circuit {kind!r}")
