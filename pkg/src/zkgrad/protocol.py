"""Training-proof and audit-proof orchestration.

The prover commits to the dataset, derives a traversal from the Merkle
root, runs SGD one batch at a time while emitting a constraint-grid
witness per step, and publishes a transcript chaining weight commitments
from initialization to the final salted commitment.

The default backend is a mock: step proofs are digests of the canonical
grid and constraint dumps, re-checked structurally by the verifier. They
are binding but NOT hiding and carry no cryptographic soundness; a real
proving backend slots in behind the same interface. To give the verifier
a recomputable anchor, weight-commitment salts (not data salts) are
derived from a seed published in the transcript.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Protocol

from . import commit as cm
from .air.builder import Circuit
from .air.gadgets import DomainMissError
from .air.grid import CapacityExceededError
from .fxp import FxpScalar, FxpSpec
from .nn.model import ModelGraph, TrainConfig, Weights, init_weights, weight_bytes
from .nn.witness import (
    DEFAULT_COLS,
    emit_step_witness,
    inference_skeleton_json,
    step_skeleton_json,
)

TRANSCRIPT_VERSION = 1
KIND_TRAINING = "training-transcript"
KIND_AUDIT = "audit-report"
TRAVERSAL_SCHEME = "merkle-root-fisher-yates"


class WeightCommitmentMismatch(Exception):
    """Audit weights do not hash to the training transcript's commitment."""


class StepAbort(Exception):
    """A step failed range or capacity checks; carries the step index."""

    def __init__(self, step_index: int, cause: Exception):
        super().__init__(f"step {step_index}: {cause}")
        self.step_index = step_index
        self.cause = cause


@dataclass(frozen=True)
class SecurityParams:
    """Bits of security of the primitives versus protocol size."""

    lam: float
    dataset_size: int
    steps: int

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.dataset_size < 0 or self.steps < 0:
            raise ValueError("sizes must be nonnegative")


def security_bits(params: SecurityParams) -> float:
    """Effective security after the union bound over D + 4T artifacts."""
    total = params.dataset_size + 4 * params.steps
    if total < 1:
        raise ValueError("need at least one hash or proof")
    return params.lam - math.log2(total)


# ---------------------------------------------------------------------------
# Canonical JSON


def canonical_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def checksum_of(doc: dict, hash_name: str) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return cm.digest(hash_name, b"\x06", canonical_bytes(body)).hex()


def serialize(doc: dict) -> bytes:
    return canonical_bytes(doc)


def parse(raw: bytes) -> dict:
    return json.loads(raw.decode())


# ---------------------------------------------------------------------------
# Proof backend


@dataclass(frozen=True)
class StepProof:
    grid_digest: str
    constraint_digest: str
    public_io: dict
    binding: str

    def to_dict(self) -> dict:
        return {
            "grid_digest": self.grid_digest,
            "constraint_digest": self.constraint_digest,
            "public_io": self.public_io,
            "binding": self.binding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepProof":
        return cls(d["grid_digest"], d["constraint_digest"], d["public_io"], d["binding"])


class ProofBackend(Protocol):
    def prove_step(self, circuit: Circuit, public_io: dict) -> StepProof: ...

    def verify_step(self, proof: StepProof, expected_constraints_json: str) -> bool: ...


class MockBackend:
    """Constraint-satisfaction checker standing in for a proving system."""

    def __init__(self, hash_name: str = "sha256"):
        self.hash_name = hash_name

    def _binding(self, grid_digest: str, constraint_digest: str, public_io: dict) -> str:
        return cm.digest(
            self.hash_name,
            b"\x07",
            bytes.fromhex(grid_digest),
            bytes.fromhex(constraint_digest),
            canonical_bytes(public_io),
        ).hex()

    def prove_step(self, circuit: Circuit, public_io: dict) -> StepProof:
        report = circuit.check()
        if not report.ok:
            raise AssertionError(f"refusing to prove an invalid witness: {report.summary()}")
        grid_digest = cm.digest(self.hash_name, circuit.grid_json().encode()).hex()
        constraint_digest = cm.digest(self.hash_name, circuit.constraints_json().encode()).hex()
        return StepProof(
            grid_digest,
            constraint_digest,
            public_io,
            self._binding(grid_digest, constraint_digest, public_io),
        )

    def verify_step(self, proof: StepProof, expected_constraints_json: str) -> bool:
        want = cm.digest(self.hash_name, expected_constraints_json.encode()).hex()
        if proof.constraint_digest != want:
            return False
        return proof.binding == self._binding(
            proof.grid_digest, proof.constraint_digest, proof.public_io
        )


# ---------------------------------------------------------------------------
# Salt derivation


def data_salt(salt_seed: bytes, index: int, hash_name: str = "sha256") -> bytes:
    return cm.digest(hash_name, b"\x08", salt_seed, b"data", index.to_bytes(8, "little"))[:16]


def weight_salt_seed(salt_seed: bytes, hash_name: str = "sha256") -> bytes:
    return cm.digest(hash_name, b"\x08", salt_seed, b"weights")[:16]


def weight_salt(wseed: bytes, step: int, hash_name: str = "sha256") -> bytes:
    return cm.digest(hash_name, b"\x08", wseed, b"step", step.to_bytes(8, "little"))[:16]


# ---------------------------------------------------------------------------
# Training proofs: prove


@dataclass
class ProveResult:
    transcript: dict
    final_weights: Weights
    sorted_examples: list
    merkle_root: bytes


def _header(model: ModelGraph, config: TrainConfig, n: int, hash_name: str,
            wseed: bytes, cols: int) -> dict:
    return {
        "hash": hash_name,
        "field_modulus": config.spec.field_modulus,
        "scale_factor": config.spec.scale_factor,
        "range_bits": config.spec.range_bits,
        "model": model.to_dict(),
        "learning_rate_raw": config.learning_rate.raw,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "dataset_size": n,
        "init_seed": config.init_seed.hex(),
        "weight_salt_seed": wseed.hex(),
        "grid_cols": cols,
    }


def config_from_header(h: dict) -> tuple[ModelGraph, TrainConfig]:
    spec = FxpSpec(h["scale_factor"], h["range_bits"], h["field_modulus"])
    model = ModelGraph.from_dict(h["model"])
    config = TrainConfig(
        FxpScalar(h["learning_rate_raw"], spec),
        h["batch_size"],
        h["epochs"],
        spec,
        bytes.fromhex(h["init_seed"]),
    )
    return model, config


def prove_training(examples, model: ModelGraph, config: TrainConfig,
                   salt_seed: bytes = b"\x00" * 16, hash_name: str = "sha256",
                   cols: int = DEFAULT_COLS, backend: ProofBackend | None = None) -> ProveResult:
    """Commit, derive the traversal, and prove every SGD batch.

    examples: ((inputs, target), ...) in dataset order. The returned
    transcript is a canonical-JSON-ready dict.
    """
    if not examples:
        raise ValueError("dataset must be nonempty")
    backend = backend or MockBackend(hash_name)
    n = len(examples)

    pairs = []
    for i, (inputs, target) in enumerate(examples):
        target_ints = (target,) if isinstance(target, int) else tuple(target)
        payload = tuple(inputs) + target_ints
        pairs.append((cm.commit_example(payload, data_salt(salt_seed, i, hash_name), hash_name), i))
    pairs.sort(key=lambda p: p[0].value)
    sorted_examples = [examples[i] for _, i in pairs]
    commitments = [c.value for c, _ in pairs]

    tree = cm.build_merkle(commitments, hash_name)
    traversal = cm.derive_traversal(tree.root, n, config.epochs, hash_name)

    wseed = weight_salt_seed(salt_seed, hash_name)
    weights = init_weights(model, config.spec, config.init_seed)
    pre_commit = cm.commit_weights(weight_bytes(weights), weight_salt(wseed, 0, hash_name), hash_name)

    steps = []
    step_index = 0
    for epoch in range(config.epochs):
        for batch_start in range(0, n, config.batch_size):
            batch_indices = traversal[epoch][batch_start : batch_start + config.batch_size]
            batch = [sorted_examples[i] for i in batch_indices]
            try:
                witness = emit_step_witness(model, weights, batch, config, cols)
            except (ArithmeticError, CapacityExceededError, DomainMissError, IndexError) as exc:
                raise StepAbort(step_index, exc) from exc
            weights = witness.new_weights
            post_commit = cm.commit_weights(
                weight_bytes(weights), weight_salt(wseed, step_index + 1, hash_name), hash_name
            )
            public_io = {
                "index": step_index,
                "epoch": epoch,
                "batch_indices": list(batch_indices),
                "gather_pattern": witness.pattern,
                "pre_weights": pre_commit.hex,
                "post_weights": post_commit.hex,
            }
            proof = backend.prove_step(witness.circuit, public_io)
            steps.append(proof.to_dict())
            pre_commit = post_commit
            step_index += 1

    doc = {
        "version": TRANSCRIPT_VERSION,
        "kind": KIND_TRAINING,
        "header": _header(model, config, n, hash_name, wseed, cols),
        "dataset_commitments": [c.hex() for c in commitments],
        "merkle_root": tree.root.hex(),
        "traversal": TRAVERSAL_SCHEME,
        "steps": steps,
        "final_commitment": pre_commit.hex,
        "final_salt": pre_commit.salt.hex(),
    }
    doc["checksum"] = checksum_of(doc, hash_name)
    return ProveResult(doc, weights, sorted_examples, tree.root)


# ---------------------------------------------------------------------------
# Training proofs: verify


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: str | None = None

    def __bool__(self):
        return self.accepted


def _reject(reason: str) -> VerifyResult:
    return VerifyResult(False, reason)


_TRANSCRIPT_KEYS = {
    "version", "kind", "header", "dataset_commitments", "merkle_root",
    "traversal", "steps", "final_commitment", "final_salt", "checksum",
}
_HEADER_KEYS = {
    "hash", "field_modulus", "scale_factor", "range_bits", "model",
    "learning_rate_raw", "batch_size", "epochs", "dataset_size",
    "init_seed", "weight_salt_seed", "grid_cols",
}
_STEP_KEYS = {"grid_digest", "constraint_digest", "public_io", "binding"}


def _is_hex(s, length: int) -> bool:
    if not isinstance(s, str) or len(s) != length:
        return False
    try:
        bytes.fromhex(s)
        return True
    except ValueError:
        return False


def verify_training(transcript, cols: int | None = None) -> VerifyResult:
    """Accept iff the transcript is internally consistent: header valid,
    commitments sorted, root and traversal re-derive, every step proof
    checks against its re-synthesized constraint skeleton, and the weight
    commitment chain runs from the public initialization to the final
    commitment."""
    try:
        doc = parse(transcript) if isinstance(transcript, (bytes, str)) else transcript
        if not isinstance(doc, dict):
            return _reject("malformed: not an object")
        if set(doc) != _TRANSCRIPT_KEYS:
            return _reject("schema: unexpected or missing keys")
        if doc["version"] != TRANSCRIPT_VERSION or doc["kind"] != KIND_TRAINING:
            return _reject("version: unsupported transcript version or kind")
        h = doc["header"]
        if not isinstance(h, dict) or set(h) != _HEADER_KEYS:
            return _reject("schema: bad header keys")
        if h["hash"] not in cm.HASHES:
            return _reject("header: unknown hash")
        hash_name = h["hash"]
        try:
            model, config = config_from_header(h)
        except Exception as exc:
            return _reject(f"header: {exc}")
        n = h["dataset_size"]
        if not isinstance(n, int) or n < 1:
            return _reject("header: bad dataset size")

        commitments = doc["dataset_commitments"]
        if len(commitments) != n or not all(_is_hex(c, 64) for c in commitments):
            return _reject("schema: bad dataset commitments")
        if any(commitments[i] > commitments[i + 1] for i in range(n - 1)):
            return _reject("ordering: dataset commitments not sorted")

        tree = cm.build_merkle([bytes.fromhex(c) for c in commitments], hash_name)
        if tree.root.hex() != doc["merkle_root"]:
            return _reject("root-mismatch: merkle root does not re-derive")
        if doc["traversal"] != TRAVERSAL_SCHEME:
            return _reject("traversal: unknown derivation scheme")
        traversal = cm.derive_traversal(tree.root, n, config.epochs, hash_name)

        steps = doc["steps"]
        per_epoch = (n + config.batch_size - 1) // config.batch_size
        if len(steps) != config.epochs * per_epoch:
            return _reject("step-count: expected epochs * ceil(n/batch) proofs")

        backend = MockBackend(hash_name)
        grid_cols = cols if cols is not None else h["grid_cols"]
        skeleton_cache: dict[str, str] = {}
        expected_index = 0
        for epoch in range(config.epochs):
            for batch_start in range(0, n, config.batch_size):
                step = steps[expected_index]
                if not isinstance(step, dict) or set(step) != _STEP_KEYS:
                    return _reject(f"schema: step {expected_index} keys")
                io = step["public_io"]
                want_indices = traversal[epoch][batch_start : batch_start + config.batch_size]
                if io.get("index") != expected_index or io.get("epoch") != epoch:
                    return _reject(f"step-meta: step {expected_index} index/epoch")
                if io.get("batch_indices") != list(want_indices):
                    return _reject(f"traversal-mismatch: step {expected_index}")
                pattern = io.get("gather_pattern")
                key = json.dumps([len(want_indices), pattern])
                if key not in skeleton_cache:
                    try:
                        skeleton_cache[key] = step_skeleton_json(
                            model, config, len(want_indices), pattern, grid_cols
                        )
                    except Exception as exc:
                        return _reject(f"constraint-mismatch: step {expected_index}: {exc}")
                proof = StepProof.from_dict(step)
                if not _is_hex(proof.grid_digest, 64) or not _is_hex(proof.binding, 64):
                    return _reject(f"schema: step {expected_index} digests")
                if not backend.verify_step(proof, skeleton_cache[key]):
                    return _reject(f"step-proof-mismatch: step {expected_index}")
                expected_index += 1

        wseed = bytes.fromhex(h["weight_salt_seed"])
        init_w = init_weights(model, config.spec, bytes.fromhex(h["init_seed"]))
        want_pre0 = cm.commit_weights(
            weight_bytes(init_w), weight_salt(wseed, 0, hash_name), hash_name
        ).hex
        if steps[0]["public_io"]["pre_weights"] != want_pre0:
            return _reject("init-commitment: step 0 pre-weights")
        for t in range(len(steps) - 1):
            if steps[t]["public_io"]["post_weights"] != steps[t + 1]["public_io"]["pre_weights"]:
                return _reject(f"chain-break: steps {t} -> {t + 1}")
        if doc["final_commitment"] != steps[-1]["public_io"]["post_weights"]:
            return _reject("final-commitment: does not close the chain")
        if not _is_hex(doc["final_salt"], 32):
            return _reject("schema: final salt")

        if doc["checksum"] != checksum_of(doc, hash_name):
            return _reject("checksum: transcript bytes were altered")
        return VerifyResult(True)
    except Exception as exc:
        return _reject(f"malformed: {exc}")


# ---------------------------------------------------------------------------
# Audit proofs


_REPORT_KEYS = {"version", "kind", "audit", "weight_commitment", "outputs", "proofs", "checksum"}


def prove_audit(audit_kind: str, params: dict, outputs: dict, proofs: list[StepProof],
                weights: Weights, transcript: dict, hash_name: str = "sha256") -> dict:
    """Wrap an audit function's outputs and step proofs into a report.

    Refuses to build the report unless the provided weights hash to the
    training transcript's final commitment under its published salt.
    """
    salt = bytes.fromhex(transcript["final_salt"])
    want = cm.commit_weights(weight_bytes(weights), salt, hash_name).hex
    if want != transcript["final_commitment"]:
        raise WeightCommitmentMismatch(
            "audit weights do not match the training transcript's final commitment"
        )
    doc = {
        "version": TRANSCRIPT_VERSION,
        "kind": KIND_AUDIT,
        "audit": {"fn": audit_kind, "params": params},
        "weight_commitment": transcript["final_commitment"],
        "outputs": outputs,
        "proofs": [p.to_dict() for p in proofs],
    }
    doc["checksum"] = checksum_of(doc, hash_name)
    return doc


def weight_hash_audit(weights: Weights, transcript: dict, hash_name: str = "sha256") -> dict:
    """The identity audit: F(weights) = commitment digest of the weights."""
    return prove_audit(
        "weight-hash",
        {},
        {"weight_digest": transcript["final_commitment"]},
        [],
        weights,
        transcript,
        hash_name,
    )


def _audit_skeleton(kind: str, io: dict, model: ModelGraph, spec: FxpSpec, cols: int) -> str | None:
    circuit = io.get("circuit")
    if circuit == "inference":
        return inference_skeleton_json(model, spec, io["count"], io["gather_pattern"], cols)
    if circuit == "mean_item_score":
        from . import audits

        return audits.mean_skeleton_json(model, spec, io["count"], io["gather_pattern"], cols)
    if circuit in ("copyright", "demographic"):
        from . import audits

        return audits.audit_skeleton_json(io, spec, cols)
    return None


def verify_audit(report, transcript) -> VerifyResult:
    """Accept iff the report verifies and its commitments match the
    training transcript's."""
    try:
        doc = parse(report) if isinstance(report, (bytes, str)) else report
        tdoc = parse(transcript) if isinstance(transcript, (bytes, str)) else transcript
        if not isinstance(doc, dict) or set(doc) != _REPORT_KEYS:
            return _reject("schema: unexpected or missing report keys")
        if doc["version"] != TRANSCRIPT_VERSION or doc["kind"] != KIND_AUDIT:
            return _reject("version: unsupported report version or kind")
        training = verify_training(tdoc)
        if not training:
            return _reject(f"training-transcript: {training.reason}")
        hash_name = tdoc["header"]["hash"]
        if doc["weight_commitment"] != tdoc["final_commitment"]:
            return _reject("weight-commitment: report does not match training transcript")
        model, config = config_from_header(tdoc["header"])
        backend = MockBackend(hash_name)
        cols = tdoc["header"]["grid_cols"]
        for i, pd in enumerate(doc["proofs"]):
            if not isinstance(pd, dict) or set(pd) != _STEP_KEYS:
                return _reject(f"schema: proof {i} keys")
            proof = StepProof.from_dict(pd)
            skeleton = _audit_skeleton(doc["audit"]["fn"], proof.public_io, model, config.spec, cols)
            if skeleton is None:
                return _reject(f"audit-proof: proof {i} has unknown circuit kind")
            if not backend.verify_step(proof, skeleton):
                return _reject(f"audit-proof-mismatch: proof {i}")
        if doc["checksum"] != checksum_of(doc, hash_name):
            return _reject("checksum: report bytes were altered")
        return VerifyResult(True)
    except Exception as exc:
        return _reject(f"malformed: {exc}")
