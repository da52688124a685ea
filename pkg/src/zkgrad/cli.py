"""Command-line pipeline for providers and auditors exchanging files.

Subcommands: commit, train-prove, verify, audit, security-bits. All runs
are driven by one declarative TOML config; outputs are written
atomically so an interrupted run never leaves a partial artifact.

Exit codes: 0 ok, 1 verification rejected, 2 I/O or malformed file,
3 config validation, 4 range/capacity abort, 5 commitment mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import audits, protocol
from . import commit as cm
from .fxp import FxpSpec, quantize
from .nn import data as nndata
from .nn.model import TrainConfig, Weights, recommender_model
from .fxp import FxpTensor

EXIT_OK = 0
EXIT_REJECT = 1
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_ABORT = 4
EXIT_COMMIT_MISMATCH = 5


class ConfigError(Exception):
    pass


_SCHEMA = {
    "fxp": {"scale_factor", "range_bits", "field_modulus"},
    "protocol": {"hash", "grid_cols", "salt_seed"},
    "model": {"n_users", "n_items", "embedding_dim", "hidden_dims"},
    "train": {"learning_rate", "batch_size", "epochs", "init_seed"},
    "data": {"ratings_csv", "features_dir", "claimant", "labels_csv", "categories"},
    "output": {"dir"},
    "audit": {"epsilon", "delta", "tau", "user", "item", "nonce", "exhaustive", "metric_item"},
    "counterfactual": {"drop_item", "drop_fraction", "salt_seed_b"},
}


def load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    for section, keys in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(keys, dict):
            raise ConfigError(f"section [{section}] must be a table")
        unknown = set(keys) - _SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def _hex_bytes(value: str, name: str, length: int = 16) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name} must be hex") from exc
    if len(raw) != length:
        raise ConfigError(f"{name} must be {length} bytes of hex")
    return raw


class Run:
    """Config resolved into model, spec, and training objects."""

    def __init__(self, doc: dict, config_dir: Path):
        self.doc = doc
        self.base = config_dir
        fxp = doc.get("fxp", {})
        try:
            self.spec = FxpSpec(
                fxp.get("scale_factor", 1 << 13),
                fxp.get("range_bits", 20),
                *( [fxp["field_modulus"]] if "field_modulus" in fxp else [] ),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        proto = doc.get("protocol", {})
        self.hash_name = proto.get("hash", "sha256")
        if self.hash_name not in cm.HASHES:
            raise ConfigError(f"unknown hash {self.hash_name!r}")
        self.grid_cols = proto.get("grid_cols", 16)
        self.salt_seed = _hex_bytes(proto.get("salt_seed", "00" * 16), "protocol.salt_seed")

        m = doc.get("model", {})
        try:
            self.model = recommender_model(
                m.get("n_users", 200),
                m.get("n_items", 200),
                m.get("embedding_dim", 8),
                tuple(m.get("hidden_dims", ())),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        t = doc.get("train", {})
        try:
            self.train = TrainConfig.make(
                t.get("learning_rate", 0.05),
                t.get("batch_size", 8),
                t.get("epochs", 5),
                self.spec,
                _hex_bytes(t.get("init_seed", "00" * 16), "train.init_seed"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        out = doc.get("output", {}).get("dir", "out")
        self.out_dir = (self.base / out).resolve()

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else (self.base / p)

    def examples(self):
        data = self.doc.get("data", {})
        if "ratings_csv" not in data:
            raise ConfigError("data.ratings_csv is required for this command")
        path = self.path(data["ratings_csv"])
        try:
            ratings = nndata.load_ratings_csv(path)
        except OSError as exc:
            raise OSError(f"cannot read dataset: {exc}") from exc
        if not ratings:
            raise ConfigError(f"dataset {path} is empty")
        return nndata.ratings_to_examples(ratings, self.spec)


def atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _threads() -> int:
    raw = os.environ.get("ZKGRAD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("ZKGRAD_THREADS must be an integer") from None
    if n < 1:
        raise ConfigError("ZKGRAD_THREADS must be at least 1")
    return n


# ---------------------------------------------------------------------------
# Weights sidecar (prover-private)


def save_private_weights(path: Path, weights: Weights):
    doc = {
        "kind": "private-weights",
        "note": "prover-side state; do not publish",
        "tensors": {
            str(i): {k: {"shape": list(t.shape), "data": list(t.data)} for k, t in params.items()}
            for i, params in weights.tensors.items()
        },
    }
    atomic_write(path, json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())


def load_private_weights(path: Path, spec: FxpSpec) -> Weights:
    with open(path, "rb") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "private-weights":
        raise ValueError(f"{path} is not a private weights file")
    tensors = {
        int(i): {
            k: FxpTensor(tuple(t["shape"]), tuple(t["data"]), spec) for k, t in params.items()
        }
        for i, params in doc["tensors"].items()
    }
    return Weights(tensors, spec)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_commit(run: Run) -> int:
    examples = run.examples()
    n = len(examples)
    commitments = []
    for i, (inputs, target) in enumerate(examples):
        target_ints = (target,) if isinstance(target, int) else tuple(target)
        commitments.append(
            cm.commit_example(
                tuple(inputs) + target_ints,
                protocol.data_salt(run.salt_seed, i, run.hash_name),
                run.hash_name,
            ).value
        )
    commitments.sort()
    tree = cm.build_merkle(commitments, run.hash_name)
    traversal = cm.derive_traversal(tree.root, n, run.train.epochs, run.hash_name)
    doc = {
        "kind": "dataset-commitments",
        "hash": run.hash_name,
        "commitments": [c.hex() for c in commitments],
        "merkle_root": tree.root.hex(),
        "traversal": traversal,
    }
    out = run.out_dir / "commitments.json"
    atomic_write(out, protocol.serialize(doc))
    print(f"committed {n} examples")
    print(f"merkle root: {tree.root.hex()}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train_prove(run: Run) -> int:
    commitments_path = run.out_dir / "commitments.json"
    if not commitments_path.exists():
        print("run `zkgrad commit` first: no commitments file", file=sys.stderr)
        return EXIT_CONFIG
    examples = run.examples()
    try:
        result = protocol.prove_training(
            examples, run.model, run.train, run.salt_seed, run.hash_name, run.grid_cols
        )
    except protocol.StepAbort as exc:
        print(f"training aborted at step {exc.step_index}: {exc.cause}", file=sys.stderr)
        return EXIT_ABORT
    posted = json.loads(commitments_path.read_bytes())
    if posted.get("merkle_root") != result.transcript["merkle_root"]:
        print("dataset does not match the posted commitments", file=sys.stderr)
        return EXIT_CONFIG
    out = run.out_dir / "transcript.zka.json"
    atomic_write(out, protocol.serialize(result.transcript))
    save_private_weights(run.out_dir / "weights.private.json", result.final_weights)
    print(f"proved {len(result.transcript['steps'])} SGD steps")
    print(f"final weight commitment: {result.transcript['final_commitment']}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(transcript_path: str, report_path: str | None) -> int:
    _threads()  # validate the env var even though verification is serial
    try:
        raw = Path(transcript_path).read_bytes()
        transcript = protocol.parse(raw)
    except (OSError, ValueError) as exc:
        print(f"malformed transcript: {exc}", file=sys.stderr)
        return EXIT_IO
    result = protocol.verify_training(transcript)
    if not result:
        print(f"REJECT: {result.reason}")
        return EXIT_REJECT
    if report_path is not None:
        try:
            report = protocol.parse(Path(report_path).read_bytes())
        except (OSError, ValueError) as exc:
            print(f"malformed report: {exc}", file=sys.stderr)
            return EXIT_IO
        rres = protocol.verify_audit(report, transcript)
        if not rres:
            print(f"REJECT: {rres.reason}")
            return EXIT_REJECT
        print("ACCEPT: transcript and report verify")
        return EXIT_OK
    print("ACCEPT: transcript verifies")
    return EXIT_OK


def _load_audit_state(run: Run):
    tpath = run.out_dir / "transcript.zka.json"
    wpath = run.out_dir / "weights.private.json"
    if not tpath.exists() or not wpath.exists():
        raise OSError("run `zkgrad train-prove` first: missing transcript or weights")
    transcript = protocol.parse(tpath.read_bytes())
    tres = protocol.verify_training(transcript)
    if not tres:
        raise ValueError(f"stored transcript does not verify: {tres.reason}")
    weights = load_private_weights(wpath, run.spec)
    return transcript, weights


def cmd_audit(run: Run, kind: str, csv_out: bool) -> int:
    try:
        transcript, weights = _load_audit_state(run)
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_REJECT
    a = run.doc.get("audit", {})
    try:
        if kind == "censor":
            params = audits.AuditParams(
                epsilon=a.get("epsilon", 0.05),
                delta=a.get("delta", 0.1),
                user=a.get("user", 0),
                nonce=a.get("nonce", 0),
                exhaustive=a.get("exhaustive", False),
            )
            estimate, report = audits.censorship_audit(
                a.get("item", 0), weights, transcript, params, hash_name=run.hash_name
            )
            print(
                f"censorship audit: item {a.get('item', 0)} quantile "
                f"{estimate.numerator}/{estimate.n} = {estimate.point:.4f} "
                f"(±{params.epsilon} at confidence {1 - params.delta})"
            )
        elif kind == "copyright":
            data = run.doc.get("data", {})
            if "features_dir" not in data or "claimant" not in data:
                print("data.features_dir and data.claimant are required", file=sys.stderr)
                return EXIT_CONFIG
            features = nndata.read_feature_dir(run.path(data["features_dir"]), run.spec)
            claimant = nndata.read_fxv(run.path(data["claimant"]), run.spec)
            tau_raw = quantize(a.get("tau", 0.9), run.spec).raw
            out = audits.copyright_audit(
                features, claimant, tau_raw, weights, transcript, hash_name=run.hash_name
            )
            report = out["report"]
            flagged = [v["item"] for v in out["outputs"]["verdicts"] if v["flagged"]]
            verdict = "PASS" if out["outputs"]["pass"] else f"FLAGGED: {', '.join(flagged)}"
            print(f"copyright audit over {len(features)} items: {verdict}")
            if csv_out:
                csv_path = run.out_dir / "audit-copyright.csv"
                atomic_write(csv_path, audits.copyright_csv(out["outputs"]).encode())
                print(f"wrote {csv_path}")
        elif kind == "demographic":
            data = run.doc.get("data", {})
            if "labels_csv" not in data or "categories" not in data:
                print("data.labels_csv and data.categories are required", file=sys.stderr)
                return EXIT_CONFIG
            labels = [
                int(line.split(",")[-1])
                for line in run.path(data["labels_csv"]).read_text().splitlines()
                if line.strip() and not line.lower().startswith("item")
            ]
            out = audits.demographic_audit(
                labels, data["categories"], run.spec, weights, transcript, hash_name=run.hash_name
            )
            report = out["report"]
            print(f"demographic audit: counts {out['outputs']['counts']} of {len(labels)}")
        elif kind == "counterfactual":
            cf = run.doc.get("counterfactual", {})
            examples = run.examples()
            arm_a = audits.ArmConfig(run.train, run.salt_seed)
            salt_b = (
                _hex_bytes(cf["salt_seed_b"], "counterfactual.salt_seed_b")
                if "salt_seed_b" in cf
                else run.salt_seed
            )
            arm_b = audits.ArmConfig(
                run.train, salt_b, cf.get("drop_item"), cf.get("drop_fraction", 0.0)
            )
            bundle = audits.counterfactual_audit(
                arm_a, arm_b, examples, run.model, a.get("metric_item", 0), run.hash_name,
                run.grid_cols,
            )
            atomic_write(
                run.out_dir / "counterfactual-a.zka.json", protocol.serialize(bundle["transcript_a"])
            )
            atomic_write(
                run.out_dir / "counterfactual-b.zka.json", protocol.serialize(bundle["transcript_b"])
            )
            report = bundle["report"]
            sf = run.spec.scale_factor
            print(
                f"counterfactual audit: metric delta {bundle['delta_raw']} raw "
                f"({bundle['delta_raw'] / sf:+.4f})"
            )
        else:
            print(f"unknown audit kind {kind!r}", file=sys.stderr)
            return EXIT_CONFIG
    except protocol.WeightCommitmentMismatch as exc:
        print(f"commitment mismatch: {exc}", file=sys.stderr)
        return EXIT_COMMIT_MISMATCH
    except protocol.StepAbort as exc:
        print(f"audit training aborted at step {exc.step_index}: {exc.cause}", file=sys.stderr)
        return EXIT_ABORT

    out = run.out_dir / f"audit-{kind}.zka.json"
    atomic_write(out, protocol.serialize(report))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_security_bits(lam: float, dataset_size: int, steps: int) -> int:
    bits = protocol.security_bits(protocol.SecurityParams(lam, dataset_size, steps))
    print(f"effective security: {bits:.2f} bits (loss {lam - bits:.2f})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zkgrad",
        description="Verifiable fixed-point training with auditable transcripts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_commit = sub.add_parser("commit", help="commit to a dataset and derive the traversal")
    p_commit.add_argument("--config", required=True)

    p_train = sub.add_parser("train-prove", help="train and emit the proof transcript")
    p_train.add_argument("--config", required=True)

    p_verify = sub.add_parser("verify", help="verify a transcript (and optional audit report)")
    p_verify.add_argument("transcript")
    p_verify.add_argument("report", nargs="?")

    p_audit = sub.add_parser("audit", help="run an audit against the stored transcript")
    p_audit.add_argument("kind", choices=["censor", "counterfactual", "copyright", "demographic"])
    p_audit.add_argument("--config", required=True)
    p_audit.add_argument("--csv", action="store_true", help="also write per-item CSV verdicts")

    p_sec = sub.add_parser("security-bits", help="effective security after the union bound")
    p_sec.add_argument("--security", type=float, default=128.0, dest="lam")
    p_sec.add_argument("--dataset-size", type=int, required=True)
    p_sec.add_argument("--steps", type=int, required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "security-bits":
            return cmd_security_bits(args.lam, args.dataset_size, args.steps)
        if args.command == "verify":
            return cmd_verify(args.transcript, args.report)
        run = Run(load_config(args.config), Path(args.config).resolve().parent)
        if args.command == "commit":
            return cmd_commit(run)
        if args.command == "train-prove":
            return cmd_train_prove(run)
        if args.command == "audit":
            return cmd_audit(run, args.kind, args.csv)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
