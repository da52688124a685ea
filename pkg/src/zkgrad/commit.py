"""Salted hash commitments, Merkle trees, and the hash-stream shuffle
that turns a Merkle root into per-epoch data traversal orderings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

DIGEST_LEN = 32
SALT_LEN = 16

# 1-byte domain-separation tags
TAG_EXAMPLE = b"\x01"
TAG_LEAF = b"\x02"
TAG_NODE = b"\x03"
TAG_WEIGHTS = b"\x04"
TAG_RANDOM = b"\x05"

HASHES = {
    "sha256": hashlib.sha256,
    "sha3-256": hashlib.sha3_256,
    "blake2s": hashlib.blake2s,
}


class EmptyLeavesError(ValueError):
    """A Merkle tree needs at least one leaf."""


def hash_fn(name: str):
    try:
        return HASHES[name]
    except KeyError:
        raise ValueError(f"unknown hash {name!r}; choose from {sorted(HASHES)}") from None


def digest(name: str, *parts: bytes) -> bytes:
    h = hash_fn(name)()
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class SaltedCommitment:
    """Binding (and, under a private salt, hiding) digest of a payload."""

    value: bytes
    salt: bytes

    def __post_init__(self):
        if len(self.value) != DIGEST_LEN:
            raise ValueError("commitment digest must be 32 bytes")
        if len(self.salt) != SALT_LEN:
            raise ValueError("salt must be 16 bytes")

    @property
    def hex(self) -> str:
        return self.value.hex()


def encode_ints(values) -> bytes:
    """Canonical little-endian int64 encoding of an integer sequence."""
    out = bytearray()
    for v in values:
        out += int(v).to_bytes(8, "little", signed=True)
    return bytes(out)


def commit_example(example, salt: bytes, hash_name: str = "sha256") -> SaltedCommitment:
    """Commit to one training example, given as a tuple of integers
    (ids and raw fixed-point values)."""
    payload = encode_ints(example)
    return SaltedCommitment(digest(hash_name, TAG_EXAMPLE, salt, payload), salt)


def commit_weights(payload: bytes, salt: bytes, hash_name: str = "sha256") -> SaltedCommitment:
    """Commit to a canonical weight serialization (see nn.model.weight_bytes)."""
    return SaltedCommitment(digest(hash_name, TAG_WEIGHTS, salt, payload), salt)


# ---------------------------------------------------------------------------
# Merkle tree


@dataclass
class MerkleTree:
    """Binary hash tree; odd layers duplicate their last node."""

    leaves: list[bytes]
    levels: list[list[bytes]]
    hash_name: str

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def inclusion_path(self, index: int) -> list[tuple[bytes, bool]]:
        """Sibling digests from leaf to root; the flag marks a right sibling."""
        if not 0 <= index < len(self.leaves):
            raise IndexError(f"leaf index {index} out of range")
        path = []
        for level in self.levels[:-1]:
            sib = index ^ 1
            if sib >= len(level):
                sib = index  # duplicated last node
            path.append((level[sib], sib > index))
            index //= 2
        return path


def build_merkle(leaves, hash_name: str = "sha256") -> MerkleTree:
    """Tree over leaf digests; every node is H(tag_node || left || right)."""
    leaves = [bytes(x) for x in leaves]
    if not leaves:
        raise EmptyLeavesError("cannot build a Merkle tree over zero leaves")
    levels = [leaves]
    while len(levels[-1]) > 1 or len(levels) == 1:
        cur = levels[-1]
        nxt = []
        for i in range(0, len(cur), 2):
            left = cur[i]
            right = cur[i + 1] if i + 1 < len(cur) else cur[i]
            nxt.append(digest(hash_name, TAG_NODE, left, right))
        levels.append(nxt)
        if len(nxt) == 1:
            break
    return MerkleTree(leaves, levels, hash_name)


def verify_inclusion(
    root: bytes, leaf: bytes, path: list[tuple[bytes, bool]], hash_name: str = "sha256"
) -> bool:
    node = leaf
    for sibling, is_right in path:
        if is_right:
            node = digest(hash_name, TAG_NODE, node, sibling)
        else:
            node = digest(hash_name, TAG_NODE, sibling, node)
    if not path:
        node = digest(hash_name, TAG_NODE, leaf, leaf)
    return node == root


# ---------------------------------------------------------------------------
# Traversal ordering


class HashStream:
    """Deterministic word stream: repeatedly hash the seed, 64 bits at a time."""

    def __init__(self, seed: bytes, hash_name: str = "sha256"):
        self.hash_name = hash_name
        self.state = digest(hash_name, TAG_RANDOM, seed)
        self.offset = 0

    def next_word(self) -> int:
        if self.offset + 8 > len(self.state):
            self.state = digest(self.hash_name, self.state)
            self.offset = 0
        word = int.from_bytes(self.state[self.offset : self.offset + 8], "little")
        self.offset += 8
        return word

    def next_below(self, bound: int) -> int:
        """Unbiased draw from [0, bound) by rejection sampling."""
        if bound < 1:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            w = self.next_word()
            if w < limit:
                return w % bound


def derive_traversal(root: bytes, n: int, epochs: int, hash_name: str = "sha256") -> list[list[int]]:
    """Per-epoch Fisher-Yates permutations of [0, n) driven by the root stream."""
    if n < 1:
        raise ValueError("need at least one example")
    stream = HashStream(root, hash_name)
    orderings = []
    for _ in range(epochs):
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = stream.next_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        orderings.append(perm)
    return orderings
