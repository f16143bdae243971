"""Merkle tree hashing, inclusion proofs, and consistency proofs.

Domain-separated SHA-256 construction: leaves hash as ``H(0x00 || entry)``,
interior nodes as ``H(0x01 || left || right)``, and a tree over n > 1 leaves
splits so the left subtree holds the largest power of two strictly below n.
The empty tree's root is the hash of the empty string. Proof generation works
on a list of leaf hashes; verification is stateless and rebuilds the root
from the audit path alone.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

EMPTY_ROOT = hashlib.sha256(b"").digest()


class ProofError(ValueError):
    """Requested proof indices are out of range."""


def leaf_hash(entry: bytes) -> bytes:
    return hashlib.sha256(LEAF_PREFIX + entry).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def largest_power_of_two_below(n: int) -> int:
    """Largest power of two strictly less than n (n must be > 1)."""
    if n <= 1:
        raise ValueError(f"no power of two strictly below {n}")
    return 1 << (n - 1).bit_length() - 1


def root(leaves: Sequence[bytes]) -> bytes:
    """Root over already-hashed leaves."""
    n = len(leaves)
    if n == 0:
        return EMPTY_ROOT
    if n == 1:
        return leaves[0]
    k = largest_power_of_two_below(n)
    return node_hash(root(leaves[:k]), root(leaves[k:]))


def inclusion_path(index: int, leaves: Sequence[bytes]) -> list[bytes]:
    """Audit path for ``leaves[index]``, sibling-first from leaf to root."""
    n = len(leaves)
    if not 0 <= index < n:
        raise ProofError(f"leaf index {index} out of range for tree of size {n}")
    if n == 1:
        return []
    k = largest_power_of_two_below(n)
    if index < k:
        path = inclusion_path(index, leaves[:k])
        path.append(root(leaves[k:]))
    else:
        path = inclusion_path(index - k, leaves[k:])
        path.append(root(leaves[:k]))
    return path


def consistency_path(old_size: int, leaves: Sequence[bytes]) -> list[bytes]:
    """Proof that the tree of ``old_size`` is a prefix of ``leaves``."""
    n = len(leaves)
    if not 0 <= old_size <= n:
        raise ProofError(f"old size {old_size} out of range for tree of size {n}")
    if old_size == 0 or old_size == n:
        return []
    return _subproof(old_size, leaves, True)


def _subproof(m: int, leaves: Sequence[bytes], whole_subtree: bool) -> list[bytes]:
    n = len(leaves)
    if m == n:
        return [] if whole_subtree else [root(leaves)]
    k = largest_power_of_two_below(n)
    if m <= k:
        path = _subproof(m, leaves[:k], whole_subtree)
        path.append(root(leaves[k:]))
    else:
        path = _subproof(m - k, leaves[k:], False)
        path.append(root(leaves[:k]))
    return path


def verify_inclusion(
    leaf: bytes,
    index: int,
    tree_size: int,
    path: Sequence[bytes],
    expected_root: bytes,
) -> bool:
    """Check an audit path against a root without access to the tree."""
    if index < 0 or tree_size <= 0 or index >= tree_size:
        return False
    fn, sn = index, tree_size - 1
    current = leaf
    for sibling in path:
        if sn == 0:
            return False
        if fn % 2 == 1 or fn == sn:
            current = node_hash(sibling, current)
            if fn % 2 == 0:
                # right-edge node: climb until fn becomes a right child
                while fn % 2 == 0 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            current = node_hash(current, sibling)
        fn >>= 1
        sn >>= 1
    return sn == 0 and current == expected_root


def verify_consistency(
    old_size: int,
    new_size: int,
    old_root: bytes,
    new_root: bytes,
    path: Sequence[bytes],
) -> bool:
    """Check that the old tree is a prefix of the new tree."""
    if old_size < 0 or old_size > new_size:
        return False
    if old_size == new_size:
        return not path and old_root == new_root
    if old_size == 0:
        # vacuously consistent: anything extends the empty tree
        return not path and old_root == EMPTY_ROOT
    path = list(path)
    fn, sn = old_size - 1, new_size - 1
    while fn % 2 == 1:
        fn >>= 1
        sn >>= 1
    if not path:
        return False
    if fn == 0:
        # old size is a power of two; the old root itself starts both chains
        fr = sr = old_root
    else:
        fr = sr = path.pop(0)
    for sibling in path:
        if sn == 0:
            return False
        if fn % 2 == 1 or fn == sn:
            fr = node_hash(sibling, fr)
            sr = node_hash(sibling, sr)
            while fn % 2 == 0 and fn != 0:
                fn >>= 1
                sn >>= 1
        else:
            sr = node_hash(sr, sibling)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == old_root and sr == new_root
