"""Seed derivation and canonical hashing for reproducible runs."""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """sha256 hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def derive_seed(master_seed: int, *parts) -> int:
    """Stable per-item seed from a master seed and any hashable labels."""
    digest = hashlib.sha256(canonical_json([master_seed, list(parts)]).encode())
    return int.from_bytes(digest.digest()[:8], "little")
