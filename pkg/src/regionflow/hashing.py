"""Canonical JSON hashing so every artifact can be traced to one configuration."""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short stable digest of a JSON-serializable configuration object."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
