import hashlib
import json

import numpy as np

from errors import ParameterError

SEED_MASK = (1 << 64) - 1


def check_seed(seed, name: str = 'seed', error: type = ParameterError) -> int:
    """seed as an unsigned 64-bit integer"""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed <= SEED_MASK:
        raise error(f"{name} must be an integer in [0, 2^64), got {seed!r}")
    return int(seed)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a sub-stream of seed, keyed by integers"""
    words = np.random.SeedSequence([int(seed) & SEED_MASK, *[int(k) for k in keys]]).generate_state(2, dtype=np.uint32)
    return (int(words[0]) << 32) | int(words[1])


def stable_offset(payload: dict) -> int:
    """64-bit offset from the canonical JSON of payload (stable across processes)"""
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return int.from_bytes(hashlib.sha256(canonical.encode('utf-8')).digest()[:8], 'big')


def fingerprint(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]
