"""Per-task seed derivation from one master seed.

``derive_seed(master, *labels)`` folds each label into the state with
``state = splitmix64(state ^ label64)``. Integer labels are used modulo
2**64; string labels map to the first 8 bytes (big-endian) of their
SHA-256. Derived seeds depend only on the labels, never on execution order,
so serial and parallel runs agree.
"""

from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _label64(label) -> int:
    if isinstance(label, int):
        return label & MASK64
    return int.from_bytes(hashlib.sha256(str(label).encode()).digest()[:8], "big")


def derive_seed(master: int, *labels) -> int:
    state = splitmix64(master & MASK64)
    for label in labels:
        state = splitmix64(state ^ _label64(label))
    return state
