"""The 16 two-input boolean operators in soft (real-valued) and hard (binary) form.

Gate ids 0..15 index a fixed operator table.  The hard form of gate ``k`` at
input ``(a, b)`` is bit ``3 - (2a + b)`` of ``k``, so the id doubles as the
truth table read left to right over inputs 00, 01, 10, 11.  The soft form is
the unique multilinear polynomial through those four corners; on the unit
square it therefore stays inside [0, 1] and agrees with the hard form exactly
at binary inputs.  The id-to-operator mapping is serialization-stable: models
written with one version of this table load identically later.
"""

from __future__ import annotations

import numpy as np

N_GATES = 16

GATE_NAMES = (
    "FALSE",
    "AND",
    "A_AND_NOT_B",
    "A",
    "NOT_A_AND_B",
    "B",
    "XOR",
    "OR",
    "NOR",
    "XNOR",
    "NOT_B",
    "B_IMPLIES_A",
    "NOT_A",
    "A_IMPLIES_B",
    "NAND",
    "TRUE",
)

# Gate k as the multilinear polynomial c0 + ca*a + cb*b + cab*a*b.
_COEFFS = np.array(
    [
        (0.0, 0.0, 0.0, 0.0),  # 0  FALSE
        (0.0, 0.0, 0.0, 1.0),  # 1  AND            a*b
        (0.0, 1.0, 0.0, -1.0),  # 2  A AND NOT B    a - a*b
        (0.0, 1.0, 0.0, 0.0),  # 3  A
        (0.0, 0.0, 1.0, -1.0),  # 4  NOT A AND B    b - a*b
        (0.0, 0.0, 1.0, 0.0),  # 5  B
        (0.0, 1.0, 1.0, -2.0),  # 6  XOR            a + b - 2ab
        (0.0, 1.0, 1.0, -1.0),  # 7  OR             a + b - ab
        (1.0, -1.0, -1.0, 1.0),  # 8  NOR            1 - (a + b - ab)
        (1.0, -1.0, -1.0, 2.0),  # 9  XNOR           1 - (a + b - 2ab)
        (1.0, 0.0, -1.0, 0.0),  # 10 NOT B
        (1.0, 0.0, -1.0, 1.0),  # 11 B IMPLIES A    1 - b + ab
        (1.0, -1.0, 0.0, 0.0),  # 12 NOT A
        (1.0, -1.0, 0.0, 1.0),  # 13 A IMPLIES B    1 - a + ab
        (1.0, 0.0, 0.0, -1.0),  # 14 NAND           1 - ab
        (1.0, 0.0, 0.0, 0.0),  # 15 TRUE
    ]
)

# Truth table: _TRUTH[k, 2a + b] for binary a, b.
_TRUTH = np.array(
    [[(k >> (3 - i)) & 1 for i in range(4)] for k in range(N_GATES)], dtype=np.int64
)

# Gates ordered by logic completeness and gradient flow; a prefix of length k
# is the gate search subspace of size k.
GATE_PRIORITY = (8, 14, 6, 9, 7, 1, 3, 5, 12, 10, 11, 13, 2, 4, 0, 15)


def _check_gate(k: int) -> int:
    k = int(k)
    if not 0 <= k < N_GATES:
        raise ValueError(f"invalid gate id {k}: must be in [0, 15]")
    return k


def soft_logic(k, a, b):
    """Real-valued form of gate ``k`` at ``a, b`` in [0, 1].

    Accepts scalars or same-shape arrays; the result has the broadcast shape.
    """
    k = _check_gate(k)
    c0, ca, cb, cab = _COEFFS[k]
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return c0 + ca * a + cb * b + cab * (a * b)


def soft_logic_all(a, b):
    """Evaluate every gate's soft form at once; result shape ``a.shape + (16,)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = a * b
    return (
        _COEFFS[:, 0]
        + _COEFFS[:, 1] * a[..., None]
        + _COEFFS[:, 2] * b[..., None]
        + _COEFFS[:, 3] * ab[..., None]
    )


def soft_logic_grad(k, a, b):
    """Exact partials (dy/da, dy/db) of gate ``k``'s soft form."""
    k = _check_gate(k)
    _, ca, cb, cab = _COEFFS[k]
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da = ca + cab * b
    db = cb + cab * a
    return da + 0.0 * a, db + 0.0 * b  # broadcast to input shape even for constant gates


def hard_logic(k, a, b):
    """Binary form of gate ``k``; inputs and output are 0/1."""
    k = _check_gate(k)
    a = np.asarray(a)
    b = np.asarray(b)
    if not (np.all((a == 0) | (a == 1)) and np.all((b == 0) | (b == 1))):
        raise ValueError("hard_logic inputs must be binary 0/1")
    idx = (2 * a.astype(np.int64) + b.astype(np.int64))
    out = _TRUTH[k, idx]
    return out if out.ndim else int(out)


def hard_logic_many(gates, a, b):
    """Vectorized binary evaluation: ``gates``, ``a``, ``b`` broadcast together."""
    gates = np.asarray(gates, dtype=np.int64)
    idx = 2 * np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)
    return _TRUTH[gates, idx]


def gate_subspace_mask(k_gates: int) -> frozenset:
    """First ``k_gates`` entries of the priority order, as a set of gate ids."""
    if not 1 <= int(k_gates) <= N_GATES:
        raise ValueError(f"k_gates must be in [1, 16], got {k_gates}")
    return frozenset(GATE_PRIORITY[: int(k_gates)])


def complement_gate(k: int) -> int:
    """Gate whose truth table is the bitwise complement of gate ``k``."""
    return 15 - _check_gate(k)


def gate_coeffs(gates) -> np.ndarray:
    """Multilinear coefficients (c0, ca, cb, cab) for an array of gate ids."""
    return _COEFFS[np.asarray(gates, dtype=np.int64)]


def truth_table(k: int) -> tuple:
    """Gate ``k``'s outputs at inputs 00, 01, 10, 11."""
    return tuple(int(v) for v in _TRUTH[_check_gate(k)])
