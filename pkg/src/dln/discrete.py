"""Quantized boolean circuits: bit-level inference and operation counting.

Quantization collapses every relaxed choice: row-argmax picks each neuron's
gate and two input wires (ties to the smallest index), sum wires keep
connections with sigmoid(S) >= theta, and each threshold neuron reduces to
(feature, bias, slope sign) since Heaviside only sees the sign.  Evaluation
is pure integer/bit arithmetic; class scores are wire counts.

Cost accounting follows a ripple-carry pricing: an n-bit addition or
comparison costs 5 + 9*(n-1) two-input gate equivalents (half-adder plus
n-1 full adders); logic neurons cost 1 for AND/OR/NAND/NOR and the implies
family, 3 for XOR/XNOR, and 0 for pass-throughs, inverters, and constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import logic
from .network import (
    CONCAT_NONE,
    CONCAT_SHARED,
    NetworkParams,
    NetworkSpec,
    concat_block_index,
    masked_argmax,
)

CIRCUIT_FORMAT = "dln-circuit"
CIRCUIT_FORMAT_VERSION = 1

# Two-input-gate cost of each operator when realized in hardware.
GATE_COSTS = np.array([0, 1, 1, 0, 1, 0, 3, 1, 1, 3, 0, 1, 0, 1, 1, 0], dtype=np.int64)


@dataclass
class ThresholdBlock:
    feature: np.ndarray  # [m] int
    bias: np.ndarray  # [m] float
    sign: np.ndarray  # [m] int, +1 or -1

    @property
    def size(self) -> int:
        return len(self.feature)


@dataclass
class LayerCircuit:
    gate: np.ndarray  # [o] int gate ids
    a: np.ndarray  # [o] int input index
    b: np.ndarray  # [o] int input index


@dataclass
class DiscreteNetwork:
    """Fully quantized network: gates, wires, and fixed thresholds only."""

    n_continuous: int
    n_onehot: int
    n_classes: int
    concat_mode: str
    threshold_blocks: list  # list[ThresholdBlock]
    layers: list  # list[LayerCircuit]
    wiring: np.ndarray  # [last_width, n_classes] 0/1
    layer_concat: list = field(default_factory=list)  # per layer: block idx or None

    @property
    def input_bits(self) -> int:
        return self.threshold_blocks[0].size + self.n_onehot


def quantize(spec: NetworkSpec, params: NetworkParams) -> DiscreteNetwork:
    """Collapse trained parameters into a pure boolean circuit."""
    blocks = []
    for tp in params.thresholds:
        sign = np.where(tp.slope >= 0, 1, -1).astype(np.int64)
        bias = tp.bias.astype(float).copy()
        # Zero slope makes Heaviside(0*(x-b)) identically 1; encode as an
        # always-true comparison on the clamped [0, 1] domain.
        zero = tp.slope == 0
        bias[zero] = -1.0
        blocks.append(ThresholdBlock(tp.source_feature.copy(), bias, sign))
    layers = []
    for lp in params.logic:
        layers.append(
            LayerCircuit(
                gate=masked_argmax(lp.W, lp.gate_allowed[None, :]).astype(np.int64),
                a=masked_argmax(lp.U, lp.a_allowed).astype(np.int64),
                b=masked_argmax(lp.V, lp.b_allowed).astype(np.int64),
            )
        )
    wiring = (expit(params.sum.S) >= params.sum.theta).astype(np.int64)
    layer_concat = [concat_block_index(spec, params, l) for l in range(len(params.logic))]
    return DiscreteNetwork(
        n_continuous=params.n_continuous,
        n_onehot=params.n_onehot,
        n_classes=params.n_classes,
        concat_mode=spec.concat_mode,
        threshold_blocks=blocks,
        layers=layers,
        wiring=wiring,
        layer_concat=layer_concat,
    )


def evaluate(net: DiscreteNetwork, x_cont, x_onehot):
    """Boolean inference: (predicted labels, integer class scores).

    Accepts a single sample (1-D) or a batch; prediction ties go to the
    smallest class index.
    """
    xc = np.asarray(x_cont, dtype=float)
    xh = np.asarray(x_onehot)
    single = xc.ndim == 1 and xh.ndim == 1
    Xc = np.atleast_2d(xc)
    Xh = np.atleast_2d(xh).astype(np.int64)
    block_bits = [
        (blk.sign * (Xc[:, blk.feature] - blk.bias) >= 0).astype(np.int64)
        for blk in net.threshold_blocks
    ]
    value = np.concatenate([block_bits[0], Xh], axis=1)
    for layer, circ in enumerate(net.layers):
        if layer > 0:
            block = net.layer_concat[layer]
            if block is not None:
                value = np.concatenate([value, block_bits[block]], axis=1)
        value = logic.hard_logic_many(circ.gate[None, :], value[:, circ.a], value[:, circ.b])
    scores = value @ net.wiring
    pred = np.argmax(scores, axis=1)
    if single:
        return int(pred[0]), scores[0]
    return pred, scores


@dataclass
class OpCount:
    high_level: dict
    gate_level: int

    def to_json(self) -> dict:
        return {"high_level": dict(self.high_level), "gate_level": int(self.gate_level)}


def adder_gate_cost(bit_width: int) -> int:
    """NAND count of an n-bit ripple-carry addition: 5 + 9*(n-1)."""
    if bit_width < 1:
        raise ValueError(f"bit_width must be >= 1, got {bit_width}")
    return 5 + 9 * (bit_width - 1)


def count_ops(net: DiscreteNetwork, bit_width: int = 16) -> OpCount:
    """High-level and 2-input-gate operation counts for one inference.

    Comparisons (threshold and argmax) are priced like an n-bit subtraction,
    i.e. the same 5 + 9*(n-1) formula as addition; each sum wire contributes
    one accumulating addition.
    """
    word = adder_gate_cost(bit_width)
    comparisons = sum(blk.size for blk in net.threshold_blocks)
    logic_ops = sum(len(c.gate) for c in net.layers)
    additions = int(net.wiring.sum())
    argmax_comparisons = max(net.n_classes - 1, 0)
    gate_level = (comparisons + additions + argmax_comparisons) * word
    gate_level += int(sum(GATE_COSTS[c.gate].sum() for c in net.layers))
    return OpCount(
        high_level={
            "comparisons": int(comparisons),
            "logic_ops": int(logic_ops),
            "additions": int(additions),
            "argmax_comparisons": int(argmax_comparisons),
        },
        gate_level=int(gate_level),
    )


def circuit_to_json(net: DiscreteNetwork, preprocess: dict | None = None,
                    manifest_hash: str | None = None) -> dict:
    return {
        "format": CIRCUIT_FORMAT,
        "format_version": CIRCUIT_FORMAT_VERSION,
        "manifest_hash": manifest_hash,
        "dims": {
            "n_continuous": net.n_continuous,
            "n_onehot": net.n_onehot,
            "n_classes": net.n_classes,
        },
        "concat_mode": net.concat_mode,
        "layer_concat": [None if b is None else int(b) for b in net.layer_concat],
        "threshold_blocks": [
            {
                "feature": blk.feature.tolist(),
                "bias": blk.bias.tolist(),
                "sign": blk.sign.tolist(),
            }
            for blk in net.threshold_blocks
        ],
        "layers": [
            {"gate": c.gate.tolist(), "a": c.a.tolist(), "b": c.b.tolist()}
            for c in net.layers
        ],
        "wiring": net.wiring.tolist(),
        "preprocess": preprocess,
    }


def circuit_from_json(doc: dict):
    if doc.get("format") != CIRCUIT_FORMAT:
        raise ValueError(f"not a {CIRCUIT_FORMAT} document")
    if doc.get("format_version") != CIRCUIT_FORMAT_VERSION:
        raise ValueError(f"unsupported circuit format version {doc.get('format_version')}")
    net = DiscreteNetwork(
        n_continuous=int(doc["dims"]["n_continuous"]),
        n_onehot=int(doc["dims"]["n_onehot"]),
        n_classes=int(doc["dims"]["n_classes"]),
        concat_mode=doc["concat_mode"],
        threshold_blocks=[
            ThresholdBlock(
                feature=np.asarray(b["feature"], dtype=np.int64),
                bias=np.asarray(b["bias"], dtype=float),
                sign=np.asarray(b["sign"], dtype=np.int64),
            )
            for b in doc["threshold_blocks"]
        ],
        layers=[
            LayerCircuit(
                gate=np.asarray(l["gate"], dtype=np.int64),
                a=np.asarray(l["a"], dtype=np.int64),
                b=np.asarray(l["b"], dtype=np.int64),
            )
            for l in doc["layers"]
        ],
        wiring=np.asarray(doc["wiring"], dtype=np.int64),
        layer_concat=[None if b is None else int(b) for b in doc["layer_concat"]],
    )
    return net, doc.get("preprocess")


def dump_circuit(path, net, preprocess=None, manifest_hash=None) -> None:
    doc = circuit_to_json(net, preprocess=preprocess, manifest_hash=manifest_hash)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_circuit(path):
    with open(path, "r", encoding="utf-8") as fh:
        return circuit_from_json(json.load(fh))
