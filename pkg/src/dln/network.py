"""Differentiable logic network: architecture, parameters, and forward modes.

A network is a ThresholdLayer binarizing continuous inputs, a stack of
two-input logic-gate layers, and a per-class sum layer.  Three forward modes
exist:

* phase1 — gate choice is a softmax mixture over operators (trainable W);
  thresholds are soft sigmoids (trainable b, s); links and sum wires are
  quantized hard.
* phase2 — links and sum wires are softmax/sigmoid relaxed (trainable U, V,
  S); gate choice and thresholds are quantized hard.
* inference — everything quantized; logic evaluates on pure 0/1 values.

Straight-through estimation can harden each relaxed piece independently: the
forward value is the quantized one while gradients follow the soft surrogate.
Search subspaces are carved by masking logits to a most-negative-float
sentinel; masked entries get exactly zero softmax weight, are never selected
by argmax, and receive exactly zero gradient.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import binner, logic

MODEL_FORMAT = "dln-model"
MODEL_FORMAT_VERSION = 1

# Sentinel for switched-off logits: most negative finite double.  Softmax over
# a row containing it underflows to exactly zero weight without NaNs.
NEG = -np.finfo(np.float64).max


class ConfigError(ValueError):
    """Invalid architecture or configuration."""


class PhaseMode(enum.Enum):
    PHASE1 = "phase1"
    PHASE2 = "phase2"
    INFERENCE = "inference"


CONCAT_NONE = "none"
CONCAT_SHARED = "shared"
CONCAT_PER_LAYER = "per_layer"


@dataclass(frozen=True)
class STEFlags:
    threshold: bool = True
    gate: bool = True
    link: bool = True
    sum: bool = True

    def to_json(self):
        return {"threshold": self.threshold, "gate": self.gate, "link": self.link, "sum": self.sum}

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture hyperparameters; dimensions come from the dataset."""

    layer_widths: tuple[int, ...] = (16,)
    neurons_per_feature: int = 6
    gate_subspace_size: int = 8
    link_subspace_size: int = 8
    concat_mode: str = CONCAT_PER_LAYER
    ste: STEFlags = field(default_factory=STEFlags)
    threshold_trainable: bool = True
    sum_connect_threshold: float = 0.8
    logit_scale: float | None = None  # None -> sqrt(sum-layer input width)

    def __post_init__(self):
        if len(self.layer_widths) < 1 or any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"layer_widths must be >=1 positive ints, got {self.layer_widths}")
        if self.neurons_per_feature < 1:
            raise ConfigError("neurons_per_feature must be >= 1")
        if not 1 <= self.gate_subspace_size <= logic.N_GATES:
            raise ConfigError("gate_subspace_size must be in [1, 16]")
        if self.link_subspace_size < 1:
            raise ConfigError("link_subspace_size must be >= 1")
        if self.concat_mode not in (CONCAT_NONE, CONCAT_SHARED, CONCAT_PER_LAYER):
            raise ConfigError(f"unknown concat_mode {self.concat_mode!r}")
        if not 0.0 < self.sum_connect_threshold < 1.0:
            raise ConfigError("sum_connect_threshold must be in (0, 1)")
        if self.logit_scale is not None and self.logit_scale <= 0:
            raise ConfigError("logit_scale must be positive")

    def to_json(self):
        return {
            "layer_widths": list(self.layer_widths),
            "neurons_per_feature": self.neurons_per_feature,
            "gate_subspace_size": self.gate_subspace_size,
            "link_subspace_size": self.link_subspace_size,
            "concat_mode": self.concat_mode,
            "ste": self.ste.to_json(),
            "threshold_trainable": self.threshold_trainable,
            "sum_connect_threshold": self.sum_connect_threshold,
            "logit_scale": self.logit_scale,
        }

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        doc["layer_widths"] = tuple(doc["layer_widths"])
        doc["ste"] = STEFlags.from_json(doc["ste"])
        return cls(**doc)


@dataclass
class ThresholdParams:
    bias: np.ndarray  # [m]
    slope: np.ndarray  # [m]
    source_feature: np.ndarray  # [m] int, index into continuous features

    @property
    def size(self) -> int:
        return len(self.bias)


@dataclass
class LogicParams:
    W: np.ndarray  # [out, 16] gate logits
    U: np.ndarray  # [out, in] link-a logits
    V: np.ndarray  # [out, in] link-b logits
    gate_allowed: np.ndarray  # [16] bool
    a_allowed: np.ndarray  # [out, in] bool
    b_allowed: np.ndarray  # [out, in] bool

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.U.shape[1]


@dataclass
class SumParams:
    S: np.ndarray  # [in, n_classes] connection logits
    theta: float  # wire kept when sigmoid(S) >= theta
    logit_scale: float


@dataclass
class NetworkParams:
    thresholds: list  # list[ThresholdParams]; [0] feeds the first logic layer
    logic: list  # list[LogicParams]
    sum: SumParams
    n_continuous: int
    n_onehot: int
    n_classes: int


def concat_block_index(spec: NetworkSpec, params_or_ncont, layer: int) -> int | None:
    """Which threshold block (if any) is concatenated to logic layer ``layer``'s input.

    Layer 0 consumes the main block directly; later layers get a copy of the
    threshold output appended when concatenation is enabled.
    """
    n_cont = params_or_ncont.n_continuous if hasattr(params_or_ncont, "n_continuous") else params_or_ncont
    if layer == 0 or spec.concat_mode == CONCAT_NONE or n_cont == 0:
        return None
    return 0 if spec.concat_mode == CONCAT_SHARED else layer


def _layer_in_dims(spec: NetworkSpec, n_cont: int, n_onehot: int) -> list[int]:
    n_thresh = n_cont * spec.neurons_per_feature
    dims = [n_thresh + n_onehot]
    for layer in range(1, len(spec.layer_widths)):
        extra = n_thresh if concat_block_index(spec, n_cont, layer) is not None else 0
        dims.append(spec.layer_widths[layer - 1] + extra)
    return dims


def initialize_params(spec: NetworkSpec, dataset, seed: int) -> NetworkParams:
    """Build trainable tensors: tree-initialized thresholds, slope 2, gaussian logits.

    Gate subspaces keep the first ``gate_subspace_size`` operators of the
    priority order; link subspaces draw ``link_subspace_size`` candidate input
    indices per neuron and slot, once, from the seeded generator.
    """
    rng = np.random.default_rng(seed)
    n_cont = dataset.n_continuous
    n_onehot = dataset.n_onehot
    n_classes = dataset.n_classes
    if n_cont * spec.neurons_per_feature + n_onehot < 1:
        raise ConfigError("network needs at least one input bit")
    if n_classes < 2:
        raise ConfigError("need at least two classes")

    edges_per_feature = []
    for f in range(n_cont):
        edges = binner.fit_tree_bins(
            dataset.continuous[:, f], dataset.labels, max_leaves=spec.neurons_per_feature + 1
        )
        edges_per_feature.append(
            binner.pad_edges(edges, dataset.continuous[:, f], spec.neurons_per_feature)
        )

    def make_threshold_block() -> ThresholdParams:
        bias = np.concatenate(edges_per_feature) if n_cont else np.zeros(0)
        source = np.repeat(np.arange(n_cont), spec.neurons_per_feature)
        return ThresholdParams(
            bias=bias.astype(float).copy(),
            slope=np.full(bias.shape, 2.0),
            source_feature=source.astype(np.int64),
        )

    n_blocks = 1
    if spec.concat_mode == CONCAT_PER_LAYER and n_cont > 0:
        n_blocks += max(len(spec.layer_widths) - 1, 0)
    thresholds = [make_threshold_block() for _ in range(n_blocks)]

    gate_allowed = np.zeros(logic.N_GATES, dtype=bool)
    for g in logic.GATE_PRIORITY[: spec.gate_subspace_size]:
        gate_allowed[g] = True

    layers = []
    for width, in_dim in zip(spec.layer_widths, _layer_in_dims(spec, n_cont, n_onehot)):
        k_links = min(spec.link_subspace_size, in_dim)
        a_allowed = np.zeros((width, in_dim), dtype=bool)
        b_allowed = np.zeros((width, in_dim), dtype=bool)
        for o in range(width):
            a_allowed[o, rng.choice(in_dim, size=k_links, replace=False)] = True
            b_allowed[o, rng.choice(in_dim, size=k_links, replace=False)] = True
        W = np.where(gate_allowed, rng.normal(0.0, 0.1, size=(width, logic.N_GATES)), NEG)
        U = np.where(a_allowed, rng.normal(0.0, 0.1, size=(width, in_dim)), NEG)
        V = np.where(b_allowed, rng.normal(0.0, 0.1, size=(width, in_dim)), NEG)
        layers.append(
            LogicParams(W=W, U=U, V=V, gate_allowed=gate_allowed.copy(),
                        a_allowed=a_allowed, b_allowed=b_allowed)
        )

    sum_in = spec.layer_widths[-1]
    tau = spec.logit_scale if spec.logit_scale is not None else float(np.sqrt(sum_in))
    S = rng.normal(0.0, 0.1, size=(sum_in, n_classes))
    params = NetworkParams(
        thresholds=thresholds,
        logic=layers,
        sum=SumParams(S=S, theta=spec.sum_connect_threshold, logit_scale=tau),
        n_continuous=n_cont,
        n_onehot=n_onehot,
        n_classes=n_classes,
    )
    return params


def _heaviside(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, 0.0)


def masked_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row softmax with exactly zero weight on disallowed entries."""
    shifted = np.where(allowed, logits, -np.inf)
    mx = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - mx)
    return e / e.sum(axis=-1, keepdims=True)


def masked_argmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row argmax over allowed entries; ties resolve to the smallest index."""
    return np.argmax(np.where(allowed, logits, -np.inf), axis=-1)


def threshold_forward(tp: ThresholdParams, x, mode: PhaseMode, ste: bool = True,
                      trainable: bool = True):
    """Binarize continuous features: sigmoid(s(x-b)) while live, Heaviside otherwise.

    ``x`` holds the continuous feature columns; rows are samples.  Heaviside
    takes the value 1 at exactly zero.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    z = tp.slope * (X[:, tp.source_feature] - tp.bias)
    live = mode == PhaseMode.PHASE1 and trainable
    if live:
        out = _heaviside(z) if ste else expit(z)
    else:
        out = _heaviside(z)
    return out[0] if single else out


def logic_forward_phase1(lp: LogicParams, x, ste: bool = True):
    """Gate-mixture forward: links quantized, softmax over allowed operators."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    a_idx = masked_argmax(lp.U, lp.a_allowed)
    b_idx = masked_argmax(lp.V, lp.b_allowed)
    P = masked_softmax(lp.W, lp.gate_allowed[None, :])
    XA, XB = X[:, a_idx], X[:, b_idx]
    F = logic.soft_logic_all(XA, XB)  # [B, O, 16]
    mix = np.einsum("bok,ok->bo", F, P)
    if ste:
        k_star = masked_argmax(lp.W, lp.gate_allowed[None, :])
        out = F[:, np.arange(lp.out_dim), k_star]
    else:
        out = mix
    return out[0] if single else out


def logic_forward_phase2(lp: LogicParams, x, ste: bool = True):
    """Link-mixture forward: gates quantized, softmax-weighted input blends."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    k_star = masked_argmax(lp.W, lp.gate_allowed[None, :])
    PU = masked_softmax(lp.U, lp.a_allowed)
    PV = masked_softmax(lp.V, lp.b_allowed)
    if ste:
        a_val = X[:, masked_argmax(lp.U, lp.a_allowed)]
        b_val = X[:, masked_argmax(lp.V, lp.b_allowed)]
    else:
        a_val = X @ PU.T
        b_val = X @ PV.T
    c = logic.gate_coeffs(k_star)  # [O, 4]
    out = c[:, 0] + c[:, 1] * a_val + c[:, 2] * b_val + c[:, 3] * (a_val * b_val)
    return out[0] if single else out


def logic_forward_inference(lp: LogicParams, x):
    """Pure boolean evaluation of the quantized layer."""
    x = np.asarray(x)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    k_star = masked_argmax(lp.W, lp.gate_allowed[None, :])
    a_idx = masked_argmax(lp.U, lp.a_allowed)
    b_idx = masked_argmax(lp.V, lp.b_allowed)
    bits = logic.hard_logic_many(
        k_star[None, :], X[:, a_idx].astype(np.int64), X[:, b_idx].astype(np.int64)
    ).astype(float)
    return bits[0] if single else bits


def sum_forward(sp: SumParams, x, mode: PhaseMode, ste: bool = True):
    """Per-class aggregation, scaled by 1/logit_scale.

    Phase2 uses sigmoid connection weights (hardened forward under STE);
    phase1/inference use binary wires sigmoid(S) >= theta.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    hard_w = (expit(sp.S) >= sp.theta).astype(float)
    if mode == PhaseMode.PHASE2:
        out = X @ (hard_w if ste else expit(sp.S))
    else:
        out = X @ hard_w
    out = out / sp.logit_scale
    return out[0] if single else out


def _compose_input(spec, params, layer, prev, thresh_values):
    if layer == 0:
        return np.concatenate([thresh_values[0], np.atleast_2d(prev)], axis=1)
    block = concat_block_index(spec, params, layer)
    if block is None:
        return prev
    return np.concatenate([prev, thresh_values[block]], axis=1)


def forward(spec: NetworkSpec, params: NetworkParams, x_cont, x_onehot, mode: PhaseMode):
    """Full-network forward pass; returns class logits ``[batch, n_classes]``."""
    Xc = np.atleast_2d(np.asarray(x_cont, dtype=float))
    Xh = np.atleast_2d(np.asarray(x_onehot, dtype=float))
    single = np.asarray(x_cont).ndim == 1 and np.asarray(x_onehot).ndim == 1
    ste = spec.ste
    thresh_values = [
        threshold_forward(tp, Xc, mode, ste=ste.threshold, trainable=spec.threshold_trainable)
        for tp in params.thresholds
    ]
    value = Xh
    for layer, lp in enumerate(params.logic):
        value = _compose_input(spec, params, layer, value, thresh_values)
        if mode == PhaseMode.PHASE1:
            value = logic_forward_phase1(lp, value, ste=ste.gate)
        elif mode == PhaseMode.PHASE2:
            value = logic_forward_phase2(lp, value, ste=ste.link)
        else:
            value = logic_forward_inference(lp, value)
    logits = sum_forward(params.sum, value, mode, ste=ste.sum)
    return logits[0] if single else logits


def predict(spec, params, x_cont, x_onehot, mode: PhaseMode):
    """Class index with the highest logit; ties go to the smallest index."""
    logits = forward(spec, params, x_cont, x_onehot, mode)
    return np.argmax(np.atleast_2d(logits), axis=1)


def quantize_params(spec: NetworkSpec, params: NetworkParams) -> NetworkParams:
    """Harden every relaxed mixture in parameter space.

    Argmax logits keep a finite value, all other entries drop to the sentinel,
    so softmaxes become exactly one-hot; sum logits saturate so sigmoid(S) is
    exactly 0 or 1.  With STE flags on, every forward mode then produces
    identical predictions.
    """

    def harden_rows(M, allowed):
        out = np.full_like(M, NEG)
        idx = masked_argmax(M, allowed)
        out[np.arange(M.shape[0]), idx] = 0.0
        return out

    logic_q = [
        replace(
            lp,
            W=harden_rows(lp.W, lp.gate_allowed[None, :]),
            U=harden_rows(lp.U, lp.a_allowed),
            V=harden_rows(lp.V, lp.b_allowed),
        )
        for lp in params.logic
    ]
    wired = expit(params.sum.S) >= params.sum.theta
    S_q = np.where(wired, 50.0, NEG)
    return replace(
        params,
        thresholds=[
            ThresholdParams(tp.bias.copy(), tp.slope.copy(), tp.source_feature.copy())
            for tp in params.thresholds
        ],
        logic=logic_q,
        sum=replace(params.sum, S=S_q),
    )


def copy_params(params: NetworkParams) -> NetworkParams:
    return NetworkParams(
        thresholds=[
            ThresholdParams(tp.bias.copy(), tp.slope.copy(), tp.source_feature.copy())
            for tp in params.thresholds
        ],
        logic=[
            LogicParams(
                W=lp.W.copy(), U=lp.U.copy(), V=lp.V.copy(),
                gate_allowed=lp.gate_allowed.copy(),
                a_allowed=lp.a_allowed.copy(), b_allowed=lp.b_allowed.copy(),
            )
            for lp in params.logic
        ],
        sum=SumParams(S=params.sum.S.copy(), theta=params.sum.theta,
                      logit_scale=params.sum.logit_scale),
        n_continuous=params.n_continuous,
        n_onehot=params.n_onehot,
        n_classes=params.n_classes,
    )


def model_to_json(spec: NetworkSpec, params: NetworkParams, preprocess: dict | None = None,
                  manifest_hash: str | None = None) -> dict:
    """Versioned, decimal-exact JSON document for the whole model."""
    return {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "manifest_hash": manifest_hash,
        "spec": spec.to_json(),
        "dims": {
            "n_continuous": params.n_continuous,
            "n_onehot": params.n_onehot,
            "n_classes": params.n_classes,
        },
        "params": {
            "thresholds": [
                {
                    "bias": tp.bias.tolist(),
                    "slope": tp.slope.tolist(),
                    "source_feature": tp.source_feature.tolist(),
                }
                for tp in params.thresholds
            ],
            "logic": [
                {
                    "W": lp.W.tolist(),
                    "U": lp.U.tolist(),
                    "V": lp.V.tolist(),
                    "gate_allowed": lp.gate_allowed.astype(int).tolist(),
                    "a_allowed": lp.a_allowed.astype(int).tolist(),
                    "b_allowed": lp.b_allowed.astype(int).tolist(),
                }
                for lp in params.logic
            ],
            "sum": {
                "S": params.sum.S.tolist(),
                "theta": params.sum.theta,
                "logit_scale": params.sum.logit_scale,
            },
        },
        "preprocess": preprocess,
    }


def model_from_json(doc: dict):
    """Inverse of :func:`model_to_json`; returns (spec, params, preprocess)."""
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError(f"not a {MODEL_FORMAT} document")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format version {doc.get('format_version')}")
    spec = NetworkSpec.from_json(doc["spec"])
    p = doc["params"]
    thresholds = [
        ThresholdParams(
            bias=np.asarray(t["bias"], dtype=float),
            slope=np.asarray(t["slope"], dtype=float),
            source_feature=np.asarray(t["source_feature"], dtype=np.int64),
        )
        for t in p["thresholds"]
    ]
    layers = [
        LogicParams(
            W=np.asarray(l["W"], dtype=float),
            U=np.asarray(l["U"], dtype=float),
            V=np.asarray(l["V"], dtype=float),
            gate_allowed=np.asarray(l["gate_allowed"], dtype=bool),
            a_allowed=np.asarray(l["a_allowed"], dtype=bool),
            b_allowed=np.asarray(l["b_allowed"], dtype=bool),
        )
        for l in p["logic"]
    ]
    params = NetworkParams(
        thresholds=thresholds,
        logic=layers,
        sum=SumParams(
            S=np.asarray(p["sum"]["S"], dtype=float),
            theta=float(p["sum"]["theta"]),
            logit_scale=float(p["sum"]["logit_scale"]),
        ),
        n_continuous=int(doc["dims"]["n_continuous"]),
        n_onehot=int(doc["dims"]["n_onehot"]),
        n_classes=int(doc["dims"]["n_classes"]),
    )
    return spec, params, doc.get("preprocess")


def dump_model(path, spec, params, preprocess=None, manifest_hash=None) -> None:
    doc = model_to_json(spec, params, preprocess=preprocess, manifest_hash=manifest_hash)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
