"""Two-phase training with hand-written analytic reverse-mode gradients.

The forward graph is fixed (threshold -> logic stack -> sum -> cross-entropy),
so backpropagation is coded per layer instead of through a generic autodiff
engine.  Straight-through estimation follows detach semantics: every cached
value is the one actually produced forward (possibly hardened), and every
local derivative is the soft surrogate's formula evaluated at those values.

Training alternates phase1 (neuron functions: b, s, W) and phase2 (wiring:
U, V, S) for a configured number of iterations; the optimizer is an
adaptive-moment method with bias correction, stepping only the live phase's
tensors so the frozen phase stays bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import expit, logsumexp, softmax

from . import logic as gates
from .data import FoldPlan, balanced_accuracy, fold_split, make_folds
from .network import (
    NEG,
    ConfigError,
    NetworkParams,
    NetworkSpec,
    PhaseMode,
    STEFlags,
    concat_block_index,
    copy_params,
    initialize_params,
    masked_argmax,
    masked_softmax,
    predict,
)


class TrainingDivergedError(RuntimeError):
    """Loss or logits became non-finite; carries the last finite state."""

    def __init__(self, message, batch_index=None, epoch=None, last_params=None, history=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch
        self.last_params = last_params
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5
    epochs_per_phase: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    class_weighting: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.epochs_per_phase < 0:
            raise ConfigError("epochs_per_phase must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")

    def to_json(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


def class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights: n / (C * count_c); absent classes weigh 0."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    weights = np.zeros(n_classes)
    nz = counts > 0
    weights[nz] = len(labels) / (n_classes * counts[nz])
    return weights


def cross_entropy_loss(logits, truth: int, class_weight: float = 1.0) -> float:
    """Weighted negative log-likelihood with max-subtraction stabilization."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise TrainingDivergedError("non-finite logits in loss")
    return float(class_weight * (logsumexp(logits) - logits[int(truth)]))


def _loss_and_dlogits(logits, y, weights):
    if not np.all(np.isfinite(logits)):
        bad = int(np.flatnonzero(~np.isfinite(logits).all(axis=1))[0])
        raise TrainingDivergedError("non-finite logits in batch", batch_index=bad)
    B = logits.shape[0]
    w = np.ones(B) if weights is None else weights[y]
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(w * (lse - logits[np.arange(B), y])))
    d = softmax(logits, axis=1)
    d[np.arange(B), y] -= 1.0
    return loss, d * (w / B)[:, None]


def _forward_cached(spec, params, Xc, Xh, mode):
    """Forward pass retaining everything the analytic backward needs."""
    ste = spec.ste
    thr_live = mode == PhaseMode.PHASE1 and spec.threshold_trainable
    thr_caches = []
    for tp in params.thresholds:
        Xf = Xc[:, tp.source_feature]
        z = tp.slope * (Xf - tp.bias)
        hard = np.where(z >= 0.0, 1.0, 0.0)
        if thr_live:
            sig = expit(z)
            val = hard if ste.threshold else sig
        else:
            sig = None
            val = hard
        thr_caches.append({"Xf": Xf, "sig": sig, "val": val})

    layer_caches = []
    value = Xh
    for layer, lp in enumerate(params.logic):
        if layer == 0:
            X = np.concatenate([thr_caches[0]["val"], value], axis=1)
            block = 0
            prev_width = None
        else:
            block = concat_block_index(spec, params, layer)
            prev_width = value.shape[1]
            X = value if block is None else np.concatenate(
                [value, thr_caches[block]["val"]], axis=1
            )
        cache = {"X": X, "block": block, "prev_width": prev_width}
        if mode == PhaseMode.PHASE1:
            a_idx = masked_argmax(lp.U, lp.a_allowed)
            b_idx = masked_argmax(lp.V, lp.b_allowed)
            P = masked_softmax(lp.W, lp.gate_allowed[None, :])
            XA, XB = X[:, a_idx], X[:, b_idx]
            F = gates.soft_logic_all(XA, XB)
            mix = np.einsum("bok,ok->bo", F, P)
            if ste.gate:
                k_star = masked_argmax(lp.W, lp.gate_allowed[None, :])
                out = F[:, np.arange(lp.out_dim), k_star]
            else:
                out = mix
            cache.update(a_idx=a_idx, b_idx=b_idx, P=P, XA=XA, XB=XB, F=F, mix=mix)
        else:  # PHASE2
            k_star = masked_argmax(lp.W, lp.gate_allowed[None, :])
            PU = masked_softmax(lp.U, lp.a_allowed)
            PV = masked_softmax(lp.V, lp.b_allowed)
            a_mix = X @ PU.T
            b_mix = X @ PV.T
            if ste.link:
                a_val = X[:, masked_argmax(lp.U, lp.a_allowed)]
                b_val = X[:, masked_argmax(lp.V, lp.b_allowed)]
            else:
                a_val, b_val = a_mix, b_mix
            c = gates.gate_coeffs(k_star)
            out = c[:, 0] + c[:, 1] * a_val + c[:, 2] * b_val + c[:, 3] * (a_val * b_val)
            cache.update(PU=PU, PV=PV, a_mix=a_mix, b_mix=b_mix,
                         a_val=a_val, b_val=b_val, coeffs=c)
        cache["out"] = out
        layer_caches.append(cache)
        value = out

    sp = params.sum
    sig_S = expit(sp.S)
    hard_w = (sig_S >= sp.theta).astype(float)
    if mode == PhaseMode.PHASE2:
        scores = value @ (hard_w if ste.sum else sig_S)
    else:
        scores = value @ hard_w
    logits = scores / sp.logit_scale
    sum_cache = {"X": value, "sig_S": sig_S, "hard_w": hard_w}
    return logits, thr_caches, layer_caches, sum_cache


def _zero_tape(params) -> dict:
    return {
        "thresholds": [
            {"bias": np.zeros_like(tp.bias), "slope": np.zeros_like(tp.slope)}
            for tp in params.thresholds
        ],
        "logic": [
            {"W": np.zeros_like(lp.W), "U": np.zeros_like(lp.U), "V": np.zeros_like(lp.V)}
            for lp in params.logic
        ],
        "sum": {"S": np.zeros_like(params.sum.S)},
    }


def backward(spec, params, batch, mode: PhaseMode, class_weight=None):
    """Mean-batch loss and exact gradients for the phase's live parameters.

    ``batch`` is (x_cont, x_onehot, labels).  Gradients of the frozen phase's
    tensors and of masked logits are identically zero.
    """
    if mode not in (PhaseMode.PHASE1, PhaseMode.PHASE2):
        raise ConfigError("backward runs only in a training phase")
    Xc, Xh, y = batch
    Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
    Xh = np.atleast_2d(np.asarray(Xh, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    logits, thr_caches, layer_caches, sum_cache = _forward_cached(spec, params, Xc, Xh, mode)
    loss, dlogits = _loss_and_dlogits(logits, y, class_weight)
    tape = _zero_tape(params)

    sp = params.sum
    dY = dlogits / sp.logit_scale
    if mode == PhaseMode.PHASE2:
        sig_S = sum_cache["sig_S"]
        tape["sum"]["S"] = (sum_cache["X"].T @ dY) * sig_S * (1.0 - sig_S)
        dX = dY @ sig_S.T
    else:
        dX = dY @ sum_cache["hard_w"].T

    thr_grads_in = [None] * len(params.thresholds)

    def add_thr(block, grad):
        if thr_grads_in[block] is None:
            thr_grads_in[block] = grad.copy()
        else:
            thr_grads_in[block] += grad

    for layer in range(len(params.logic) - 1, -1, -1):
        lp = params.logic[layer]
        cache = layer_caches[layer]
        dOut = dX
        X = cache["X"]
        if mode == PhaseMode.PHASE1:
            P, F, mix = cache["P"], cache["F"], cache["mix"]
            tape["logic"][layer]["W"] = P * (
                np.einsum("bo,bok->ok", dOut, F) - (dOut * mix).sum(axis=0)[:, None]
            )
            coef = gates.gate_coeffs(np.arange(gates.N_GATES))
            pa = P @ coef[:, 1]
            pb = P @ coef[:, 2]
            pab = P @ coef[:, 3]
            dXA = dOut * (pa + pab * cache["XB"])
            dXB = dOut * (pb + pab * cache["XA"])
            dXfull = np.zeros_like(X)
            np.add.at(dXfull.T, cache["a_idx"], dXA.T)
            np.add.at(dXfull.T, cache["b_idx"], dXB.T)
        else:
            c = cache["coeffs"]
            dA = dOut * (c[:, 1] + c[:, 3] * cache["b_val"])
            dB = dOut * (c[:, 2] + c[:, 3] * cache["a_val"])
            PU, PV = cache["PU"], cache["PV"]
            tape["logic"][layer]["U"] = PU * (dA.T @ X - (dA * cache["a_mix"]).sum(axis=0)[:, None])
            tape["logic"][layer]["V"] = PV * (dB.T @ X - (dB * cache["b_mix"]).sum(axis=0)[:, None])
            dXfull = dA @ PU + dB @ PV
        if layer == 0:
            n_thr = params.thresholds[0].size
            add_thr(0, dXfull[:, :n_thr])
            dX = None  # network inputs: gradient not propagated further
        else:
            pw = cache["prev_width"]
            dX = dXfull[:, :pw]
            if cache["block"] is not None:
                add_thr(cache["block"], dXfull[:, pw:])

    if mode == PhaseMode.PHASE1 and spec.threshold_trainable:
        for b_idx, (tp, tc) in enumerate(zip(params.thresholds, thr_caches)):
            grad_in = thr_grads_in[b_idx]
            if grad_in is None or tp.size == 0:
                continue
            sig = tc["sig"]
            g = grad_in * sig * (1.0 - sig)
            tape["thresholds"][b_idx]["slope"] = (g * (tc["Xf"] - tp.bias)).sum(axis=0)
            tape["thresholds"][b_idx]["bias"] = (g * (-tp.slope)).sum(axis=0)

    return loss, tape


def _adam_update(arr, grad, key, state, cfg: TrainConfig):
    st = state.get(key)
    if st is None:
        st = state[key] = {"m": np.zeros_like(arr), "v": np.zeros_like(arr), "t": 0}
    st["t"] += 1
    st["m"] = cfg.beta1 * st["m"] + (1.0 - cfg.beta1) * grad
    st["v"] = cfg.beta2 * st["v"] + (1.0 - cfg.beta2) * grad * grad
    m_hat = st["m"] / (1.0 - cfg.beta1 ** st["t"])
    v_hat = st["v"] / (1.0 - cfg.beta2 ** st["t"])
    arr -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def optimizer_step(params: NetworkParams, tape, config: TrainConfig, state=None,
                   mode: PhaseMode = PhaseMode.PHASE1) -> NetworkParams:
    """Adaptive-moment update of the live phase's tensors, in place.

    Frozen-phase tensors are untouched; masked logits keep their sentinel
    because their gradient (hence moments and update) is exactly zero.
    """
    if state is None:
        state = {}
    if mode == PhaseMode.PHASE1:
        for i, tp in enumerate(params.thresholds):
            _adam_update(tp.bias, tape["thresholds"][i]["bias"], ("thr", i, "b"), state, config)
            _adam_update(tp.slope, tape["thresholds"][i]["slope"], ("thr", i, "s"), state, config)
        for i, lp in enumerate(params.logic):
            _adam_update(lp.W, tape["logic"][i]["W"], ("logic", i, "W"), state, config)
            lp.W[:, ~lp.gate_allowed] = NEG
    else:
        for i, lp in enumerate(params.logic):
            _adam_update(lp.U, tape["logic"][i]["U"], ("logic", i, "U"), state, config)
            _adam_update(lp.V, tape["logic"][i]["V"], ("logic", i, "V"), state, config)
            lp.U[~lp.a_allowed] = NEG
            lp.V[~lp.b_allowed] = NEG
        _adam_update(params.sum.S, tape["sum"]["S"], ("sum", "S"), state, config)
    return params


def _epoch_metrics(spec, params, evalset, mode):
    soft_pred = predict(spec, params, evalset.continuous, evalset.onehot, mode)
    quant_pred = predict(spec, params, evalset.continuous, evalset.onehot, PhaseMode.INFERENCE)
    return (
        balanced_accuracy(soft_pred, evalset.labels),
        balanced_accuracy(quant_pred, evalset.labels),
    )


def train(spec: NetworkSpec, dataset, config: TrainConfig, val_dataset=None,
          params: NetworkParams | None = None, checkpoint_fn=None):
    """Alternate phase1/phase2 for ``iterations`` rounds of ``epochs_per_phase``.

    Returns (params, history); history holds one record per epoch with the
    mean train loss and the relaxed/quantized balanced accuracies on
    ``val_dataset`` (the training set when no validation data is given).
    On divergence raises :class:`TrainingDivergedError` carrying the last
    finite parameters and the history so far.
    """
    if params is None:
        params = initialize_params(spec, dataset, seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    weights = class_weights(dataset.labels, dataset.n_classes) if config.class_weighting else None
    evalset = val_dataset if val_dataset is not None else dataset
    Xc, Xh, y = dataset.continuous, dataset.onehot, dataset.labels
    n = len(y)
    history = []
    opt_state = {}
    last_finite = copy_params(params)
    epoch = 0
    for iteration in range(config.iterations):
        for mode in (PhaseMode.PHASE1, PhaseMode.PHASE2):
            for _ in range(config.epochs_per_phase):
                perm = rng.permutation(n)
                losses = []
                for start in range(0, n, config.batch_size):
                    idx = perm[start : start + config.batch_size]
                    try:
                        loss, tape = backward(
                            spec, params, (Xc[idx], Xh[idx], y[idx]), mode, class_weight=weights
                        )
                    except TrainingDivergedError as err:
                        err.epoch = epoch
                        err.last_params = last_finite
                        err.history = history
                        raise
                    optimizer_step(params, tape, config, opt_state, mode)
                    losses.append(loss)
                soft_acc, quant_acc = _epoch_metrics(spec, params, evalset, mode)
                history.append(
                    {
                        "epoch": epoch,
                        "iteration": iteration,
                        "phase": mode.value,
                        "loss": float(np.mean(losses)) if losses else float("nan"),
                        "soft_accuracy": soft_acc,
                        "quantized_accuracy": quant_acc,
                    }
                )
                epoch += 1
                last_finite = copy_params(params)
        if checkpoint_fn is not None:
            checkpoint_fn(iteration, params)
    return params, history


# ---------------------------------------------------------------------------
# Random hyperparameter search


class SearchError(RuntimeError):
    """Every search trial failed."""


@dataclass
class TrialResult:
    index: int
    seed: int
    overrides: dict
    score: float
    error: str | None = None


@dataclass
class SearchResult:
    best_index: int
    best_score: float
    best_config: TrainConfig
    best_spec: NetworkSpec
    trials: list


def _sample_value(rng, sampler):
    if isinstance(sampler, list):
        return sampler[int(rng.integers(len(sampler)))]
    if isinstance(sampler, dict):
        if "choice" in sampler:
            options = sampler["choice"]
            return options[int(rng.integers(len(options)))]
        if "uniform" in sampler:
            lo, hi = sampler["uniform"]
            return float(rng.uniform(lo, hi))
        if "log_uniform" in sampler:
            lo, hi = sampler["log_uniform"]
            return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        if "int" in sampler:
            lo, hi = sampler["int"]
            return int(rng.integers(lo, hi + 1))
    raise ConfigError(f"unsupported sampler {sampler!r}")


_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}
_SPEC_FIELDS = {f.name for f in fields(NetworkSpec)}


def _apply_overrides(base_config, base_spec, overrides, trial_seed):
    cfg_kw, spec_kw = {}, {}
    for name, value in overrides.items():
        if name == "ste":
            spec_kw["ste"] = STEFlags(bool(value), bool(value), bool(value), bool(value))
        elif name == "layer_widths":
            spec_kw["layer_widths"] = tuple(value)
        elif name in _CONFIG_FIELDS:
            cfg_kw[name] = value
        elif name in _SPEC_FIELDS:
            spec_kw[name] = value
        else:
            raise ConfigError(f"unknown hyperparameter {name!r}")
    config = replace(base_config, seed=trial_seed, **cfg_kw)
    spec = replace(base_spec, **spec_kw)
    return config, spec


def _evaluate_trial(args):
    dataset, spec, config, plan = args
    scores = []
    for fold in range(plan.k):
        tr, te = fold_split(dataset, plan, fold)
        params, _ = train(spec, tr, config)
        pred = predict(spec, params, te.continuous, te.onehot, PhaseMode.INFERENCE)
        scores.append(balanced_accuracy(pred, te.labels))
    return float(np.mean(scores))


def random_search(dataset, space: dict, n_trials: int, folds, seed: int,
                  base_config: TrainConfig | None = None,
                  base_spec: NetworkSpec | None = None,
                  n_workers: int = 1) -> SearchResult:
    """Uniformly sample ``n_trials`` configurations and cross-validate each.

    ``folds`` is a :class:`FoldPlan` or a fold count (built from ``seed``).
    The best trial is the first one attaining the maximal mean quantized
    balanced accuracy; invalid or diverging trials score -inf.  Raises
    :class:`SearchError` if every trial fails.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    base_config = base_config or TrainConfig()
    base_spec = base_spec or NetworkSpec()
    plan = folds if isinstance(folds, FoldPlan) else make_folds(dataset.labels, int(folds), seed)
    rng = np.random.default_rng(seed)

    candidates = []
    for i in range(n_trials):
        trial_seed = int(rng.integers(2**63 - 1))
        overrides = {name: _sample_value(rng, sampler) for name, sampler in space.items()}
        candidates.append((i, trial_seed, overrides))

    prepared = []
    trials = []
    for i, trial_seed, overrides in candidates:
        try:
            config, spec = _apply_overrides(base_config, base_spec, overrides, trial_seed)
            prepared.append((i, trial_seed, overrides, (dataset, spec, config, plan)))
        except (ConfigError, ValueError) as err:
            trials.append(TrialResult(i, trial_seed, overrides, float("-inf"), str(err)))

    def finish(i, trial_seed, overrides, outcome, error=None):
        trials.append(TrialResult(i, trial_seed, overrides, outcome, error))

    if n_workers > 1 and len(prepared) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [(entry, pool.submit(_evaluate_trial, entry[3])) for entry in prepared]
            for (i, trial_seed, overrides, _), fut in futures:
                try:
                    finish(i, trial_seed, overrides, fut.result())
                except (ConfigError, ValueError, TrainingDivergedError, SearchError) as err:
                    finish(i, trial_seed, overrides, float("-inf"), str(err))
    else:
        for i, trial_seed, overrides, args in prepared:
            try:
                finish(i, trial_seed, overrides, _evaluate_trial(args))
            except (ConfigError, ValueError, TrainingDivergedError) as err:
                finish(i, trial_seed, overrides, float("-inf"), str(err))

    trials.sort(key=lambda t: t.index)
    best = None
    for t in trials:
        if np.isfinite(t.score) and (best is None or t.score > best.score):
            best = t
    if best is None:
        seeds = [t.seed for t in trials]
        raise SearchError(f"all {n_trials} trials failed; trial seeds: {seeds}")
    best_config, best_spec = _apply_overrides(base_config, base_spec, best.overrides, best.seed)
    return SearchResult(
        best_index=best.index,
        best_score=best.score,
        best_config=best_config,
        best_spec=best_spec,
        trials=trials,
    )
