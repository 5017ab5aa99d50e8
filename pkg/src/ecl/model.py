"""Three-layer MLP classifier with an auxiliary posterior head, Adam and training loops."""
from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import (AnchorGrid, binary_cross_entropy, check_paradigm, cross_entropy,
                     paradigm_groups, soft_ece)

log = logging.getLogger(__name__)

BACKBONE = ("W1", "b1", "W2", "b2")
HEAD = ("W3", "b3")
AUX = ("Wa", "ba")
CLASSIFIER = BACKBONE + HEAD
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def diverges_on_nonfinite(fn):
    """Report a non-finite value inside a training loop as :class:`TrainingDivergence`."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ad.NonFiniteError as exc:
            raise TrainingDivergence(f"{fn.__name__}: {exc}") from exc
    return wrapper


@dataclass
class MlpParameters:
    """Weights of f (input -> h -> h -> K) plus a linear auxiliary head on the features."""

    arrays: dict
    d: int
    h: int
    K: int
    aux_out: int

    @classmethod
    def init(cls, d, h, K, aux_out=None, rng=None, zero_final=False):
        rng = np.random.default_rng(rng)
        aux_out = K if aux_out is None else aux_out

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        arrays = {
            "W1": glorot(d, h), "b1": np.zeros((1, h)),
            "W2": glorot(h, h), "b2": np.zeros((1, h)),
            "W3": np.zeros((h, K)) if zero_final else glorot(h, K), "b3": np.zeros((1, K)),
            "Wa": np.zeros((h, aux_out)), "ba": np.zeros((1, aux_out)),
        }
        return cls(arrays, d, h, K, aux_out)

    def copy(self):
        return MlpParameters({k: v.copy() for k, v in self.arrays.items()}, self.d, self.h, self.K,
                             self.aux_out)

    def with_aux_out(self, aux_out):
        """Copy with a fresh zero auxiliary head of width ``aux_out``."""
        out = self.copy()
        out.aux_out = aux_out
        out.arrays["Wa"] = np.zeros((self.h, aux_out))
        out.arrays["ba"] = np.zeros((1, aux_out))
        return out

    def leaves(self, trainable=()):
        """Graph inputs for every array; only names in ``trainable`` get gradients."""
        return {k: ad.leaf(v, requires_grad=k in trainable, name=k) for k, v in self.arrays.items()}

    def check(self):
        shapes = {"W1": (self.d, self.h), "b1": (1, self.h), "W2": (self.h, self.h),
                  "b2": (1, self.h), "W3": (self.h, self.K), "b3": (1, self.K),
                  "Wa": (self.h, self.aux_out), "ba": (1, self.aux_out)}
        for k, shp in shapes.items():
            if self.arrays[k].shape != shp:
                raise ad.ShapeError(f"{k} has shape {self.arrays[k].shape}, expected {shp}")
            if not np.all(np.isfinite(self.arrays[k])):
                raise ad.NonFiniteError(f"{k} has non-finite entries")


def backbone_forward(nodes, X):
    h1 = ad.tanh(ad.matmul(ad.const(X), nodes["W1"]) + nodes["b1"])
    return ad.tanh(ad.matmul(h1, nodes["W2"]) + nodes["b2"])


def classifier_forward(nodes, X):
    """Return ``(features, logits, S)`` for a batch ``X``."""
    feats = backbone_forward(nodes, X)
    logits = ad.matmul(feats, nodes["W3"]) + nodes["b3"]
    return feats, logits, ad.softmax(logits)


def aux_head_forward(nodes, feats, paradigm):
    """Posterior estimate: softmax rows (canonical, class-wise) or a sigmoid column (top-label)."""
    check_paradigm(paradigm)
    z = ad.matmul(feats, nodes["Wa"]) + nodes["ba"]
    if paradigm == "top-label":
        if z.shape[1] != 1:
            raise ad.ShapeError("top-label auxiliary head must have one output")
        return ad.sigmoid(z)
    return ad.softmax(z)


def predict(params, X):
    """Numpy confidences S for ``X`` (no gradients)."""
    return classifier_forward(params.leaves(), X)[2].value


def predict_aux(params, X, paradigm):
    nodes = params.leaves()
    feats = backbone_forward(nodes, X)
    return aux_head_forward(nodes, feats, paradigm).value


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Bias-corrected Adam update of ``params`` (a dict of arrays) in place."""
    state.step += 1
    t = state.step
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        params[k] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


def _grads_by_name(grads):
    return {n.name: g for n, g in grads.items()}


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_loss(value, what):
    if not np.isfinite(value):
        raise TrainingDivergence(f"{what} loss became non-finite")


@diverges_on_nonfinite
def train_source_classifier(X, Y, config=None, params=None, hidden=64, rng=None):
    """Cross-entropy training of the classifier on labelled source data.

    Returns ``(params, history)`` where ``history`` holds the mean training
    loss per epoch.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed if rng is None else rng)
    if params is None:
        params = MlpParameters.init(X.shape[1], hidden, Y.shape[1], rng=rng)
    state = AdamState(lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatches(len(X), config.batch_size, rng):
            nodes = params.leaves(CLASSIFIER)
            _, _, S = classifier_forward(nodes, X[idx])
            loss = cross_entropy(S, Y[idx])
            _check_loss(loss.value[0, 0], "cross-entropy")
            adam_step(state, params.arrays, _grads_by_name(ad.backward(loss)))
            total += loss.value[0, 0] * len(idx)
        history.append(total / len(X))
        log.debug("epoch %d  ce %.5f", epoch, history[-1])
    return params, history


def aux_targets(params, X, Y, paradigm):
    """Labels for the auxiliary head: one-hot Y, or 1{Y* = Yhat} for top-label."""
    if paradigm == "top-label":
        yhat = predict(params, X).argmax(axis=1)
        return (yhat == Y.argmax(axis=1)).astype(np.float64)[:, None]
    return Y


def prior_logits(target, paradigm):
    """Bias that makes a zero-weight head output the label frequencies."""
    freq = np.clip(target.mean(axis=0), 1e-3, 1 - 1e-3)
    if paradigm == "top-label":
        return np.log(freq / (1 - freq)).reshape(1, 1)
    return np.log(freq).reshape(1, -1)


def _aux_ce(p, target, paradigm):
    if paradigm == "top-label":
        return binary_cross_entropy(p, target)
    return cross_entropy(p, target)


def _aux_soft_ece(p, target, paradigm, grid):
    if paradigm == "top-label":
        return soft_ece(p, target, grid)
    (conf, _), = paradigm_groups(p, p, "top-label")
    correct = (p.value.argmax(axis=1) == target.argmax(axis=1)).astype(np.float64)
    return soft_ece(conf, correct, grid)


def source_soft_ece(params, X, Y, paradigm, grid=None):
    grid = grid or AnchorGrid.scalar()
    target = aux_targets(params, X, Y, paradigm)
    nodes = params.leaves()
    p = aux_head_forward(nodes, backbone_forward(nodes, X), paradigm)
    return float(_aux_soft_ece(p, target, paradigm, grid).value[0, 0])


def _aux_setup(params, X, Y, paradigm):
    check_paradigm(paradigm)
    aux_out = 1 if paradigm == "top-label" else params.K
    params = params.with_aux_out(aux_out) if params.aux_out != aux_out else params.copy()
    target = aux_targets(params, X, Y, paradigm)
    feats = backbone_forward(params.leaves(), X).value  # backbone is frozen
    return params, target, feats


@diverges_on_nonfinite
def _fit_head(params, feats, target, paradigm, epochs, batch_size, lr, rng,
              soft_ece_weight=0.0, grid=None, history=None):
    state = AdamState(lr=lr)
    for _ in range(epochs):
        for idx in minibatches(len(feats), batch_size, rng):
            nodes = params.leaves(AUX)
            p = aux_head_forward(nodes, ad.const(feats[idx]), paradigm)
            loss = _aux_ce(p, target[idx], paradigm)
            if soft_ece_weight:
                loss = loss + soft_ece_weight * _aux_soft_ece(p, target[idx], paradigm, grid)
            _check_loss(loss.value[0, 0], "auxiliary head")
            adam_step(state, params.arrays, _grads_by_name(ad.backward(loss)))
        if history is not None:
            p = aux_head_forward(params.leaves(), ad.const(feats), paradigm)
            history.append(float(_aux_soft_ece(p, target, paradigm, grid).value[0, 0]))
    return params


def train_aux_head(params, X, Y, paradigm, config=None, rng=None):
    """Fit the auxiliary head by cross-entropy on frozen source features.

    Labels are one-hot Y (binary correctness for top-label). The bias starts
    at the label log-prior. Only ``Wa`` and ``ba`` change.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed + 1 if rng is None else rng)
    params, target, feats = _aux_setup(params, X, Y, paradigm)
    params.arrays["ba"] = prior_logits(target, paradigm)
    return _fit_head(params, feats, target, paradigm, config.epochs, config.batch_size,
                     config.lr, rng)


def calibrate_aux_head(params, X, Y, paradigm, config=None, calib_epochs=None,
                       soft_ece_weight=1.0, grid=None, rng=None, calib_batch_size=None,
                       fit_first=True):
    """Fit the auxiliary head (optional) and calibrate it on the source domain.

    Calibration minimises cross-entropy + ``soft_ece_weight`` * Soft-ECE,
    full-batch by default so the binned objective is not re-estimated on
    every step. Only ``Wa`` and ``ba`` change. Returns
    ``(params, soft_ece_history)`` with the source Soft-ECE after each
    calibration epoch.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed + 2 if rng is None else rng)
    if fit_first:
        params = train_aux_head(params, X, Y, paradigm, config)
    params, target, feats = _aux_setup(params, X, Y, paradigm)
    grid = grid or AnchorGrid.scalar()
    history = []
    calib_epochs = config.epochs if calib_epochs is None else calib_epochs
    params = _fit_head(params, feats, target, paradigm, calib_epochs, calib_batch_size or len(X),
                       config.lr, rng, soft_ece_weight, grid, history)
    return params, history


# ---------------------------------------------------------------- checkpoints

def checkpoint_dict(params, config=None, ledger=None):
    out = {
        "format": "ecl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dims": {"d": params.d, "h": params.h, "K": params.K, "aux_out": params.aux_out},
        "tensors": {k: {"shape": list(v.shape), "values": v.ravel(order="C").tolist()}
                    for k, v in sorted(params.arrays.items())},
        "config": config or {},
    }
    if ledger is not None:
        out["ledger"] = ledger.to_dict()
    return out


def save_checkpoint(path, params, config=None, ledger=None):
    """Write shapes and row-major float64 values as JSON (floats use repr, so exact)."""
    text = json.dumps(checkpoint_dict(params, config, ledger), indent=1, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_checkpoint(path):
    """Return ``(params, config, ledger_or_None)``."""
    from .losses import BinLedger

    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != "ecl-checkpoint":
        raise ValueError(f"{path} is not an ECL checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')}")
    arrays = {k: np.array(t["values"], dtype=np.float64).reshape(t["shape"])
              for k, t in data["tensors"].items()}
    dims = data["dims"]
    params = MlpParameters(arrays, dims["d"], dims["h"], dims["K"], dims["aux_out"])
    params.check()
    ledger = BinLedger.from_dict(data["ledger"]) if "ledger" in data else None
    return params, data.get("config", {}), ledger
