"""Fine-tuning loops that add a calibration term to source cross-entropy.

* ECL (trainable): cached per-bin auxiliaries with proximal updates, the
  mini-batch objective is the quadratic auxiliary loss
* ECL (naive): the differentiable ECL evaluated directly on each mini-batch
* Soft-ECE: source-only soft-binned top-label ECE

The ECL weight follows the adaptive rule lambda = (sum CE / sum ECL)^gamma
with running sums kept from the first iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import (AnchorGrid, BinLedger, LossBalancer, cross_entropy, ecl_minibatch_step,
                     ecl_soft, soft_ece)
from .model import (CLASSIFIER, AdamState, TrainingDivergence, adam_step, aux_head_forward,
                    backbone_forward, classifier_forward, diverges_on_nonfinite,
                    _grads_by_name)

log = logging.getLogger(__name__)

POSTERIOR_MODES = ("snapshot", "live")
MINIBATCH_MODES = ("trainable", "naive")


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    gamma: float = 1.0
    lambda_cap: float = 1e6
    alpha_ema: float = 0.1
    n_prox: int = 3
    posterior: str = "live"
    minibatch: str = "trainable"
    soft_ece_weight: float = 1.0

    def __post_init__(self):
        if self.posterior not in POSTERIOR_MODES:
            raise ValueError(f"posterior must be one of {POSTERIOR_MODES}")
        if self.minibatch not in MINIBATCH_MODES:
            raise ValueError(f"minibatch must be one of {MINIBATCH_MODES}")


@dataclass
class FinetuneResult:
    params: object
    ledger: BinLedger | None
    curve: list = field(default_factory=list)  # (iteration, ce, ecl, lambda)

    @property
    def lambda_trace(self):
        return [row[3] for row in self.curve]


def paired_batches(n_s, n_t, batch_size, rng):
    """Shuffle each domain and pair the i-th source batch with the i-th target batch."""
    order_s, order_t = rng.permutation(n_s), rng.permutation(n_t)
    n_batches = max(int(np.ceil(n_s / batch_size)), int(np.ceil(n_t / batch_size)))
    bs_s = int(np.ceil(n_s / n_batches))
    bs_t = int(np.ceil(n_t / n_batches))
    for b in range(n_batches):
        yield order_s[b * bs_s:(b + 1) * bs_s], order_t[b * bs_t:(b + 1) * bs_t]


def _posteriors(nodes, feats_s, feats_t, paradigm, snapshot, idx_s, idx_t):
    if snapshot is not None:
        return ad.const(snapshot[0][idx_s]), ad.const(snapshot[1][idx_t])
    return aux_head_forward(nodes, feats_s, paradigm), aux_head_forward(nodes, feats_t, paradigm)


@diverges_on_nonfinite
def finetune_ecl(params, Xs, Ys, Xt, grid: AnchorGrid, config: FinetuneConfig):
    """Train on L_ce(source) + lambda * L_ecl starting from ``params``.

    ``params`` must carry a calibrated auxiliary head for ``grid.paradigm``.
    The head weights stay frozen; with ``posterior="live"`` the posterior
    estimate is recomputed from the current backbone so gradients also flow
    through it, with ``"snapshot"`` it is fixed to the starting values.
    """
    rng = np.random.default_rng(config.seed)
    params = params.copy()
    paradigm = grid.paradigm
    snapshot = None
    if config.posterior == "snapshot":
        nodes = params.leaves()
        snapshot = tuple(aux_head_forward(nodes, backbone_forward(nodes, X), paradigm).value
                         for X in (Xs, Xt))
    ledger = BinLedger.zeros(grid, params.K, config.alpha_ema, config.n_prox)
    balancer = LossBalancer(config.gamma, config.lambda_cap)
    state = AdamState(lr=config.lr)
    curve = []
    it = 0
    for _ in range(config.epochs):
        for idx_s, idx_t in paired_batches(len(Xs), len(Xt), config.batch_size, rng):
            nodes = params.leaves(CLASSIFIER)
            feats_s, _, S_s = classifier_forward(nodes, Xs[idx_s])
            feats_t, _, S_t = classifier_forward(nodes, Xt[idx_t])
            p_s, p_t = _posteriors(nodes, feats_s, feats_t, paradigm, snapshot, idx_s, idx_t)
            ce = cross_entropy(S_s, Ys[idx_s])
            if config.minibatch == "trainable":
                ecl, ledger = ecl_minibatch_step(S_s, S_t, p_s, p_t, grid, ledger)
            else:
                ecl = ecl_soft(S_s, S_t, p_s, p_t, grid)
            ce_v = float(ce.value[0, 0])
            ecl_v = 0.0 if ecl is None else float(ecl.value[0, 0])
            if not (np.isfinite(ce_v) and np.isfinite(ecl_v)):
                raise TrainingDivergence(f"non-finite loss at iteration {it}")
            lam = balancer.update(ce_v, ecl_v)
            total = ce if ecl is None else ce + lam * ecl
            adam_step(state, params.arrays, _grads_by_name(ad.backward(total)))
            curve.append((it, ce_v, ecl_v, lam))
            it += 1
    return FinetuneResult(params, ledger if config.minibatch == "trainable" else None, curve)


@diverges_on_nonfinite
def finetune_soft_ece(params, Xs, Ys, grid: AnchorGrid, config: FinetuneConfig):
    """Train on L_ce + soft_ece_weight * Soft-ECE of the classifier on source data."""
    rng = np.random.default_rng(config.seed)
    params = params.copy()
    state = AdamState(lr=config.lr)
    curve = []
    it = 0
    for _ in range(config.epochs):
        for idx, _ in paired_batches(len(Xs), len(Xs), config.batch_size, rng):
            nodes = params.leaves(CLASSIFIER)
            _, _, S = classifier_forward(nodes, Xs[idx])
            ce = cross_entropy(S, Ys[idx])
            top = S.value.argmax(axis=1)
            conf = ad.gather(S, top)
            correct = (top == Ys[idx].argmax(axis=1)).astype(np.float64)
            sece = soft_ece(conf, correct, grid)
            total = ce + config.soft_ece_weight * sece
            if not np.isfinite(total.value[0, 0]):
                raise TrainingDivergence(f"non-finite loss at iteration {it}")
            adam_step(state, params.arrays, _grads_by_name(ad.backward(total)))
            curve.append((it, float(ce.value[0, 0]), float(sece.value[0, 0]),
                          config.soft_ece_weight))
            it += 1
    return FinetuneResult(params, None, curve)


@diverges_on_nonfinite
def finetune_ce(params, Xs, Ys, config: FinetuneConfig):
    """Continue plain cross-entropy training (matched-budget control arm)."""
    rng = np.random.default_rng(config.seed)
    params = params.copy()
    state = AdamState(lr=config.lr)
    curve = []
    it = 0
    for _ in range(config.epochs):
        for idx, _ in paired_batches(len(Xs), len(Xs), config.batch_size, rng):
            nodes = params.leaves(CLASSIFIER)
            ce = cross_entropy(classifier_forward(nodes, Xs[idx])[2], Ys[idx])
            if not np.isfinite(ce.value[0, 0]):
                raise TrainingDivergence(f"non-finite loss at iteration {it}")
            adam_step(state, params.arrays, _grads_by_name(ad.backward(ce)))
            curve.append((it, float(ce.value[0, 0]), 0.0, 0.0))
            it += 1
    return FinetuneResult(params, None, curve)
