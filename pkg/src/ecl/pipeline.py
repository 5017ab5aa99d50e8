"""Experiment, ablation and verification runners that write report files."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os

import numpy as np

from . import metrics as M
from . import theory
from .config import VERIFY_IDS, ConfigError, ExperimentConfig
from .finetune import FinetuneConfig, finetune_ce, finetune_ecl, finetune_soft_ece
from .losses import AnchorGrid, adaptive_lambda
from .model import (TrainConfig, calibrate_aux_head, load_checkpoint, predict, save_checkpoint,
                    train_source_classifier)
from .simdata import CovariateShiftTask, sample_task

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


# ---------------------------------------------------------------- data

def task_spec(cfg: ExperimentConfig, seed, n=None):
    t = cfg.task
    return CovariateShiftTask(kind=t.kind, n_per_domain=n or t.n_per_domain, seed=seed,
                              source_mean=list(t.source_mean), target_mean=list(t.target_mean),
                              cov_diag=list(t.cov_diag), source_box=list(t.source_box),
                              target_box=list(t.target_box), labeling=t.labeling)


def load_data(cfg, seed):
    """Training data for one seed plus the labelled target set used for evaluation."""
    data = sample_task(task_spec(cfg, seed))
    if cfg.task.eval_n:
        evaluation = sample_task(task_spec(cfg, seed + EVAL_SEED_OFFSET, cfg.task.eval_n)).target
    else:
        evaluation = data.target
    m = cfg.model
    if m.d is not None and m.d != data.source.X.shape[1]:
        raise ConfigError(f"model.d={m.d} does not match task dimension {data.source.X.shape[1]}")
    if m.K is not None and m.K != data.source.Y.shape[1]:
        raise ConfigError(f"model.K={m.K} does not match task classes {data.source.Y.shape[1]}")
    return data, evaluation


def write_domain_csv(path, domain):
    K = domain.Y.shape[1]
    d = domain.X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + ["y"] + [f"posterior{k}" for k in range(K)])
        for x, y, p in zip(domain.X, domain.labels, domain.posterior):
            w.writerow([repr(float(v)) for v in x] + [int(y)] + [repr(float(v)) for v in p])


def simulate(cfg):
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    data = sample_task(task_spec(cfg, cfg.training.seed))
    files = {d: os.path.join(out, f"{d}.csv") for d in ("source", "target")}
    write_domain_csv(files["source"], data.source)
    write_domain_csv(files["target"], data.target)
    return files


# ---------------------------------------------------------------- helpers

def grid_for(cfg, paradigm, K):
    L = cfg.loss
    return AnchorGrid.for_paradigm(paradigm, K, n_bins=L.n_bins, resolution=L.lattice_resolution,
                                   tau=L.tau, eps=L.eps)


def finetune_config(cfg, seed, **overrides):
    L, T = cfg.loss, cfg.training
    kw = dict(epochs=T.finetune_epochs, batch_size=T.batch_size, lr=T.lr, seed=seed, gamma=L.gamma,
              lambda_cap=L.lambda_cap, alpha_ema=L.alpha_ema, n_prox=L.n_prox, posterior=L.posterior,
              minibatch=L.minibatch, soft_ece_weight=L.soft_ece_weight)
    kw.update(overrides)
    return FinetuneConfig(**kw)


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "L_ce", "L_ecl", "lambda"])
        for it, ce, ecl, lam in curve:
            w.writerow([it, repr(ce), repr(ecl), repr(lam)])


def read_curve(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["L_ce"]), float(r["L_ecl"]), float(r["lambda"])) for r in rows]


def replay_lambda(curve, gamma, cap=1e6):
    """Recompute the adaptive weights from logged losses (running sums from iteration 0)."""
    ce_sum = ecl_sum = 0.0
    out = []
    for _, ce, ecl, _ in curve:
        ce_sum += ce
        ecl_sum += ecl
        out.append(adaptive_lambda(ce_sum, ecl_sum, gamma, cap))
    return out


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class Stage:
    """Prepared per-seed state shared by every arm: data, Uncal classifier, aux heads."""

    def __init__(self, cfg, seed):
        self.cfg, self.seed = cfg, seed
        self.data, self.eval = load_data(cfg, seed)
        T = cfg.training
        src = self.data.source
        n_hold = int(round(T.aux_holdout * len(src)))
        order = np.random.default_rng(seed + 17).permutation(len(src))
        clf_idx = order[n_hold:] if n_hold else order
        aux_idx = order[:n_hold] if n_hold else order
        self.Xs, self.Ys = src.X, src.Y
        self.Xt = self.data.target.X
        self.uncal, self.ce_history = train_source_classifier(
            src.X[clf_idx], src.Y[clf_idx], TrainConfig(T.epochs, T.batch_size, T.lr, seed),
            hidden=cfg.model.hidden)
        self._aux_idx = aux_idx
        self._aux = {}
        self.K = src.Y.shape[1]

    def with_aux(self, paradigm):
        """Uncal classifier with an auxiliary head calibrated for ``paradigm``."""
        if paradigm not in self._aux:
            T = self.cfg.training
            idx = self._aux_idx
            params, hist = calibrate_aux_head(
                self.uncal, self.Xs[idx], self.Ys[idx], paradigm,
                TrainConfig(T.aux_epochs, T.batch_size, T.lr, self.seed),
                calib_epochs=T.calib_epochs, soft_ece_weight=self.cfg.loss.soft_ece_weight)
            self._aux[paradigm] = (params, hist)
        return self._aux[paradigm]


def _evaluate(stage, params, method, baseline_acc):
    cfg = stage.cfg
    S = predict(params, stage.eval.X)
    canon = grid_for(cfg, "canonical", stage.K)
    rep = M.evaluate(S, stage.eval.Y, canon, method, stage.seed, baseline_acc, cfg.loss.n_bins)
    rep.extra["source_accuracy"] = M.accuracy(predict(params, stage.Xs), stage.Ys)
    tables = {p: M.reliability_export(S, stage.eval.Y, p, cfg.loss.n_bins, canon)
              for p in ("top-label", "class-wise", "canonical")}
    return rep, tables


# ---------------------------------------------------------------- experiment

def arm_names(cfg):
    names = []
    for arm in cfg.training.arms:
        if arm == "ecl":
            names += [f"ecl-{p}" for p in cfg.loss.paradigms]
        else:
            names.append(arm)
    return names


def declared_outputs(cfg):
    """Relative paths every successful ``train`` run must produce."""
    files = ["config.yaml", "summary.csv", "summary.json", "manifest.json"]
    for k in range(cfg.training.n_seeds):
        seed = cfg.training.seed + k
        base = f"seed_{seed}"
        for arm in arm_names(cfg):
            files.append(f"{base}/reports/{arm}.json")
            files.append(f"{base}/curves/{arm}.csv")
            for p in ("top-label", "class-wise", "canonical"):
                files.append(f"{base}/reliability/{arm}_{p}.csv")
            if cfg.output.checkpoints:
                files.append(f"{base}/checkpoints/{arm}.json")
            if cfg.output.svg:
                files.append(f"{base}/reliability/{arm}_top-label.svg")
    return files


def run_seed(cfg, seed):
    """Train every configured arm for one seed; returns ``{arm: (report, params, curve)}``."""
    stage = Stage(cfg, seed)
    results = {}
    uncal_rep, _ = _evaluate(stage, stage.uncal, "uncal", None)
    base_acc = uncal_rep.accuracy
    curve = [(i, ce, 0.0, 0.0) for i, ce in enumerate(stage.ce_history)]
    results["uncal"] = (stage.uncal, curve, {})
    for arm in arm_names(cfg):
        if arm == "uncal":
            continue
        if arm == "soft-ece":
            res = finetune_soft_ece(stage.uncal, stage.Xs, stage.Ys,
                                    grid_for(cfg, "top-label", stage.K), finetune_config(cfg, seed))
            results[arm] = (res.params, res.curve, {})
        elif arm == "uncal-matched":
            res = finetune_ce(stage.uncal, stage.Xs, stage.Ys, finetune_config(cfg, seed))
            results[arm] = (res.params, res.curve, {})
        else:
            paradigm = arm[len("ecl-"):]
            start, calib_hist = stage.with_aux(paradigm)
            res = finetune_ecl(start, stage.Xs, stage.Ys, stage.Xt, grid_for(cfg, paradigm, stage.K),
                               finetune_config(cfg, seed))
            results[arm] = (res.params, res.curve,
                            {"paradigm": paradigm, "gamma": cfg.loss.gamma,
                             "lambda_trace": res.lambda_trace, "aux_soft_ece_history": calib_hist,
                             "ledger": res.ledger})
    out = {}
    for arm, (params, curve, info) in results.items():
        rep, tables = _evaluate(stage, params, arm, base_acc)
        rep.config = cfg.to_dict()
        rep.extra.update({k: v for k, v in info.items() if k != "ledger"})
        rep.reliability = {p: t.to_dict() for p, t in tables.items()}
        out[arm] = (rep, tables, params, curve, info.get("ledger"))
    return out


def matched_metric(rep, arm):
    """The metric that matches an arm's paradigm (ECE for non-ECL arms)."""
    if arm.startswith("ecl-"):
        return {"top-label": rep.ece, "class-wise": rep.cwece, "canonical": rep.canonical_ce}[arm[4:]]
    return rep.ece


def run_experiment(cfg: ExperimentConfig):
    """Train all arms for ``n_seeds`` consecutive seeds and write reports.

    Returns the summary dictionary; raises on a missing declared output.
    """
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.yaml"))
    rows = []
    for k in range(cfg.training.n_seeds):
        seed = cfg.training.seed + k
        base = os.path.join(out, f"seed_{seed}")
        for sub in ("reports", "curves", "reliability", "checkpoints"):
            os.makedirs(os.path.join(base, sub), exist_ok=True)
        for arm, (rep, tables, params, curve, ledger) in run_seed(cfg, seed).items():
            rep.to_json(os.path.join(base, "reports", f"{arm}.json"))
            write_curve(os.path.join(base, "curves", f"{arm}.csv"), curve)
            for p, t in tables.items():
                t.to_csv(os.path.join(base, "reliability", f"{arm}_{p}.csv"))
            if cfg.output.svg:
                M.reliability_svg(tables["top-label"], os.path.join(base, "reliability", f"{arm}_top-label.svg"))
            if cfg.output.checkpoints:
                save_checkpoint(os.path.join(base, "checkpoints", f"{arm}.json"), params,
                                {**cfg.to_dict(), "seed": seed, "arm": arm}, ledger)
            rows.append({"seed": seed, "arm": arm, "ece": rep.ece, "cwece": rep.cwece,
                         "canonical_ce": rep.canonical_ce, "accuracy": rep.accuracy,
                         "delta_acc": rep.delta_acc, "matched_metric": matched_metric(rep, arm)})
    summary = summarize(rows)
    _write_rows(os.path.join(out, "summary.csv"), summary["rows"])
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    check_manifest(cfg, out)
    return summary


def summarize(rows):
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    keys = ["ece", "cwece", "canonical_ce", "accuracy", "delta_acc", "matched_metric"]
    table = []
    for arm in arms:
        sel = [r for r in rows if r["arm"] == arm]
        row = {"arm": arm, "n_seeds": len(sel)}
        for k in keys:
            vals = np.array([r[k] for r in sel])
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        table.append(row)
    return {"rows": table, "per_seed": rows}


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def check_manifest(cfg, out):
    files = declared_outputs(cfg)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({"files": files}, fh, indent=1)
    missing = [f for f in files if not os.path.exists(os.path.join(out, f))]
    if missing:
        raise RuntimeError(f"declared outputs missing: {missing}")
    return files


# ---------------------------------------------------------------- ablation

ABLATIONS = ("gamma-sweep", "minibatch")


def run_ablation(cfg: ExperimentConfig, which="gamma-sweep"):
    """Matched-seed comparison arms; writes ``ablation_<which>.csv`` and ``.json``.

    Every arm of a seed starts from the same Uncal classifier and calibrated
    auxiliary head; the starting checkpoint is written per arm and its hash
    recorded.
    """
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")
    A = cfg.ablation
    paradigm = A.paradigm
    if which == "gamma-sweep":
        arms = {f"gamma={g}": {"gamma": float(g)} for g in A.gammas}
    else:
        arms = {"trainable": {"minibatch": "trainable"}, "naive": {"minibatch": "naive"}}
    out = os.path.join(cfg.output.dir, f"ablation_{which}")
    os.makedirs(out, exist_ok=True)
    rows, hashes = [], {}
    for k in range(A.n_seeds):
        seed = cfg.training.seed + k
        stage = Stage(cfg, seed)
        start, _ = stage.with_aux(paradigm)
        base_rep, _ = _evaluate(stage, stage.uncal, "uncal", None)
        grid = grid_for(cfg, paradigm, stage.K)
        for arm, overrides in arms.items():
            init_path = os.path.join(out, f"seed_{seed}_{_slug(arm)}_init.json")
            save_checkpoint(init_path, start, {**cfg.to_dict(), "seed": seed})
            hashes.setdefault(seed, {})[arm] = sha256(init_path)
            res = finetune_ecl(start, stage.Xs, stage.Ys, stage.Xt, grid,
                               finetune_config(cfg, seed, **overrides))
            rep, _ = _evaluate(stage, res.params, arm, base_rep.accuracy)
            write_curve(os.path.join(out, f"seed_{seed}_{_slug(arm)}_curve.csv"), res.curve)
            rows.append({"seed": seed, "arm": arm, "ece": rep.ece, "cwece": rep.cwece,
                         "canonical_ce": rep.canonical_ce, "accuracy": rep.accuracy,
                         "delta_acc": rep.delta_acc,
                         "matched_metric": matched_metric(rep, f"ecl-{paradigm}")})
    summary = summarize(rows)
    summary.update({"ablation": which, "paradigm": paradigm, "initial_checkpoint_sha256": hashes,
                    "matched_initialisation": all(len(set(h.values())) == 1 for h in hashes.values()),
                    "config": cfg.to_dict()})
    csv_path = os.path.join(cfg.output.dir, f"ablation_{which}.csv")
    _write_mean_std(csv_path, summary["rows"])
    with open(os.path.join(cfg.output.dir, f"ablation_{which}.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def _slug(arm):
    return arm.replace("=", "").replace(".", "p")


def _write_mean_std(path, rows):
    """CSV with ``mean ± std`` strings next to the raw numbers."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "n_seeds", "matched_metric", "accuracy", "delta_acc",
                    "matched_metric_mean", "matched_metric_std", "accuracy_mean", "accuracy_std"])
        for r in rows:
            w.writerow([r["arm"], r["n_seeds"],
                        f"{r['matched_metric_mean']:.4f} ± {r['matched_metric_std']:.4f}",
                        f"{r['accuracy_mean']:.4f} ± {r['accuracy_std']:.4f}",
                        f"{r['delta_acc_mean']:+.4f} ± {r['delta_acc_std']:.4f}",
                        r["matched_metric_mean"], r["matched_metric_std"],
                        r["accuracy_mean"], r["accuracy_std"]])


# ---------------------------------------------------------------- verification

def run_verification(cfg: ExperimentConfig, which="all"):
    """Run theorem checks and write ``<theorem>.json`` files; returns ``{theorem: doc}``."""
    if which not in VERIFY_IDS:
        raise ConfigError(f"unknown verification id {which!r}; expected one of {VERIFY_IDS}")
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    V, seed = cfg.verify, cfg.training.seed
    echo = cfg.to_dict()
    todo = ("theorem1", "theorem2", "theorem3") if which == "all" else (which,)
    docs = {}
    for tid in todo:
        if tid == "theorem1":
            reports = theory.theorem1_reports(V.n_grid)
        elif tid == "theorem2":
            sweep = theory.sample_complexity_sweep(ns=V.ns, trials=V.trials, seed=seed)
            theory.write_sweep_csv(os.path.join(out, "theorem2_sweep.csv"), sweep)
            sweep.diagnostics.pop("raw")
            reports = [sweep, theory.bin_monotonicity_check(seed=seed),
                       theory.large_sample_check(n=V.large_n, seed=seed)]
        else:
            reports = theory.theorem3_reports(seed=seed, n_random=V.n_random)
            reports.append(theory.auxiliary_equivalence_check(seed=seed))
            reports += theory.minibatch_unbiasedness_check(
                theory.make_gradient_problem(seed=seed), mode="algorithm1", seed=seed,
                n_random=min(V.n_random, 200))
        docs[tid] = theory.write_reports(os.path.join(out, f"{tid}.json"), tid, reports, seed, echo)
    return docs


# ---------------------------------------------------------------- report

def report_from_checkpoint(path, out_dir):
    """Re-evaluate a saved checkpoint on the target data described by its config echo."""
    params, echo, _ = load_checkpoint(path)
    echo = dict(echo)
    seed = echo.pop("seed", 0)
    arm = echo.pop("arm", "checkpoint")
    cfg = ExperimentConfig.from_dict(echo)
    _, evaluation = load_data(cfg, seed)
    S = predict(params, evaluation.X)
    canon = grid_for(cfg, "canonical", S.shape[1])
    rep = M.evaluate(S, evaluation.Y, canon, arm, seed, None, cfg.loss.n_bins, cfg.to_dict())
    os.makedirs(out_dir, exist_ok=True)
    rep.to_json(os.path.join(out_dir, f"{arm}_report.json"))
    for p in ("top-label", "class-wise", "canonical"):
        M.reliability_export(S, evaluation.Y, p, cfg.loss.n_bins, canon).to_csv(
            os.path.join(out_dir, f"{arm}_{p}.csv"))
    return rep
