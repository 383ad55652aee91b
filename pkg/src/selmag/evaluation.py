"""Metrics, baselines, ablations, selector analysis and sensitivity sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .config import TrainConfig
from .graph import DomainSet
from .meta import Pretrained, final_adapt, meta_train, selector_outputs, target_context
from .models import Hypothesis, predict_np, train_pooled_model
from .pipeline import PretrainArtifacts, pretrain

log = logging.getLogger(__name__)

BASELINES = ("direct", "uniform_ot", "selmag")
VARIANTS = ("full", "no_global", "no_local", "no_kd")
LAMBDA_GRID = (0.1, 0.2, 0.3, 0.5, 0.6, 0.8)
EPSILON_GRID = (0.0001, 0.001, 0.01, 0.1, 0.2)


def _check_pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred, true = np.asarray(pred), np.asarray(true)
    if len(pred) == 0:
        raise ValueError("empty input")
    if len(pred) != len(true):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(true)}")
    return pred, true


def accuracy(pred, true) -> float:
    pred, true = _check_pair(pred, true)
    return float(np.mean(pred == true))


def binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    ranks = rankdata(scores)
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auroc(probs, true) -> float:
    """One-vs-rest AUROC averaged over classes that have both positives and negatives."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    probs, true = _check_pair(probs, true)
    vals = []
    for c in range(probs.shape[1]):
        pos = true == c
        if pos.all() or not pos.any():
            continue
        vals.append(binary_auroc(probs[:, c], pos))
    if not vals:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(vals))


def per_class_f1(pred, true, num_classes: int) -> np.ndarray:
    pred, true = _check_pair(pred, true)
    out = np.zeros(num_classes)
    for c in range(num_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        out[c] = 2 * tp / denom if denom else 0.0
    return out


def macro_f1(pred, true, num_classes: int) -> float:
    return float(per_class_f1(pred, true, num_classes).mean())


@dataclass
class EvalReport:
    accuracy: float
    macro_auroc: float
    macro_f1: float
    per_class_f1: np.ndarray
    n_eval: int
    variant: str = ""
    seed: int = 0
    run_id: str = ""

    HEADER = ("run_id", "variant", "seed", "acc", "auroc", "macro_f1")

    def row(self) -> list:
        return [self.run_id, self.variant, self.seed, f"{self.accuracy:.6f}",
                f"{self.macro_auroc:.6f}", f"{self.macro_f1:.6f}"]


def evaluate_probs(probs: np.ndarray, labels: np.ndarray, num_classes: int, variant: str = "",
                   seed: int = 0, run_id: str = "") -> EvalReport:
    pred = probs.argmax(axis=1)
    return EvalReport(accuracy(pred, labels), macro_auroc(probs, labels), macro_f1(pred, labels, num_classes),
                      per_class_f1(pred, labels, num_classes), len(labels), variant, seed, run_id)


# ---------------------------------------------------------------------------
# experiment harness
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    """One prepared domain set with its pretraining done once and shared by every run."""

    ds: DomainSet
    cfg: TrainConfig
    target_labels: np.ndarray
    artifacts: PretrainArtifacts | None = None
    _pre: Pretrained | None = field(default=None, repr=False)

    @property
    def pre(self) -> Pretrained:
        if self.artifacts is None:
            self.artifacts = pretrain(self.ds, self.cfg)
        if self._pre is None:
            self._pre = self.artifacts.pretrained(self.ds)
        return self._pre

    def report(self, hyp: Hypothesis, variant: str, cfg: TrainConfig | None = None) -> EvalReport:
        cfg = cfg or self.cfg
        probs = predict_np(hyp, self.ds.target)
        return evaluate_probs(probs, self.target_labels, self.ds.num_classes, variant, cfg.seed,
                              f"{variant}-{cfg.digest()}")


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """The single switch each ablation variant flips."""
    if variant == "full":
        return cfg
    if variant == "no_global":
        return cfg.update(use_global=False)
    if variant == "no_local":
        return cfg.update(use_local=False)
    if variant == "no_kd":
        return cfg.update(lam=1.0)
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


def adapt(exp: Experiment, cfg: TrainConfig, sources: tuple[int, ...] | None = None):
    """Meta-train selectors under ``cfg`` and adapt to the target; returns ``(h_t, selectors, log)``."""
    selectors, logbook = meta_train(exp.ds, exp.pre, cfg)
    hyp, _ = final_adapt(exp.ds, exp.pre, selectors, cfg, sources)
    return hyp, selectors, logbook


def run_ablation(variant: str, exp: Experiment) -> EvalReport:
    cfg = variant_config(exp.cfg, variant)
    hyp, _, _ = adapt(exp, cfg)
    return exp.report(hyp, variant, cfg)


def uniform_config(cfg: TrainConfig) -> TrainConfig:
    return cfg.update(use_global=False, use_local=False)


def run_baseline(name: str, exp: Experiment) -> EvalReport:
    if name == "direct":
        return exp.report(train_pooled_model(exp.ds, exp.cfg), name)
    if name == "uniform_ot":
        cfg = uniform_config(exp.cfg)
        hyp, _ = final_adapt(exp.ds, exp.pre, {}, cfg)
        return exp.report(hyp, name, cfg)
    if name == "selmag":
        report = run_ablation("full", exp)
        report.variant = name
        return report
    raise ValueError(f"unknown baseline {name!r}; expected one of {BASELINES}")


def single_source_accuracy(exp: Experiment, k: int) -> float:
    """Uniform-weight OT adaptation from source ``k`` alone."""
    cfg = uniform_config(exp.cfg)
    hyp, _ = final_adapt(exp.ds, exp.pre, {}, cfg, sources=(k,))
    return exp.report(hyp, f"single_{k}", cfg).accuracy


@dataclass
class SelectorAnalysis:
    s_global: np.ndarray
    mean_s_local: np.ndarray
    single_source_acc: np.ndarray
    spearman: float

    HEADER = ("source", "s_global", "mean_s_local", "single_source_acc")

    def rows(self) -> list[list]:
        return [[k, f"{g:.6f}", f"{s:.6f}", f"{a:.6f}"] for k, (g, s, a) in
                enumerate(zip(self.s_global, self.mean_s_local, self.single_source_acc))]


def spearman(a, b) -> float:
    """Rank correlation; 0 when either side is constant."""
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    rho = spearmanr(a, b)[0]
    return float(rho) if np.isfinite(rho) else 0.0


def selector_analysis(exp: Experiment, selectors: dict, cfg: TrainConfig | None = None) -> SelectorAnalysis:
    cfg = cfg or exp.cfg
    ctx = target_context(exp.ds, exp.pre)
    s_global, s_local = selector_outputs(selectors, ctx, cfg)
    bounds = np.cumsum([0, *ctx.sizes])
    mean_local = np.array([s_local[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    single = np.array([single_source_accuracy(exp, k) for k in range(exp.ds.num_sources)])
    return SelectorAnalysis(s_global, mean_local, single, spearman(s_global, single))


SWEEP_HEADER = ("parameter", "value", "acc", "auroc", "macro_f1", "skipped_episodes")


def sweep(exp: Experiment, lambdas=LAMBDA_GRID, epsilons=EPSILON_GRID) -> list[list]:
    """Full-method runs over the lambda grid, then the epsilon grid, one CSV row each.

    ``skipped_episodes`` counts meta-training episodes dropped for non-finite values.
    """
    rows = []
    for name, grid in (("lambda", lambdas), ("epsilon", epsilons)):
        for value in grid:
            cfg = exp.cfg.update(**{"lam" if name == "lambda" else "epsilon": value})
            hyp, _, logbook = adapt(exp, cfg)
            r = exp.report(hyp, f"{name}={value}", cfg)
            rows.append([name, repr(value), f"{r.accuracy:.6f}", f"{r.macro_auroc:.6f}", f"{r.macro_f1:.6f}",
                         len(logbook.skipped)])
    return rows
