"""Poisoned-sample filtering, poison class detection and backdoor neutralization."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .extraction import (
    ALL_TARGET_CLASS,
    FILTERED_POISONED,
    GradientMatrix,
    PoisonSignal,
    extract_signal,
    gradient_matrix,
    principal_scores,
)
from .numeric import GmmResult, gmm2_fit, wasserstein2_gaussians
from .poisonlab import Dataset

log = logging.getLogger(__name__)


@dataclass
class NeutralizeConfig:
    rho: float = 500.0
    tau: float = 2.0
    retrain_epochs: int = 1
    learning_rate: float | None = None  # None: reuse the training learning rate
    batch_size: int | None = None
    clip_range: tuple[float, float] | None = None  # None: [0, pixel_max]
    center: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.tau <= 1:
            raise ValueError("tau must exceed 1")
        if self.retrain_epochs < 0:
            raise ValueError("retrain_epochs must be non-negative")


@dataclass
class FilterResult:
    clean_ids: np.ndarray
    poisoned_ids: np.ndarray
    sample_ids: np.ndarray
    scores: np.ndarray
    gmm: GmmResult | None
    signal: PoisonSignal
    label_used: int

    def confusion(self, data: Dataset) -> dict:
        """Counts against ground truth; specificity is accuracy on clean samples."""
        truth = data.poisoned_flags
        tp = int(truth[self.poisoned_ids].sum())
        fp = len(self.poisoned_ids) - tp
        fn = int(truth[self.clean_ids].sum())
        tn = len(self.clean_ids) - fn
        return {
            "true_poisoned": tp,
            "false_poisoned": fp,
            "true_clean": tn,
            "false_clean": fn,
            "sensitivity": tp / (tp + fn) if tp + fn else None,
            "specificity": tn / (tn + fp) if tn + fp else None,
        }


@dataclass
class DetectionReport:
    per_class_w2: dict[int, float]
    target_class: int | None
    base_class: int | None
    tau: float
    ratio: float
    flagged: bool
    per_class_mean_abs_component: dict[int, float] = field(default_factory=dict)
    runners_up: list[int] = field(default_factory=list)
    candidate_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    per_class_gmm: dict[int, dict] = field(default_factory=dict)
    signals: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "per_class_w2": {str(k): v for k, v in self.per_class_w2.items()},
            "target_class": self.target_class,
            "base_class": self.base_class,
            "tau": self.tau,
            "ratio": self.ratio,
            "flagged": self.flagged,
            "per_class_mean_abs_component": {
                str(k): v for k, v in self.per_class_mean_abs_component.items()
            },
            "runners_up": list(self.runners_up),
            "candidate_count": int(len(self.candidate_ids)),
            "per_class_gmm": {str(k): v for k, v in self.per_class_gmm.items()},
        }


@dataclass
class NeutralizeResult:
    network: nn.Network
    detection: DetectionReport
    filter: FilterResult | None = None
    augmented: Dataset | None = None
    relabeled_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    counter_signals: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    loss_history: list[float] = field(default_factory=list)

    @property
    def neutralized(self) -> bool:
        return self.filter is not None


def minority_cluster(gmm: GmmResult, scores: np.ndarray) -> np.ndarray:
    """Boolean mask of the smaller cluster; on equal sizes the one further from 0."""
    a = gmm.assignments
    n0, n1 = gmm.cluster_sizes()
    if n0 != n1:
        return a == (0 if n0 < n1 else 1)
    m0 = np.abs(scores[a == 0]).mean()
    m1 = np.abs(scores[a == 1]).mean()
    return a == (0 if m0 > m1 else 1)


def _gmm_summary(g: GmmResult) -> dict:
    return {
        "components": [asdict(c) for c in g.components],
        "sizes": list(g.cluster_sizes()),
        "iterations": g.iterations,
        "converged": g.converged,
        "degenerate": g.degenerate,
    }


def _class_scores(net, data: Dataset, ids: np.ndarray, label: int, center: bool, source: str, seed: int):
    gm = gradient_matrix(net, data.images[ids], label, center=center, sample_ids=ids)
    sig = extract_signal(gm, source=source, seed=seed)
    if not sig.converged:
        log.warning("power iteration did not converge for label %d (%d iterations)", label, sig.iterations)
    return gm, sig, principal_scores(gm, sig)


def filter_poisoned(
    net: nn.Network,
    data: Dataset,
    target_class: int,
    base_class: int,
    label: int | None = None,
    center: bool = False,
    seed: int = 0,
) -> FilterResult:
    """Split the target class into clean and poisoned samples.

    Gradients are taken at `base_class` unless `label` overrides it. The larger
    GMM cluster over the principal scores is kept as clean.
    """
    if target_class == base_class:
        raise ValueError("target and base class must differ")
    ids = data.indices_of(target_class)
    if len(ids) == 0:
        raise ValueError(f"target class {target_class} has no samples")
    label = base_class if label is None else label
    gm, sig, t = _class_scores(net, data, ids, label, center, ALL_TARGET_CLASS, seed)
    kept = gm.sample_ids
    if len(kept) < 2:
        warnings.warn("too few gradient rows to cluster; keeping everything", RuntimeWarning, stacklevel=2)
        return FilterResult(ids, np.zeros(0, dtype=np.int64), kept, t, None, sig, label)
    g = gmm2_fit(t, seed=seed)
    if g.degenerate:
        warnings.warn("GMM found a single cluster; treating all samples as clean", RuntimeWarning, stacklevel=2)
        return FilterResult(ids, np.zeros(0, dtype=np.int64), kept, t, g, sig, label)
    bad = minority_cluster(g, t)
    poisoned = kept[bad]
    clean = np.setdiff1d(ids, poisoned)  # dropped zero-gradient rows count as clean
    return FilterResult(clean, poisoned, kept, t, g, sig, label)


def detect_poison_classes(net: nn.Network, data: Dataset, cfg: NeutralizeConfig | None = None) -> DetectionReport:
    """Find the poison target class by GMM cluster separation, then the base class."""
    cfg = cfg or NeutralizeConfig()
    if data.class_count < 3:
        raise ValueError("detection requires >= 3 classes")

    w2: dict[int, float] = {}
    smaller: dict[int, np.ndarray] = {}
    gmms: dict[int, dict] = {}
    signals: dict[int, np.ndarray] = {}
    for y in range(data.class_count):
        ids = data.indices_of(y)
        if len(ids) < 2:
            log.warning("class %d has %d sample(s); W2 set to 0", y, len(ids))
            w2[y] = 0.0
            smaller[y] = np.zeros(0, dtype=np.int64)
            continue
        gm, sig, t = _class_scores(net, data, ids, y, cfg.center, ALL_TARGET_CLASS, cfg.seed)
        signals[y] = sig.v
        if len(t) < 2:
            w2[y] = 0.0
            smaller[y] = np.zeros(0, dtype=np.int64)
            continue
        g = gmm2_fit(t, seed=cfg.seed)
        w2[y] = wasserstein2_gaussians(*g.components)
        smaller[y] = gm.sample_ids[minority_cluster(g, t)] if not g.degenerate else np.zeros(0, dtype=np.int64)
        gmms[y] = _gmm_summary(g)

    values = np.array([w2[y] for y in range(data.class_count)])
    target = int(np.argmax(values))  # ties go to the lowest class index
    others = np.delete(values, target)
    mean_others = float(others.mean())
    ratio = float(values[target] / mean_others) if mean_others > 0 else float("inf")
    runners = [
        int(y) for y in np.argsort(-values, kind="stable")
        if y != target and mean_others > 0
        and values[y] / np.delete(values, y).mean() > cfg.tau
    ]
    report = DetectionReport(
        per_class_w2=w2, target_class=None, base_class=None, tau=cfg.tau, ratio=ratio,
        flagged=False, runners_up=runners, per_class_gmm=gmms, signals=signals,
    )
    if not ratio > cfg.tau:
        return report

    cand = smaller[target]
    report.flagged = True
    report.target_class = target
    report.candidate_ids = cand
    if len(cand) == 0:
        log.warning("target class %d flagged but its minority cluster is empty", target)
        return report
    means = {}
    for y in range(data.class_count):
        if y == target:
            continue
        _, _, t = _class_scores(net, data, cand, y, cfg.center, FILTERED_POISONED, cfg.seed)
        means[y] = float(abs(t.mean())) if len(t) else 0.0
    report.per_class_mean_abs_component = means
    report.base_class = max(means, key=lambda y: (means[y], -y))
    return report


def counter_poison_augment(
    net: nn.Network,
    data: Dataset,
    poisoned_ids,
    target_class: int,
    cfg: NeutralizeConfig | None = None,
) -> tuple[Dataset, dict[int, np.ndarray]]:
    """Add ``rho * v_y`` to every image of each non-target class y, then clip.

    `v_y` is the leading singular vector of the poisoned samples' gradients at
    label y, oriented along their mean gradient (the loss-ascent direction).
    Returns the augmented copy and the per-class signals.
    """
    cfg = cfg or NeutralizeConfig()
    poisoned_ids = np.asarray(poisoned_ids, dtype=np.int64)
    if len(poisoned_ids) == 0:
        raise ValueError("counter-poison augmentation needs at least one poisoned sample")
    lo, hi = cfg.clip_range if cfg.clip_range is not None else (0.0, data.pixel_max)
    out = data.copy()
    signals = {}
    for y in range(data.class_count):
        if y == target_class:
            continue
        gm = gradient_matrix(net, data.images[poisoned_ids], y, center=cfg.center, sample_ids=poisoned_ids)
        sig = extract_signal(gm, source=FILTERED_POISONED, seed=cfg.seed)
        v = sig.v
        if principal_scores(gm, sig).mean() < 0:
            v = -v
        signals[y] = v
        idx = data.indices_of(y)
        out.images[idx] = np.clip(data.images[idx] + cfg.rho * v, lo, hi)
    return out, signals


def neutralize(
    net: nn.Network,
    data: Dataset,
    cfg: NeutralizeConfig | None = None,
    train_cfg: nn.TrainConfig | None = None,
) -> NeutralizeResult:
    """Detect, filter, counter-poison, relabel and fine-tune.

    Returns the input network untouched when detection does not flag a class.
    """
    cfg = cfg or NeutralizeConfig()
    train_cfg = train_cfg or nn.TrainConfig()
    detection = detect_poison_classes(net, data, cfg)
    if not detection.flagged or detection.base_class is None:
        log.info("no poison detected (ratio %.3f <= tau %.3f)", detection.ratio, cfg.tau)
        return NeutralizeResult(net, detection)

    target, base = detection.target_class, detection.base_class
    filt = filter_poisoned(net, data, target, base, center=cfg.center, seed=cfg.seed)
    if len(filt.poisoned_ids) == 0:
        log.warning("filter found no poisoned samples; model left unchanged")
        return NeutralizeResult(net, detection, filt)

    augmented, signals = counter_poison_augment(net, data, filt.poisoned_ids, target, cfg)
    augmented.labels[filt.poisoned_ids] = base

    retrain = nn.TrainConfig(
        learning_rate=cfg.learning_rate if cfg.learning_rate is not None else train_cfg.learning_rate,
        epochs=cfg.retrain_epochs,
        batch_size=cfg.batch_size or train_cfg.batch_size,
        seed=cfg.seed,
        shuffle=True,
    )
    res = nn.train(net, augmented, retrain)
    return NeutralizeResult(
        res.network, detection, filt, augmented, filt.poisoned_ids, signals, res.loss_history
    )
