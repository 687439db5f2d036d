"""Poison-signal extraction from normalized input gradients."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .numeric import leading_right_singular_vector
from .poisonlab import write_ppm

ALL_TARGET_CLASS = "all-target-class"
FILTERED_POISONED = "filtered-poisoned"


@dataclass
class GradientMatrix:
    matrix: np.ndarray  # (N, n), unit rows
    sample_ids: np.ndarray
    label_used: int
    centered: bool = False
    dropped_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass
class PoisonSignal:
    v: np.ndarray
    label_used: int
    source: str
    rayleigh: float
    converged: bool = True
    iterations: int = 0


def normalize_rows(raw: np.ndarray, ids: np.ndarray):
    norms = np.linalg.norm(raw, axis=1)
    keep = norms > 0.0
    if not np.all(keep):
        warnings.warn(
            f"dropping {int((~keep).sum())} zero-gradient row(s); normalization undefined",
            RuntimeWarning,
            stacklevel=3,
        )
    return raw[keep] / norms[keep, None], ids[keep], ids[~keep]


def gradient_matrix(
    net: nn.Network, samples, label: int, center: bool = False, sample_ids=None
) -> GradientMatrix:
    """Stack unit-normalized input gradients of `samples` at cross-entropy label `label`.

    With ``center=True`` the mean raw gradient is subtracted before normalizing.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("gradient_matrix needs at least one sample")
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    raw = nn.input_gradients(net, x, label)
    if center:
        raw = raw - raw.mean(axis=0)
    rows, kept, dropped = normalize_rows(raw, ids)
    return GradientMatrix(rows, kept, int(label), center, dropped)


def extract_signal(
    gm: GradientMatrix, source: str = ALL_TARGET_CLASS, tol: float = 1e-8,
    max_iter: int = 1000, seed: int = 0,
) -> PoisonSignal:
    if len(gm) == 0:
        raise ValueError("empty gradient matrix")
    res = leading_right_singular_vector(gm.matrix, tol=tol, max_iter=max_iter, seed=seed)
    return PoisonSignal(res.vector, gm.label_used, source, res.value, res.converged, res.iterations)


def principal_scores(gm: GradientMatrix, sig: PoisonSignal) -> np.ndarray:
    if gm.matrix.shape[1] != sig.v.shape[0]:
        raise ValueError("dimension mismatch between gradient rows and signal")
    return gm.matrix @ sig.v


def signal_panels(v: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative parts of `v`, each channel scaled to a max of 1."""
    h, w, c = shape
    img = np.asarray(v, dtype=np.float64).reshape(h, w, c)
    panels = []
    for part in (np.maximum(img, 0.0), np.maximum(-img, 0.0)):
        peak = part.reshape(-1, c).max(axis=0)
        panels.append(part / np.where(peak > 0, peak, 1.0))
    return panels[0], panels[1]


def export_signal_ppm(path, v: np.ndarray, shape) -> None:
    """Positive part on the left, negative part on the right, 1-pixel black gap."""
    h, w, c = shape
    pos, neg = signal_panels(v, shape)
    canvas = np.zeros((h, 2 * w + 1, c))
    canvas[:, :w] = pos
    canvas[:, w + 1 :] = neg
    write_ppm(path, canvas, (h, 2 * w + 1, c))
