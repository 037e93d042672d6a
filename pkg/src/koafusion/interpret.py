"""Input-ablation attribution over modalities.

The importance of a modality for one subject is the drop in the predicted
probability of the subject's true class when that modality is replaced by
its training-set mean.  Relative usage ratios (RUR) clamp negative drops to
zero and normalize per subject; a subject whose drops are all zero gets the
uniform ratio over modalities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import diffcore as dc
from .errors import ContractViolation
from .models import ModalityBatch, forward


def _ensemble_true_class_prob(models, batch: ModalityBatch, targets) -> np.ndarray:
    y = np.asarray(targets, dtype=np.int64)
    probs = np.zeros(y.size)
    for model in models:
        p1 = dc.softmax(forward(model, batch, mode="eval"), axis=-1).data[:, 1]
        probs += np.where(y == 1, p1, 1.0 - p1)
    return probs / len(models)


def modality_drops(models, batch: ModalityBatch, targets, modality: str) -> np.ndarray:
    """Per-subject drop in true-class probability when masking one modality."""
    if isinstance(models, (list, tuple)):
        models = list(models)
    else:
        models = [models]
    if modality in batch.masked:
        raise ContractViolation(f"modality {modality!r} is already masked")
    base = _ensemble_true_class_prob(models, batch, targets)
    masked_batch = dc_replace(batch, masked=frozenset(batch.masked | {modality}))
    masked = _ensemble_true_class_prob(models, masked_batch, targets)
    return base - masked


def compute_rur(drops: np.ndarray) -> np.ndarray:
    """Normalize per-subject drops [B, M] into usage ratios summing to one.

    Negative drops clamp to zero; an all-zero row falls back to the uniform
    ratio 1/M.
    """
    d = np.asarray(drops, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] == 0:
        raise ContractViolation("drops must be [n_subjects, n_modalities]")
    clamped = np.maximum(d, 0.0)
    sums = clamped.sum(axis=1, keepdims=True)
    uniform = np.full_like(clamped, 1.0 / d.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(sums > 0, clamped / np.where(sums > 0, sums, 1.0), uniform)
    return ratios


@dataclass
class RurReport:
    modalities: tuple
    per_subject: np.ndarray  # [B, M] ratios
    mean: np.ndarray  # [M]
    drops: np.ndarray  # [B, M] raw probability drops


def rur_report(models, batch: ModalityBatch, targets, modalities) -> RurReport:
    """Ablate each modality in turn and summarize usage ratios."""
    modalities = tuple(modalities)
    if not modalities:
        raise ContractViolation("need at least one modality to ablate")
    cols = [modality_drops(models, batch, targets, m) for m in modalities]
    drops = np.stack(cols, axis=1)
    ratios = compute_rur(drops)
    return RurReport(modalities, ratios, ratios.mean(axis=0), drops)
