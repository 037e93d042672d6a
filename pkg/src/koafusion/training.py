"""Training protocol: focal loss, warmup Adam, oversampling, CV ensembling.

One model is trained per cross-validation fold on minority-oversampled
batches; the checkpoint with the best validation average precision is kept
per fold, and fold models are ensembled at inference time by averaging
softmax outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractViolation
from .evaluation import average_precision
from .models import ArchSpec, Model, build_model, forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs_budget: int = 60
    lr_start: float = 1e-5
    lr_peak: float = 1e-4
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    focal_gamma: float = 2.0
    batch_size: int | None = None  # None: 16 with >= 2 MRI inputs, else 32
    oversample: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs_budget < 0 or self.warmup_epochs < 0:
            raise ContractViolation("epoch counts must be non-negative")
        if self.lr_start <= 0 or self.lr_peak <= 0 or self.lr_start > self.lr_peak:
            raise ContractViolation("need 0 < lr_start <= lr_peak")
        if self.focal_gamma < 0:
            raise ContractViolation("focal_gamma must be non-negative")

    def resolved_batch_size(self, spec: ArchSpec) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if len(spec.mri_protocols) >= 2 else 32


def focal_loss(logits: Tensor, targets, gamma: float) -> Tensor:
    """Mean focal loss over a batch; gamma (kappa) 0 reduces to cross-entropy."""
    y = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ContractViolation("focal_loss expects [B, K] logits and [B] targets")
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise ContractViolation("target outside the class range")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(y.size), y] = 1.0
    log_p = dc.tensor_sum(dc.log_softmax(logits) * Tensor(onehot), axis=1)
    weight = (Tensor(1.0) - dc.exp(log_p)) ** gamma
    return dc.mean(weight * log_p) * Tensor(-1.0)


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then constant."""
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.lr_start + (config.lr_peak - config.lr_start) * frac
    return config.lr_peak


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v.data) for k, v in params.items()},
            v={k: np.zeros_like(v.data) for k, v in params.items()},
        )


def adam_step(params: dict, state: AdamState, lr: float, weight_decay: float):
    """Classic Adam update; L2 decay is added to the gradient (coupled)."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g + weight_decay * p.data
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p.grad = None


def oversample_minority(ids, labels, rng: np.random.Generator) -> list:
    """Return a shuffled epoch order with classes balanced exactly 1:1.

    The minority class is tiled to the majority count; the remainder after
    whole copies is drawn without replacement.
    """
    ids = list(ids)
    y = np.array([labels[i] for i in ids])
    classes, counts = np.unique(y, return_counts=True)
    if classes.size == 1:
        raise ContractViolation("oversampling requires both classes present")
    order = []
    if counts.size == 2 and counts[0] != counts[1]:
        maj = int(classes[np.argmax(counts)])
        mino = int(classes[np.argmin(counts)])
        maj_ids = [i for i in ids if labels[i] == maj]
        min_ids = [i for i in ids if labels[i] == mino]
        reps, rem = divmod(len(maj_ids), len(min_ids))
        pool = min_ids * reps
        if rem:
            extra = rng.choice(len(min_ids), size=rem, replace=False)
            pool += [min_ids[int(j)] for j in extra]
        order = maj_ids + pool
    else:
        order = ids
    perm = rng.permutation(len(order))
    return [order[int(j)] for j in perm]


@dataclass
class FoldResult:
    best_params: dict
    best_epoch: int
    best_val_ap: float
    history: list = field(default_factory=list)


@dataclass
class CvResult:
    spec: ArchSpec
    config: TrainConfig
    folds: list

    def fold_models(self) -> list:
        models = []
        for fold in self.folds:
            model = build_model(self.spec, seed=0)
            for name, arr in fold.best_params.items():
                model.params[name].data = arr.copy()
                model.params[name].grad = None
            models.append(model)
        return models


def predict_scores(models, provider, ids, mode: str = "eval", chunk: int = 32, clinical_stats=None) -> np.ndarray:
    """Ensembled class-1 probabilities: softmax outputs averaged over models."""
    if isinstance(models, Model):
        models = [models]
    scores = np.zeros(len(ids))
    for lo in range(0, len(ids), chunk):
        sub = ids[lo : lo + chunk]
        batch, _ = provider.batch(sub, mode=mode, rng=None, clinical_stats=clinical_stats)
        acc = np.zeros(len(sub))
        for model in models:
            logits = forward(model, batch, mode="eval")
            acc += dc.softmax(logits, axis=-1).data[:, 1]
        scores[lo : lo + len(sub)] = acc / len(models)
    return scores


def _snapshot(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def train_fold(provider, train_ids, val_ids, spec: ArchSpec, config: TrainConfig, fold_index: int) -> FoldResult:
    """Train one fold; keeps the best validation-AP checkpoint."""
    init_seed = int(np.random.SeedSequence((config.seed, fold_index)).generate_state(1)[0])
    model = build_model(spec, seed=init_seed)
    state = AdamState.init(model.params)
    labels = provider.labels_map(train_ids)
    clinical_stats = provider.clinical_stats(train_ids)
    batch_size = config.resolved_batch_size(spec)
    history = []
    best = FoldResult(_snapshot(model.params), -1, -np.inf, history)
    for epoch in range(config.epochs_budget):
        erng = np.random.default_rng([config.seed, fold_index, epoch])
        if config.oversample:
            order = oversample_minority(train_ids, labels, erng)
        else:
            perm = erng.permutation(len(train_ids))
            order = [train_ids[int(j)] for j in perm]
        n_steps = (len(order) + batch_size - 1) // batch_size
        losses = []
        for step in range(n_steps):
            sub = order[step * batch_size : (step + 1) * batch_size]
            lr = lr_at(epoch + step / n_steps, config)
            batch, targets = provider.batch(sub, mode="train", rng=erng, clinical_stats=clinical_stats)
            for p in model.params.values():
                p.grad = None
            logits = forward(model, batch, mode="train", seed=int(erng.integers(2**31)))
            loss = focal_loss(logits, targets, config.focal_gamma)
            loss.backward()
            adam_step(model.params, state, lr, config.weight_decay)
            losses.append(loss.item())
        val_scores = predict_scores(model, provider, val_ids, clinical_stats=clinical_stats)
        val_ap = average_precision(val_scores, provider.labels_array(val_ids))
        if val_ap > best.best_val_ap:
            best = FoldResult(_snapshot(model.params), epoch, float(val_ap), history)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_ap": float(val_ap)}
        )
    return best


def train_cv(provider, split, spec: ArchSpec, config: TrainConfig) -> CvResult:
    """Train one model per fold of a split plan."""
    folds = []
    for fold_index, (train_ids, val_ids) in enumerate(split.folds):
        folds.append(train_fold(provider, train_ids, val_ids, spec, config, fold_index))
    return CvResult(spec, config, folds)
