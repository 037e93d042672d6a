"""Evaluation for imbalanced binary classifiers.

ROC AUC uses the rank (Mann-Whitney) formulation with ties counted half.
Average precision is the non-interpolated step integral with tied scores
handled as one group, so constant scores give exactly the prevalence.
Calibrated AP rescales the precision at each threshold to a target
prevalence.  Uncertainty comes from a stratified bootstrap; model
comparisons use a one-sided paired score-swap permutation test; settings
are ranked by summed average ranks across every (metric, horizon) cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, UndefinedMetric


def _check_scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ContractViolation("scores and labels must be 1D and aligned")
    if s.size == 0:
        raise ContractViolation("empty score set")
    if not np.all(np.isfinite(s)):
        raise ContractViolation("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted half."""
    s, y = _check_scores_labels(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetric("ROC AUC needs both classes present")
    ranks = _average_ranks(s)
    num = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return num / (n0 * n1)


def _tie_groups(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) after each distinct score, descending."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    ends = np.append(boundaries, s_sorted.size - 1)
    tp = np.cumsum(y_sorted)[ends].astype(np.float64)
    fp = (ends + 1.0) - tp
    return tp, fp


def average_precision(scores, labels) -> float:
    """Non-interpolated AP; tied scores form a single threshold group."""
    s, y = _check_scores_labels(scores, labels)
    p = int(y.sum())
    if p == 0 or p == y.size:
        raise UndefinedMetric("average precision needs both classes present")
    tp, fp = _tie_groups(s, y)
    precision = tp / (tp + fp)
    recall = tp / p
    delta = np.diff(np.concatenate([[0.0], recall]))
    return float((delta * precision).sum())


def calibrated_ap(scores, labels, target_prevalence: float) -> float:
    """AP with precision recalibrated to a target prevalence.

    At each threshold, precision is replaced by
    TPR*pi / (TPR*pi + FPR*(1-pi)); a 0/0 ratio contributes 0.
    """
    if not (0.0 < target_prevalence < 1.0):
        raise ContractViolation("target prevalence must lie in (0, 1)")
    s, y = _check_scores_labels(scores, labels)
    p = int(y.sum())
    n = y.size - p
    if p == 0 or n == 0:
        raise UndefinedMetric("calibrated AP needs both classes present")
    tp, fp = _tie_groups(s, y)
    tpr = tp / p
    fpr = fp / n
    pi = target_prevalence
    denom = tpr * pi + fpr * (1.0 - pi)
    prec = np.divide(tpr * pi, denom, out=np.zeros_like(denom), where=denom > 0)
    delta = np.diff(np.concatenate([[0.0], tpr]))
    return float((delta * prec).sum())


METRICS = {
    "roc_auc": roc_auc,
    "average_precision": average_precision,
}


@dataclass
class MetricEstimate:
    point: float
    boot_mean: float
    boot_se: float
    n_boot: int
    samples: np.ndarray | None = None


def stratified_bootstrap(metric_fn, scores, labels, n_boot: int = 1000, seed: int = 0,
                         keep_samples: bool = False) -> MetricEstimate:
    """Bootstrap that resamples within each class, preserving class counts.

    Iteration i uses its own generator seeded from (seed, i), so any prefix
    of the replicate stream is reproducible independently of n_boot.
    """
    if n_boot < 2:
        raise ContractViolation("need at least 2 bootstrap iterations")
    s, y = _check_scores_labels(scores, labels)
    idx0 = np.nonzero(y == 0)[0]
    idx1 = np.nonzero(y == 1)[0]
    if idx0.size == 0 or idx1.size == 0:
        raise UndefinedMetric("stratified bootstrap needs both classes present")
    point = float(metric_fn(s, y))
    vals = np.empty(n_boot)
    for i in range(n_boot):
        rng = np.random.default_rng([seed, i])
        take0 = idx0[rng.integers(0, idx0.size, size=idx0.size)]
        take1 = idx1[rng.integers(0, idx1.size, size=idx1.size)]
        take = np.concatenate([take0, take1])
        vals[i] = metric_fn(s[take], y[take])
    return MetricEstimate(
        point=point,
        boot_mean=float(vals.mean()),
        boot_se=float(vals.std(ddof=1)),
        n_boot=n_boot,
        samples=vals if keep_samples else None,
    )


@dataclass
class PermutationResult:
    delta: float
    p_value: float
    n_used: int
    exact: bool


def paired_permutation_test(metric_fn, scores_a, scores_b, labels, n_iter: int = 1000,
                            seed: int = 0, exhaustive_limit: int = 12) -> PermutationResult:
    """One-sided paired test of H1: metric(A) > metric(B).

    The null swaps the two models' scores per subject.  With at most
    ``exhaustive_limit`` subjects all 2^n swap patterns are enumerated and
    the p-value is the exact null fraction with delta* >= delta; otherwise
    n_iter patterns are sampled and the add-one-smoothed estimate
    (1 + hits) / (n_iter + 1) is returned.
    """
    sa, y = _check_scores_labels(scores_a, labels)
    sb, y2 = _check_scores_labels(scores_b, labels)
    if sa.shape != sb.shape or not np.array_equal(y, y2):
        raise ContractViolation("paired test needs aligned scores and labels")
    n = sa.size
    delta = float(metric_fn(sa, y) - metric_fn(sb, y))

    def swapped_delta(mask: np.ndarray) -> float:
        pa = np.where(mask, sb, sa)
        pb = np.where(mask, sa, sb)
        return float(metric_fn(pa, y) - metric_fn(pb, y))

    if n <= exhaustive_limit:
        hits = 0
        total = 1 << n
        for bits in range(total):
            mask = np.array([(bits >> k) & 1 for k in range(n)], dtype=bool)
            if swapped_delta(mask) >= delta:
                hits += 1
        return PermutationResult(delta, hits / total, total, True)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_iter):
        mask = rng.random(n) < 0.5
        if swapped_delta(mask) >= delta:
            hits += 1
    return PermutationResult(delta, (1 + hits) / (n_iter + 1), n_iter, False)


# ---------------------------------------------------------------------------
# rank aggregation across metrics and horizons
# ---------------------------------------------------------------------------


@dataclass
class RankingTable:
    """values[setting][metric] is a list over horizons (higher is better)."""

    settings: tuple
    metrics: tuple
    horizons: tuple
    values: dict

    def __post_init__(self):
        for s in self.settings:
            if s not in self.values:
                raise ContractViolation(f"missing values for setting {s!r}")
            for m in self.metrics:
                vals = self.values[s].get(m)
                if vals is None or len(vals) != len(self.horizons):
                    raise ContractViolation(f"setting {s!r} metric {m!r} has wrong length")


@dataclass
class RankingResult:
    winner: str
    totals: dict
    tied: bool
    cell_ranks: dict = field(default_factory=dict)


def rank_settings(table: RankingTable) -> RankingResult:
    """Average-rank aggregation: rank settings per (metric, horizon) cell
    (1 is best, ties averaged), sum ranks, and pick the argmin.

    A tie on the total is broken lexicographically by setting name and
    flagged in the result.
    """
    totals = {s: 0.0 for s in table.settings}
    cell_ranks = {}
    for m in table.metrics:
        for h_idx, h in enumerate(table.horizons):
            col = np.array([table.values[s][m][h_idx] for s in table.settings], dtype=np.float64)
            if not np.all(np.isfinite(col)):
                raise ContractViolation(f"non-finite value in cell ({m}, {h})")
            ranks = _average_ranks(-col)  # descending: highest value gets rank 1
            for s, r in zip(table.settings, ranks):
                totals[s] += float(r)
                cell_ranks[(s, m, h)] = float(r)
    best_total = min(totals.values())
    winners = sorted(s for s, t in totals.items() if t == best_total)
    return RankingResult(winners[0], totals, len(winners) > 1, cell_ranks)


# Published fusion comparison: ROC AUC and AP per setting at the five
# prediction horizons (12, 24, 36, 48, 96 months).  F8 wins the aggregate.
FUSION_TABLE_HORIZONS = (12, 24, 36, 48, 96)
FUSION_TABLE = {
    "F1": {"roc_auc": [0.76, 0.72, 0.70, 0.74, 0.77],
           "average_precision": [0.11, 0.15, 0.23, 0.29, 0.56]},
    "F2": {"roc_auc": [0.71, 0.71, 0.68, 0.69, 0.77],
           "average_precision": [0.10, 0.13, 0.18, 0.28, 0.54]},
    "F3": {"roc_auc": [0.61, 0.68, 0.66, 0.71, 0.76],
           "average_precision": [0.09, 0.13, 0.20, 0.27, 0.53]},
    "F4": {"roc_auc": [0.74, 0.74, 0.70, 0.71, 0.76],
           "average_precision": [0.12, 0.16, 0.20, 0.27, 0.55]},
    "F5": {"roc_auc": [0.72, 0.74, 0.72, 0.73, 0.76],
           "average_precision": [0.12, 0.16, 0.24, 0.28, 0.54]},
    "F6": {"roc_auc": [0.71, 0.73, 0.71, 0.72, 0.75],
           "average_precision": [0.13, 0.15, 0.21, 0.26, 0.53]},
    "F7": {"roc_auc": [0.75, 0.73, 0.70, 0.73, 0.77],
           "average_precision": [0.12, 0.15, 0.24, 0.29, 0.54]},
    "F8": {"roc_auc": [0.76, 0.75, 0.70, 0.73, 0.77],
           "average_precision": [0.13, 0.16, 0.22, 0.27, 0.57]},
    "F9": {"roc_auc": [0.70, 0.73, 0.69, 0.71, 0.76],
           "average_precision": [0.10, 0.13, 0.19, 0.28, 0.54]},
    "U": {"roc_auc": [0.71, 0.73, 0.70, 0.72, 0.76],
          "average_precision": [0.10, 0.15, 0.23, 0.26, 0.55]},
}


def reference_ranking_table() -> RankingTable:
    settings = tuple(sorted(FUSION_TABLE))
    return RankingTable(
        settings=settings,
        metrics=("roc_auc", "average_precision"),
        horizons=FUSION_TABLE_HORIZONS,
        values=FUSION_TABLE,
    )


# ---------------------------------------------------------------------------
# subgroup reporting
# ---------------------------------------------------------------------------


def _trauma_group(record) -> str:
    if record.prior_surgery:
        return "prior_surgery"
    if record.prior_injury:
        return "injury_no_surgery"
    return "no_trauma"


def _klg_group(record) -> str | None:
    grade = record.klg_by_visit[0]
    if grade in (0, 1):
        return "klg_0_1"
    if grade == 2:
        return "klg_2"
    if grade == 3:
        return "klg_3"
    return None  # baseline grade 4 knees are not reported per stratum


def _womac_group(record) -> str:
    return "symptomatic" if record.womac_total > 10.0 else "asymptomatic"


SUBGROUP_FAMILIES = {
    "trauma": _trauma_group,
    "baseline_klg": _klg_group,
    "symptoms": _womac_group,
}


def subgroup_report(records: dict, per_horizon: dict) -> dict:
    """Average per-horizon metrics inside clinically defined subgroups.

    ``per_horizon`` maps horizon -> (ids, scores, labels); only subjects
    scored at every horizon are used, so each subgroup averages the same
    subjects across horizons.  A metric is None when any horizon lacks both
    classes inside the subgroup.
    """
    if not per_horizon:
        raise ContractViolation("need at least one horizon")
    horizons = sorted(per_horizon)
    common = None
    tables = {}
    for h in horizons:
        ids, scores, labels = per_horizon[h]
        if len(ids) != len(scores) or len(ids) != len(labels):
            raise ContractViolation(f"misaligned entries for horizon {h}")
        tables[h] = {i: (float(s), int(l)) for i, s, l in zip(ids, scores, labels)}
        common = set(ids) if common is None else common & set(ids)
    common = sorted(common)
    if not common:
        raise ContractViolation("no subject is scored at every horizon")
    report = {}
    for family, assign in SUBGROUP_FAMILIES.items():
        groups = {}
        for i in common:
            g = assign(records[i])
            if g is not None:
                groups.setdefault(g, []).append(i)
        report[family] = {}
        for g, members in sorted(groups.items()):
            entry = {"n": len(members)}
            for mname, mfn in METRICS.items():
                per_h = []
                for h in horizons:
                    s = np.array([tables[h][i][0] for i in members])
                    y = np.array([tables[h][i][1] for i in members])
                    try:
                        per_h.append(mfn(s, y))
                    except UndefinedMetric:
                        per_h = None
                        break
                entry[mname] = float(np.mean(per_h)) if per_h is not None else None
            report[family][g] = entry
    return report
