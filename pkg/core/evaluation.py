"""
Labeler evaluation

Per condition, three retrieval tasks (positive, negative, uncertain) are scored
with binary F1 and combined into a support-weighted F1; the macro F1 is the
plain mean over conditions. Confidence intervals come from a percentile
bootstrap over whole reports, and two labelers are compared with paired
differences on shared resamples.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from decimal import Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config.settings import ALPHA, DEFAULT_SEED, N_BOOTSTRAP
from core.errors import AlignmentError, AllUndefinedError, LengthError, SizeError
from core.label_schema import CONDITIONS, LABEL_CLASSES, RETRIEVAL_TASKS, Condition, LabelClass, LabelVector
from utils.logger import setup_logger

logger = setup_logger(__name__)

# Layout of the per-report count tensor: (report, condition, task, counter)
_TP, _FP, _FN = 0, 1, 2
_TASK_KEYS = [task.name.lower() for task in RETRIEVAL_TASKS]

Interval = Tuple[float, float]


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    n_bootstrap: int = Field(N_BOOTSTRAP, ge=1)
    alpha: float = Field(ALPHA, gt=0, lt=1)
    seed: int = DEFAULT_SEED
    # Threads computing replicates; results do not depend on it
    n_workers: int = Field(1, ge=1)


class TaskScore(BaseModel):
    f1: Optional[float] = None
    support: int = 0


class ConditionScore(BaseModel):
    condition: str
    tasks: Dict[str, TaskScore]
    weighted_f1: Optional[float] = None
    ci: Optional[Interval] = None


class EvalReport(BaseModel):
    per_condition: List[ConditionScore]
    macro_f1: float
    macro_ci: Optional[Interval] = None
    n_excluded: int = 0
    excluded: List[str] = []
    n_reports: int = 0
    dropped_replicates: int = 0
    config: Optional[EvalConfig] = None


class ConditionDiff(BaseModel):
    condition: str
    mean_diff: Optional[float] = None
    ci: Optional[Interval] = None


class Comparison(BaseModel):
    mean_diff: float
    ci: Interval
    p_value_two_sided: float
    per_condition_diffs: List[ConditionDiff]
    # Gold class -> (a right, b wrong) minus (b right, a wrong)
    correct_count_diffs: Dict[str, int]
    correct_count_by_condition: Dict[str, Dict[str, int]]
    n_bootstrap: int
    dropped_replicates: int = 0


class BootstrapResult(BaseModel):
    point: float
    lo: float
    hi: float
    replicates: List[float]
    dropped: int = 0


def _as_index_array(labels: Sequence) -> np.ndarray:
    return np.asarray([int(label) for label in labels], dtype=np.int64)


def _f1(tp, fp, fn):
    """2TP / (2TP+FP+FN) elementwise; NaN where the denominator is 0"""
    tp = np.asarray(tp, dtype=np.float64)
    denom = 2 * tp + np.asarray(fp, dtype=np.float64) + np.asarray(fn, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), np.nan)


def _weighted(f1: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Support-weighted F1 over the last (task) axis; NaN where every support is 0"""
    num = np.zeros(f1.shape[:-1], dtype=np.float64)
    den = np.zeros(f1.shape[:-1], dtype=np.float64)
    # Accumulate task by task so the sum order is fixed
    for t in range(f1.shape[-1]):
        use = (support[..., t] > 0) & ~np.isnan(f1[..., t])
        num = num + np.where(use, support[..., t] * np.nan_to_num(f1[..., t]), 0.0)
        den = den + np.where(use, support[..., t], 0.0)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def _nanmean_rows(values: np.ndarray) -> np.ndarray:
    defined = ~np.isnan(values)
    counts = defined.sum(axis=-1)
    sums = np.where(defined, values, 0.0).sum(axis=-1)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(counts > 0, sums / np.where(counts > 0, counts, 1), np.nan)


def binary_f1(preds: Sequence[LabelClass], gold: Sequence[LabelClass],
              class_of_interest: LabelClass) -> Tuple[Optional[float], int]:
    """
    F1 with one class as the positive class and every other class pooled as negative

    Returns:
        (f1, support); f1 is None when 2TP+FP+FN = 0
    """
    if len(preds) != len(gold):
        raise LengthError(f"{len(preds)} predictions for {len(gold)} gold labels")
    p = _as_index_array(preds) == int(class_of_interest)
    g = _as_index_array(gold) == int(class_of_interest)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    support = tp + fn
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None, support
    return 2 * tp / denom, support


def _label_matrix(vectors: Sequence[LabelVector]) -> np.ndarray:
    """(N, 14) class indices"""
    if not vectors:
        return np.zeros((0, len(CONDITIONS)), dtype=np.int64)
    return np.asarray([vec.to_indices() for vec in vectors], dtype=np.int64)


def _count_tensor(preds: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Per-report TP/FP/FN indicators, shape (N, 14, 3 tasks, 3 counters)"""
    counts = np.zeros(preds.shape + (len(RETRIEVAL_TASKS), 3), dtype=np.int64)
    for t, task in enumerate(RETRIEVAL_TASKS):
        p = preds == int(task)
        g = gold == int(task)
        counts[..., t, _TP] = p & g
        counts[..., t, _FP] = p & ~g
        counts[..., t, _FN] = ~p & g
    return counts


def _scores_from_totals(totals: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Args:
        totals: (..., 14, 3, 3) summed counters

    Returns:
        (task f1 (..., 14, 3), task support (..., 14, 3), weighted f1 (..., 14))
    """
    tp, fp, fn = totals[..., _TP], totals[..., _FP], totals[..., _FN]
    f1 = _f1(tp, fp, fn)
    support = tp + fn
    return f1, support, _weighted(f1, support)


def _check_aligned(preds: Sequence[LabelVector], gold: Sequence[LabelVector]) -> None:
    if len(preds) != len(gold):
        raise LengthError(f"{len(preds)} predicted label vectors for {len(gold)} gold vectors")


def _optional(value) -> Optional[float]:
    return None if value is None or np.isnan(value) else float(value)


def _condition_score(condition: Condition, f1: np.ndarray, support: np.ndarray, weighted: float,
                     ci: Optional[Interval] = None) -> ConditionScore:
    tasks = {
        key: TaskScore(f1=_optional(f1[t]), support=int(support[t]))
        for t, key in enumerate(_TASK_KEYS)
    }
    return ConditionScore(condition=condition.value, tasks=tasks, weighted_f1=_optional(weighted), ci=ci)


def weighted_f1_condition(preds: Sequence[LabelVector], gold: Sequence[LabelVector],
                          condition: Condition) -> ConditionScore:
    """Support-weighted F1 of one condition over the positive/negative/uncertain tasks"""
    _check_aligned(preds, gold)
    c = condition.index
    totals = _count_tensor(_label_matrix(preds)[:, c], _label_matrix(gold)[:, c]).sum(axis=0)
    f1, support, weighted = _scores_from_totals(totals)
    return _condition_score(condition, f1, support, float(weighted))


def macro_f1(per_condition: Sequence[ConditionScore]) -> Tuple[float, int]:
    """
    Unweighted mean over conditions with a defined weighted F1

    Returns:
        (macro f1, number of excluded conditions)
    """
    defined = [score.weighted_f1 for score in per_condition if score.weighted_f1 is not None]
    if not defined:
        raise AllUndefinedError("No condition has a defined weighted F1")
    return sum(defined) / len(defined), len(per_condition) - len(defined)


def _quantile_rank(q: float, n: int) -> int:
    """Nearest rank (1-based) of quantile q among n sorted values"""
    rank = math.ceil(Decimal(str(q)) * n)
    return min(max(rank, 1), n)


def percentile_interval(replicates: Sequence[float], alpha: float) -> Interval:
    """Nearest-rank alpha/2 and 1-alpha/2 quantiles; both are order statistics of the replicates"""
    ordered = sorted(replicates)
    n = len(ordered)
    if n == 0:
        raise AllUndefinedError("Every bootstrap replicate was undefined")
    return ordered[_quantile_rank(alpha / 2, n) - 1], ordered[_quantile_rank(1 - alpha / 2, n) - 1]


def replicate_indices(n_items: int, replicate: int, seed: int) -> np.ndarray:
    """Report indices of one resample; the generator is seeded from (seed, replicate) only"""
    rng = np.random.default_rng([seed, replicate])
    return rng.integers(0, n_items, size=n_items)


def _run_replicates(fn: Callable[[int], object], cfg: EvalConfig) -> List:
    if cfg.n_workers == 1:
        return [fn(b) for b in range(cfg.n_bootstrap)]
    with ThreadPoolExecutor(max_workers=cfg.n_workers) as executor:
        return list(executor.map(fn, range(cfg.n_bootstrap)))


def bootstrap_ci(statistic: Callable[[np.ndarray], Optional[float]], n_items: int,
                 cfg: Optional[EvalConfig] = None) -> BootstrapResult:
    """
    Percentile bootstrap with reports as the resampling unit

    Args:
        statistic: Function of an index array into the report sample; None or NaN means undefined
        n_items: Number of reports
        cfg: Evaluation config

    Returns:
        BootstrapResult with the point estimate on the full sample and the
        replicate statistics; undefined replicates are dropped and counted
    """
    cfg = cfg or EvalConfig()
    if n_items < 2:
        raise SizeError(f"Bootstrap needs at least 2 reports, got {n_items}")
    point = _optional(statistic(np.arange(n_items)))
    if point is None:
        raise AllUndefinedError("Statistic is undefined on the full sample")

    raw = _run_replicates(lambda b: statistic(replicate_indices(n_items, b, cfg.seed)), cfg)
    replicates = [float(value) for value in raw if _optional(value) is not None]
    dropped = len(raw) - len(replicates)
    if dropped:
        logger.warning(f"{dropped} of {len(raw)} bootstrap replicates were undefined and dropped")
    lo, hi = percentile_interval(replicates, cfg.alpha)
    return BootstrapResult(point=point, lo=lo, hi=hi, replicates=replicates, dropped=dropped)


def _replicate_totals(counts: np.ndarray, cfg: EvalConfig) -> np.ndarray:
    """Summed counters of every replicate, shape (n_bootstrap, 14, 3, 3)"""
    n_items = counts.shape[0]
    flat = counts.reshape(n_items, -1)

    def one(b: int) -> np.ndarray:
        weights = np.bincount(replicate_indices(n_items, b, cfg.seed), minlength=n_items)
        return weights @ flat

    totals = np.stack(_run_replicates(one, cfg))
    return totals.reshape((cfg.n_bootstrap,) + counts.shape[1:])


def evaluate(preds: Sequence[LabelVector], gold: Sequence[LabelVector],
             cfg: Optional[EvalConfig] = None, with_ci: bool = True) -> EvalReport:
    """
    Per-condition weighted F1 and macro F1, with bootstrap CIs when with_ci

    The per-condition CIs and the macro CI come from the same resamples.
    """
    cfg = cfg or EvalConfig()
    _check_aligned(preds, gold)
    counts = _count_tensor(_label_matrix(preds), _label_matrix(gold))
    f1, support, weighted = _scores_from_totals(counts.sum(axis=0))
    scores = [_condition_score(condition, f1[c], support[c], float(weighted[c]))
              for c, condition in enumerate(CONDITIONS)]
    macro, n_excluded = macro_f1(scores)
    excluded = [score.condition for score in scores if score.weighted_f1 is None]
    if excluded:
        logger.info(f"Excluded {n_excluded} conditions with undefined F1 from the macro average: {excluded}")

    macro_ci = None
    dropped = 0
    if with_ci:
        if len(preds) < 2:
            raise SizeError(f"Bootstrap needs at least 2 reports, got {len(preds)}")
        _, _, rep_weighted = _scores_from_totals(_replicate_totals(counts, cfg))
        rep_macro = _nanmean_rows(rep_weighted)
        defined = rep_macro[~np.isnan(rep_macro)]
        dropped = int(cfg.n_bootstrap - defined.size)
        if dropped:
            logger.warning(f"{dropped} of {cfg.n_bootstrap} replicates had no defined condition and were dropped")
        macro_ci = percentile_interval(defined.tolist(), cfg.alpha)
        for c, score in enumerate(scores):
            column = rep_weighted[:, c]
            column = column[~np.isnan(column)]
            if score.weighted_f1 is not None and column.size:
                score.ci = percentile_interval(column.tolist(), cfg.alpha)

    return EvalReport(
        per_condition=scores,
        macro_f1=macro,
        macro_ci=macro_ci,
        n_excluded=n_excluded,
        excluded=excluded,
        n_reports=len(preds),
        dropped_replicates=dropped,
        config=cfg if with_ci else None,
    )


def correct_count_diffs(preds_a: Sequence[LabelVector], preds_b: Sequence[LabelVector],
                        gold: Sequence[LabelVector]) -> Tuple[Dict[str, int], Dict[str, Dict[str, int]]]:
    """
    Per gold class, count of cells (report, condition) where a is right and b
    wrong, minus the count where b is right and a wrong

    Returns:
        (totals by class, the same table per condition)
    """
    a, b, g = _label_matrix(preds_a), _label_matrix(preds_b), _label_matrix(gold)
    delta = (a == g).astype(np.int64) - (b == g).astype(np.int64)
    totals = {}
    by_condition = {condition.value: {} for condition in CONDITIONS}
    for label in LABEL_CLASSES:
        mask = g == int(label)
        per_condition = np.where(mask, delta, 0).sum(axis=0)
        totals[label.label] = int(per_condition.sum())
        for c, condition in enumerate(CONDITIONS):
            by_condition[condition.value][label.label] = int(per_condition[c])
    return totals, by_condition


def compare_models(preds_a: Sequence[LabelVector], preds_b: Sequence[LabelVector],
                   gold: Sequence[LabelVector], cfg: Optional[EvalConfig] = None) -> Comparison:
    """
    Paired bootstrap comparison of labeler a against labeler b

    Every replicate resamples reports once and takes the macro F1 difference
    (a - b) on that shared resample.

    Returns:
        Comparison with mean difference, percentile CI, two-sided p-value,
        per-condition differences and correct-count tables
    """
    cfg = cfg or EvalConfig()
    if not (len(preds_a) == len(preds_b) == len(gold)):
        raise AlignmentError(f"Label sets differ in length: a={len(preds_a)}, b={len(preds_b)}, gold={len(gold)}")
    if len(gold) < 2:
        raise SizeError(f"Bootstrap needs at least 2 reports, got {len(gold)}")

    g = _label_matrix(gold)
    counts_a = _count_tensor(_label_matrix(preds_a), g)
    counts_b = _count_tensor(_label_matrix(preds_b), g)
    _, _, weighted_a = _scores_from_totals(_replicate_totals(counts_a, cfg))
    _, _, weighted_b = _scores_from_totals(_replicate_totals(counts_b, cfg))

    diff = _nanmean_rows(weighted_a) - _nanmean_rows(weighted_b)
    defined = diff[~np.isnan(diff)]
    dropped = int(cfg.n_bootstrap - defined.size)
    if defined.size == 0:
        raise AllUndefinedError("Every paired replicate was undefined")
    if dropped:
        logger.warning(f"{dropped} of {cfg.n_bootstrap} paired replicates were undefined and dropped")

    n = defined.size
    p_value = 2 * min(np.mean(defined <= 0), np.mean(defined >= 0))
    p_value = float(min(max(p_value, 1 / cfg.n_bootstrap), 1.0))

    per_condition = []
    for c, condition in enumerate(CONDITIONS):
        column = weighted_a[:, c] - weighted_b[:, c]
        column = column[~np.isnan(column)]
        if column.size:
            per_condition.append(ConditionDiff(condition=condition.value, mean_diff=float(np.mean(column)),
                                               ci=percentile_interval(column.tolist(), cfg.alpha)))
        else:
            per_condition.append(ConditionDiff(condition=condition.value))

    totals, by_condition = correct_count_diffs(preds_a, preds_b, gold)
    mean_diff = float(np.sum(defined) / n)
    logger.info(f"Paired comparison over {len(gold)} reports: mean diff {mean_diff:.4f}, p={p_value:.4f}")
    return Comparison(
        mean_diff=mean_diff,
        ci=percentile_interval(defined.tolist(), cfg.alpha),
        p_value_two_sided=p_value,
        per_condition_diffs=per_condition,
        correct_count_diffs=totals,
        correct_count_by_condition=by_condition,
        n_bootstrap=cfg.n_bootstrap,
        dropped_replicates=dropped,
    )
