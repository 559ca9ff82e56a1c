from typing import Any, Dict, Optional
import json

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from core.evaluation import Comparison, EvalReport
from utils.logger import setup_logger

logger = setup_logger(__name__)

AVERAGE_ROW = 'Average'
BASE_COLUMNS = ['condition', 'f1', 'ci_lo', 'ci_hi']
IMPROVEMENT_COLUMNS = ['improvement', 'improvement_lo', 'improvement_hi']


class FinalEvaluationReport(BaseModel):
    """Evaluation output document"""
    evaluation: Dict[str, Any] = Field(description="per-condition scores, CIs, macro, config echo, exclusion counts")
    comparison: Optional[Dict[str, Any]] = Field(default=None, description="paired comparison against another labeler")
    label: str = Field(default='', description="name of the evaluated labeler")


def _interval(ci) -> tuple:
    return (ci[0], ci[1]) if ci is not None else (np.nan, np.nan)


def per_condition_report(evaluation: EvalReport, comparison: Optional[Comparison] = None) -> pd.DataFrame:
    """
    One row per condition plus the Average row

    Args:
        evaluation: Scores of the labeler
        comparison: Optional paired comparison; adds the improvement columns and
            sorts the condition rows by improvement, largest first

    Returns:
        DataFrame with columns condition, f1, ci_lo, ci_hi and, with a
        comparison, improvement, improvement_lo, improvement_hi
    """
    diffs = {}
    if comparison is not None:
        diffs = {diff.condition: diff for diff in comparison.per_condition_diffs}

    rows = []
    for score in evaluation.per_condition:
        lo, hi = _interval(score.ci)
        row = {
            'condition': score.condition,
            'f1': score.weighted_f1 if score.weighted_f1 is not None else np.nan,
            'ci_lo': lo,
            'ci_hi': hi,
        }
        if comparison is not None:
            diff = diffs.get(score.condition)
            imp_lo, imp_hi = _interval(diff.ci if diff else None)
            row['improvement'] = diff.mean_diff if diff and diff.mean_diff is not None else np.nan
            row['improvement_lo'] = imp_lo
            row['improvement_hi'] = imp_hi
        rows.append(row)

    columns = BASE_COLUMNS + (IMPROVEMENT_COLUMNS if comparison is not None else [])
    table = pd.DataFrame(rows, columns=columns)
    if comparison is not None:
        # Stable sort; conditions without a defined difference go last
        table = table.sort_values('improvement', ascending=False, kind='mergesort', na_position='last')

    lo, hi = _interval(evaluation.macro_ci)
    average = {'condition': AVERAGE_ROW, 'f1': evaluation.macro_f1, 'ci_lo': lo, 'ci_hi': hi}
    if comparison is not None:
        average['improvement'] = comparison.mean_diff
        average['improvement_lo'], average['improvement_hi'] = comparison.ci
    table = pd.concat([table, pd.DataFrame([average], columns=columns)], ignore_index=True)
    for column in columns[1:]:
        table[column] = table[column].astype(np.float64)
    return table


def write_report_csv(table: pd.DataFrame, path: str) -> None:
    table.to_csv(path, index=False, encoding='utf-8')
    logger.info(f"Per-condition table written to {path}")


def read_report_csv(path: str) -> pd.DataFrame:
    table = pd.read_csv(path, encoding='utf-8', float_precision='round_trip')
    for column in table.columns[1:]:
        table[column] = table[column].astype(np.float64)
    return table


def _format_score(value: float, lo: float, hi: float) -> str:
    if np.isnan(value):
        return '-'
    if np.isnan(lo) or np.isnan(hi):
        return f"{value:.3f}"
    return f"{value:.3f} ({lo:.3f}, {hi:.3f})"


def render_report_text(table: pd.DataFrame) -> str:
    """Human-readable rendering: value (lo, hi) per cell"""
    rendered = pd.DataFrame({'Condition': table['condition']})
    rendered['F1'] = [_format_score(*row) for row in table[['f1', 'ci_lo', 'ci_hi']].itertuples(index=False)]
    if 'improvement' in table.columns:
        rendered['Improvement'] = [
            _format_score(*row)
            for row in table[IMPROVEMENT_COLUMNS].itertuples(index=False)
        ]
    return rendered.to_string(index=False)


def write_evaluation_json(path: str,
                          evaluation: EvalReport,
                          comparison: Optional[Comparison] = None,
                          label: str = '') -> Dict[str, Any]:
    """
    Write the evaluation JSON document

    Returns:
        The document as a dict
    """
    report = FinalEvaluationReport(
        evaluation=evaluation.model_dump(),
        comparison=comparison.model_dump() if comparison is not None else None,
        label=label,
    )
    report_dict = report.model_dump()
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report_dict, f, indent=2, ensure_ascii=False)
    logger.info(f"Evaluation report written to {path}: macro F1 {evaluation.macro_f1:.4f}")
    return report_dict
