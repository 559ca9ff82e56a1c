"""
Report corpora: loading, whitespace normalization, deduplication, train/dev
splitting and class prevalence
"""

import csv
from decimal import Decimal, ROUND_HALF_UP
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from core.errors import FormatError, SizeError
from core.label_schema import (
    CONDITIONS,
    CONDITION_NAMES,
    LABEL_CLASSES,
    LabelVector,
    encode_label_row,
    parse_label_row,
    validate,
)
from utils.logger import setup_logger

logger = setup_logger(__name__)

# Accepted names for the report text column, in order of preference
TEXT_COLUMNS = ['text', 'Reports', 'Report Impression']
# Patient id of rows that carry none; dedup then compares text alone
UNKNOWN_PATIENT = 'unknown'


class Provenance(str, Enum):
    EXPERT = 'expert'
    AUTOMATIC = 'automatic'
    BACKTRANSLATED = 'backtranslated'


class Split(str, Enum):
    TRAIN = 'train'
    DEV = 'dev'


class Report(BaseModel):
    model_config = ConfigDict(frozen=True)

    report_id: str
    patient_id: str
    text: str


class LabeledReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    report: Report
    labels: LabelVector
    provenance: Provenance = Provenance.EXPERT

    @model_validator(mode='after')
    def _check_labels(self) -> 'LabeledReport':
        validate(self.labels)
        return self

    @property
    def report_id(self) -> str:
        return self.report.report_id


class Dataset(BaseModel):
    """Ordered, immutable collection of labeled reports"""
    model_config = ConfigDict(frozen=True)

    items: Tuple[LabeledReport, ...] = ()
    split: Optional[Dict[str, Split]] = None
    seed: int = 0
    # False when loaded from a CSV without label columns (labels are all blank)
    labeled: bool = True
    # Report ids whose text was empty after normalization
    flagged: Tuple[str, ...] = ()

    @model_validator(mode='after')
    def _check_ids_and_split(self) -> 'Dataset':
        ids = [item.report_id for item in self.items]
        if len(set(ids)) != len(ids):
            seen, duplicates = set(), set()
            for report_id in ids:
                if report_id in seen:
                    duplicates.add(report_id)
                seen.add(report_id)
            raise ValueError(f"Duplicate report ids: {sorted(duplicates)[:5]}")
        if self.split is not None and set(self.split) != set(ids):
            raise ValueError("Split assignment must cover exactly the dataset's report ids")
        return self

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> List[str]:
        return [item.report_id for item in self.items]

    @property
    def texts(self) -> List[str]:
        return [item.report.text for item in self.items]

    @property
    def label_vectors(self) -> List[LabelVector]:
        return [item.labels for item in self.items]

    def subset(self, split: Split) -> 'Dataset':
        """Items of one side of the split, order preserved, split dropped"""
        if self.split is None:
            raise SizeError("Dataset has no train/dev split")
        items = tuple(item for item in self.items if self.split[item.report_id] == Split(split))
        flagged = tuple(report_id for report_id in self.flagged if self.split.get(report_id) == Split(split))
        return Dataset(items=items, seed=self.seed, labeled=self.labeled, flagged=flagged)

    def with_items(self, items: Iterable[LabeledReport]) -> 'Dataset':
        """Same metadata, new items; the split is restricted to the kept ids"""
        items = tuple(items)
        split = None
        if self.split is not None:
            split = {item.report_id: self.split[item.report_id] for item in items}
        kept = {item.report_id for item in items}
        flagged = tuple(report_id for report_id in self.flagged if report_id in kept)
        return Dataset(items=items, split=split, seed=self.seed, labeled=self.labeled, flagged=flagged)


def normalize_text(raw: str) -> str:
    """Replace newlines by spaces, collapse whitespace runs, strip the ends"""
    return ' '.join(raw.split())


def dedup_reports(ds: Dataset) -> Dataset:
    """
    Keep the first item of every (patient_id, normalized text) pair. Rows
    loaded without a patient_id share UNKNOWN_PATIENT, so they match on text alone

    Args:
        ds: Dataset to deduplicate

    Returns:
        Dataset with order preserved
    """
    seen = set()
    kept = []
    for item in ds.items:
        key = (item.report.patient_id, normalize_text(item.report.text))
        if key in seen:
            continue
        seen.add(key)
        kept.append(item)
    if len(kept) != len(ds):
        logger.info(f"Removed {len(ds) - len(kept)} duplicate reports, {len(kept)} remain")
    return ds.with_items(kept)


def exclude_overlap(ds: Dataset, other: Dataset) -> Dataset:
    """Drop every item of ds whose normalized text also occurs in other"""
    excluded = {normalize_text(text) for text in other.texts}
    kept = [item for item in ds.items if normalize_text(item.report.text) not in excluded]
    logger.info(f"Excluded {len(ds) - len(kept)} reports overlapping with a held-out set")
    return ds.with_items(kept)


def train_size(n_items: int, train_fraction: float) -> int:
    """round(train_fraction * n_items), halves rounded up"""
    exact = Decimal(str(train_fraction)) * n_items
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def split_random(ds: Dataset, train_fraction: float, seed: int) -> Dataset:
    """
    Assign every item to train or dev

    Ids are sorted before the seeded permutation, so the assignment depends on
    (ids, fraction, seed) only and not on item order.

    Args:
        ds: Dataset with at least 2 items
        train_fraction: Fraction in (0, 1)
        seed: Random seed

    Returns:
        Dataset with a total split mapping
    """
    if not 0 < train_fraction < 1:
        raise SizeError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_items = len(ds)
    if n_items < 2:
        raise SizeError(f"Need at least 2 items to split, got {n_items}")
    n_train = train_size(n_items, train_fraction)
    if n_train == 0 or n_train == n_items:
        raise SizeError(f"Split of {n_items} items at {train_fraction} leaves one side empty")

    sorted_ids = sorted(ds.ids)
    order = np.random.default_rng(seed).permutation(n_items)
    train_ids = {sorted_ids[i] for i in order[:n_train]}
    split = {report_id: (Split.TRAIN if report_id in train_ids else Split.DEV) for report_id in ds.ids}
    logger.info(f"Split {n_items} reports into {n_train} train / {n_items - n_train} dev (seed {seed})")
    return Dataset(items=ds.items, split=split, seed=seed, labeled=ds.labeled, flagged=ds.flagged)


def class_prevalence(ds: Dataset) -> pd.DataFrame:
    """
    Count of every (condition, class) pair

    Returns:
        DataFrame with columns condition, label_class, count, fraction;
        one row per condition x class in canonical order
    """
    counts = np.zeros((len(CONDITIONS), len(LABEL_CLASSES)), dtype=np.int64)
    for item in ds.items:
        for idx, label in enumerate(item.labels.to_indices()):
            counts[idx, label] += 1
    total = len(ds)
    rows = []
    for c_idx, condition in enumerate(CONDITIONS):
        for label in LABEL_CLASSES:
            count = int(counts[c_idx, label])
            rows.append({
                'condition': condition.value,
                'label_class': label.label,
                'count': count,
                'fraction': count / total if total else 0.0,
            })
    return pd.DataFrame(rows, columns=['condition', 'label_class', 'count', 'fraction'])


def _text_column(columns: List[str], path: str) -> str:
    for name in TEXT_COLUMNS:
        if name in columns:
            return name
    raise FormatError(f"No report text column in {path}; expected one of {TEXT_COLUMNS}")


def load_reports_csv(path: str,
                     provenance: Provenance = Provenance.EXPERT,
                     seed: int = 0) -> Dataset:
    """
    Load a report CSV (labeled, unlabeled or rule-labeler output layout)

    Args:
        path: CSV path
        provenance: Provenance for rows without a provenance column
        seed: Seed recorded on the dataset

    Returns:
        Dataset with normalized texts
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise FormatError(f"Report file {path} has no header row")
    columns = list(df.columns)
    text_column = _text_column(columns, path)

    present = [name for name in CONDITION_NAMES if name in columns]
    labeled = bool(present)
    if labeled and len(present) != len(CONDITION_NAMES):
        missing = [name for name in CONDITION_NAMES if name not in columns]
        raise FormatError(f"Label columns missing from {path}: {missing}")

    items = []
    split = {} if 'split' in columns else None
    flagged = []
    anonymous = 0
    for n, record in enumerate(df.to_dict(orient='records'), start=1):
        report_id = record.get('report_id') or f"row-{n}"
        patient_id = record.get('patient_id') or UNKNOWN_PATIENT
        if patient_id == UNKNOWN_PATIENT:
            anonymous += 1
        text = normalize_text(record[text_column])
        if not text:
            flagged.append(report_id)
        labels = parse_label_row(record, row=n) if labeled else LabelVector.blank()
        row_provenance = provenance
        if record.get('provenance'):
            try:
                row_provenance = Provenance(record['provenance'])
            except ValueError:
                raise FormatError(f"Unknown provenance {record['provenance']!r}", column='provenance', row=n)
        if split is not None:
            try:
                split[report_id] = Split(record['split'])
            except ValueError:
                raise FormatError(f"Unknown split {record['split']!r}", column='split', row=n)
        items.append(LabeledReport(
            report=Report(report_id=report_id, patient_id=patient_id, text=text),
            labels=labels,
            provenance=row_provenance,
        ))

    if anonymous:
        logger.warning(f"{anonymous} reports in {path} have no patient_id; "
                       f"duplicates among them are detected by text alone")
    if flagged:
        logger.warning(f"{len(flagged)} reports in {path} are empty after normalization: {flagged[:5]}")
    logger.info(f"Loaded {len(items)} reports from {path} (labeled={labeled})")
    try:
        return Dataset(items=tuple(items), split=split, seed=seed, labeled=labeled, flagged=tuple(flagged))
    except ValueError as e:
        raise FormatError(f"Invalid dataset in {path}: {e}")


def write_reports_csv(ds: Dataset, path: str) -> None:
    """Write report_id, patient_id, text, the 14 label columns (if labeled), provenance and split"""
    rows = []
    for item in ds.items:
        row = {
            'report_id': item.report.report_id,
            'patient_id': item.report.patient_id,
            'text': item.report.text,
        }
        if ds.labeled:
            row.update(zip(CONDITION_NAMES, encode_label_row(item.labels)))
        row['provenance'] = item.provenance.value
        if ds.split is not None:
            row['split'] = ds.split[item.report_id].value
        rows.append(row)

    columns = ['report_id', 'patient_id', 'text']
    if ds.labeled:
        columns += CONDITION_NAMES
    columns.append('provenance')
    if ds.split is not None:
        columns.append('split')
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, encoding='utf-8', quoting=csv.QUOTE_MINIMAL)
    logger.info(f"Wrote {len(ds)} reports to {path}")
