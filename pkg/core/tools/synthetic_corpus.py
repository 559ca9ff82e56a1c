"""
Seeded synthetic report corpus

Each non-blank (condition, class) pair is expressed by its own trigger word, so
the labels are a function of the bag of words and a small encoder can fit them.
No Finding is positive exactly when every other condition is blank.
"""

from typing import Dict

import numpy as np

from config.settings import DEFAULT_SEED
from core.corpus import Dataset, LabeledReport, Provenance, Report
from core.label_schema import CONDITIONS, Condition, LabelClass, LabelVector

# Probability of each class for the 13 ordinary conditions
CLASS_WEIGHTS = {
    LabelClass.BLANK: 0.7,
    LabelClass.POSITIVE: 0.12,
    LabelClass.NEGATIVE: 0.1,
    LabelClass.UNCERTAIN: 0.08,
}

_SUFFIX = {
    LabelClass.POSITIVE: 'pos',
    LabelClass.NEGATIVE: 'neg',
    LabelClass.UNCERTAIN: 'unc',
}

# Share of reports with every finding blank (No Finding positive)
NORMAL_FRACTION = 0.15

_FILLER = ['impression', 'findings', 'comparison', 'study', 'chest', 'portable', 'view', 'stable', 'interval']


def trigger_word(condition: Condition, label: LabelClass) -> str:
    """e.g. pleuraleffusionneg; letters only so every tokenizer keeps it in one piece"""
    return condition.value.lower().replace(' ', '') + _SUFFIX[label]


def trigger_words() -> Dict[str, tuple]:
    """Trigger word -> (condition, class)"""
    words = {}
    for condition in CONDITIONS:
        classes = [LabelClass.POSITIVE] if condition is Condition.NO_FINDING else list(_SUFFIX)
        for label in classes:
            words[trigger_word(condition, label)] = (condition, label)
    return words


def generate_synthetic_corpus(n_items: int = 160,
                              seed: int = DEFAULT_SEED,
                              provenance: Provenance = Provenance.EXPERT,
                              id_prefix: str = 'syn') -> Dataset:
    """
    Generate a labeled corpus

    Args:
        n_items: Number of reports
        seed: Random seed; same seed, same corpus
        provenance: Provenance of every item
        id_prefix: Prefix of the report ids

    Returns:
        Dataset without a split
    """
    rng = np.random.default_rng(seed)
    classes = list(CLASS_WEIGHTS)
    weights = np.array([CLASS_WEIGHTS[label] for label in classes])
    ordinary = [condition for condition in CONDITIONS if condition is not Condition.NO_FINDING]

    items = []
    for n in range(n_items):
        labels = {condition: classes[rng.choice(len(classes), p=weights)] for condition in ordinary}
        if rng.random() < NORMAL_FRACTION:
            labels = {condition: LabelClass.BLANK for condition in ordinary}
        all_blank = all(label is LabelClass.BLANK for label in labels.values())
        labels[Condition.NO_FINDING] = LabelClass.POSITIVE if all_blank else LabelClass.BLANK

        words = [trigger_word(condition, label) for condition, label in labels.items() if label is not LabelClass.BLANK]
        words += list(rng.choice(_FILLER, size=int(rng.integers(2, 6))))
        rng.shuffle(words)
        text = ' '.join(words) + ' .'

        report_id = f"{id_prefix}-{n:05d}"
        items.append(LabeledReport(
            report=Report(report_id=report_id, patient_id=f"p{n // 2:05d}", text=text),
            labels=LabelVector(labels={condition: labels[condition] for condition in CONDITIONS}),
            provenance=provenance,
        ))
    return Dataset(items=tuple(items), seed=seed)
