"""
Label space of the report labeler

14 observations, each labeled blank / positive / negative / uncertain, except
No Finding which is only ever blank or positive. On disk a label is one CSV
cell: empty = blank, 1.0 = positive, 0.0 = negative, -1.0 = uncertain.
"""

from enum import Enum, IntEnum
from typing import Dict, List, Mapping, Optional, Sequence

from pydantic import BaseModel, ConfigDict

from core.errors import FormatError, SchemaError


class Condition(str, Enum):
    """The 14 observations, declared in canonical (CSV column) order"""
    ATELECTASIS = 'Atelectasis'
    CARDIOMEGALY = 'Cardiomegaly'
    CONSOLIDATION = 'Consolidation'
    EDEMA = 'Edema'
    ENLARGED_CARDIOMEDIASTINUM = 'Enlarged Cardiomediastinum'
    FRACTURE = 'Fracture'
    LUNG_LESION = 'Lung Lesion'
    LUNG_OPACITY = 'Lung Opacity'
    NO_FINDING = 'No Finding'
    PLEURAL_EFFUSION = 'Pleural Effusion'
    PLEURAL_OTHER = 'Pleural Other'
    PNEUMONIA = 'Pneumonia'
    PNEUMOTHORAX = 'Pneumothorax'
    SUPPORT_DEVICES = 'Support Devices'

    @property
    def index(self) -> int:
        return _CONDITION_INDEX[self]

    @property
    def num_classes(self) -> int:
        return 2 if self is Condition.NO_FINDING else 4


class LabelClass(IntEnum):
    """Label classes; the integer value is the head output index"""
    BLANK = 0
    POSITIVE = 1
    NEGATIVE = 2
    UNCERTAIN = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


CONDITIONS: List[Condition] = list(Condition)
_CONDITION_INDEX = {condition: idx for idx, condition in enumerate(CONDITIONS)}
CONDITION_NAMES: List[str] = [condition.value for condition in CONDITIONS]
LABEL_CLASSES: List[LabelClass] = list(LabelClass)

# Classes allowed for No Finding
NO_FINDING_CLASSES = (LabelClass.BLANK, LabelClass.POSITIVE)

# Retrieval tasks scored by the evaluation: the class of interest of each task
RETRIEVAL_TASKS = (LabelClass.POSITIVE, LabelClass.NEGATIVE, LabelClass.UNCERTAIN)

# On-disk cell convention
_CELL_TO_CLASS = {
    '': LabelClass.BLANK,
    '1': LabelClass.POSITIVE,
    '1.0': LabelClass.POSITIVE,
    '0': LabelClass.NEGATIVE,
    '0.0': LabelClass.NEGATIVE,
    '-1': LabelClass.UNCERTAIN,
    '-1.0': LabelClass.UNCERTAIN,
}
_CLASS_TO_CELL = {
    LabelClass.BLANK: '',
    LabelClass.POSITIVE: '1.0',
    LabelClass.NEGATIVE: '0.0',
    LabelClass.UNCERTAIN: '-1.0',
}


class LabelVector(BaseModel):
    """Mapping condition -> class. Construction does not check constraints; use validate()"""
    model_config = ConfigDict(frozen=True)

    labels: Dict[Condition, LabelClass]

    @classmethod
    def blank(cls) -> 'LabelVector':
        return cls(labels={condition: LabelClass.BLANK for condition in CONDITIONS})

    @classmethod
    def from_indices(cls, indices: Sequence[int]) -> 'LabelVector':
        """Build from 14 class indices in canonical condition order"""
        if len(indices) != len(CONDITIONS):
            raise SchemaError([f"expected {len(CONDITIONS)} labels, got {len(indices)}"])
        return cls(labels={condition: LabelClass(int(idx)) for condition, idx in zip(CONDITIONS, indices)})

    def __getitem__(self, condition: Condition) -> LabelClass:
        return self.labels[condition]

    def replace(self, condition: Condition, label: LabelClass) -> 'LabelVector':
        labels = dict(self.labels)
        labels[condition] = label
        return LabelVector(labels=labels)

    def without(self, condition: Condition) -> 'LabelVector':
        labels = dict(self.labels)
        labels.pop(condition, None)
        return LabelVector(labels=labels)

    def to_indices(self) -> List[int]:
        """Class indices in canonical condition order (vector must be total)"""
        return [int(self.labels[condition]) for condition in CONDITIONS]


def parse_label_value(raw: Optional[str], column: Optional[str] = None, row: Optional[int] = None) -> LabelClass:
    """
    Parse one label cell

    Args:
        raw: Cell content; None and empty mean blank
        column: Column name, used in the error message
        row: Row number, used in the error message

    Returns:
        LabelClass
    """
    if raw is None:
        return LabelClass.BLANK
    cell = str(raw).strip()
    if cell not in _CELL_TO_CLASS:
        raise FormatError(f"Unrecognised label value {raw!r}", column=column, row=row)
    return _CELL_TO_CLASS[cell]


def validate(vec: LabelVector) -> None:
    """
    Check totality and the No Finding restriction

    Raises:
        SchemaError listing every violated constraint
    """
    violations = []
    missing = [condition.value for condition in CONDITIONS if condition not in vec.labels]
    if missing:
        violations.append(f"missing conditions: {', '.join(missing)}")
    for condition, label in vec.labels.items():
        if not isinstance(label, LabelClass):
            violations.append(f"{condition.value}: {label!r} is not a label class")
    no_finding = vec.labels.get(Condition.NO_FINDING)
    if no_finding is not None and no_finding not in NO_FINDING_CLASSES:
        violations.append(f"No Finding must be Blank or Positive, got {LabelClass(no_finding).label}")
    if violations:
        raise SchemaError(violations)


def is_valid(vec: LabelVector) -> bool:
    try:
        validate(vec)
        return True
    except SchemaError:
        return False


def encode_label_row(vec: LabelVector) -> List[str]:
    """14 cells in canonical order; always the one-decimal form"""
    validate(vec)
    return [_CLASS_TO_CELL[vec.labels[condition]] for condition in CONDITIONS]


def parse_label_row(cells: Mapping[str, Optional[str]], row: Optional[int] = None) -> LabelVector:
    """
    Parse the 14 condition cells of one CSV row into a validated LabelVector

    Args:
        cells: Column name -> raw cell; must contain every condition column
        row: Row number, used in error messages
    """
    labels = {}
    for condition in CONDITIONS:
        if condition.value not in cells:
            raise FormatError(f"Missing label column '{condition.value}'", column=condition.value, row=row)
        labels[condition] = parse_label_value(cells[condition.value], column=condition.value, row=row)
    vec = LabelVector(labels=labels)
    try:
        validate(vec)
    except SchemaError as e:
        prefix = f"row {row}: " if row is not None else ""
        raise SchemaError([prefix + violation for violation in e.violations]) from e
    return vec
