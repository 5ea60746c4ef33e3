import sys
from enum import auto

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:  # backport of enum.StrEnum (Python 3.11+)
    from enum import Enum

    class StrEnum(str, Enum):
        def __new__(cls, *values):
            value = str(*values)
            member = str.__new__(cls, value)
            member._value_ = value
            return member

        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()


class LayerKind(StrEnum):
    """Layer types a chain graph can hold."""
    CONV = auto()
    LINEAR = auto()
    RELU = auto()
    MAXPOOL = auto()
    AVGPOOL = auto()
    FLATTEN = auto()


class GridStatus(StrEnum):
    """Outcome of quantizing one activation channel."""
    VALID = auto()
    EXCLUDED_ALL_ZERO = auto()
    EXCLUDED_CONSTANT = auto()


class RewardKind(StrEnum):
    """Reward signal the search agent optimizes."""
    ENTROPY = auto()
    ACCURACY = auto()
    RANDOM = auto()


class ArchPreset(StrEnum):
    """Architecture presets selectable by flag."""
    TINYVGG6 = auto()
    VGG16 = auto()


class Command(StrEnum):
    """Commands of the command-line surface."""
    TRAIN = "train"
    SEARCH = "search"
    PRUNE = "prune"
    FINETUNE = "finetune"
    SCRATCH = "scratch"
    EVAL = "eval"
    ENTROPY_REPORT = "entropy-report"
