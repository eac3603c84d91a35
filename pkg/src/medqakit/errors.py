"""Exception types shared across the package.

Every error raised on a contract violation has its own class so callers
(and the CLI) can react per failure kind instead of parsing messages.
"""


class MedqaError(Exception):
    """Base class for all package-specific errors."""


class MalformedRecord(MedqaError):
    """A parsed record is missing required fields (strict mode only)."""

    def __init__(self, line_number: int, message: str = ""):
        self.line_number = line_number
        super().__init__(message or f"malformed record at line {line_number}")


class InvalidPair(MedqaError, ValueError):
    """A question-answer pair violates its invariants (empty fields)."""


class VocabTooSmall(MedqaError, ValueError):
    """Requested vocabulary cannot hold the byte alphabet plus specials."""


class IdOutOfRange(MedqaError, IndexError):
    """A token id is outside [0, vocab_size)."""


class TranslatorFailure(MedqaError, RuntimeError):
    """A translation backend failed; propagated unchanged by augmentation."""


class MissingLabel(MedqaError, ValueError):
    """Class balancing requires every pair to carry a qtype label."""


class TooFewPoints(MedqaError, ValueError):
    """A class has too few members for the requested neighbor count."""

    def __init__(self, class_label, message: str = ""):
        self.class_label = class_label
        super().__init__(message or f"class {class_label!r} has too few points")


class ShapeMismatch(MedqaError, ValueError):
    """Array shapes disagree with the architecture or with each other."""


class NoMaskedPositions(MedqaError, ValueError):
    """A masked-token loss was requested on a batch with nothing masked."""


class SequenceTooShort(MedqaError, ValueError):
    """Next-token loss needs at least two tokens per sequence."""


class WrongHead(MedqaError, ValueError):
    """Operation requires a different model head (e.g. generation needs causal)."""


class CacheMismatch(MedqaError, ValueError):
    """Backward pass received a cache not produced by the matching forward."""


class StepOutOfRange(MedqaError, ValueError):
    """Schedule queried outside [0, total_steps]."""


class NonFiniteGradient(MedqaError, FloatingPointError):
    """Gradient clipping encountered NaN or infinity."""


class EmptyTrainingSet(MedqaError, ValueError):
    """Fine-tuning was invoked with no prompts."""


class EmptyTestSet(MedqaError, ValueError):
    """Evaluation was invoked with no test sequences."""


class DimensionMismatch(MedqaError, ValueError):
    """Query embedding dimension differs from the index dimension."""


class NoRows(MedqaError, ValueError):
    """A report was requested with zero result rows."""


class MissingPrerequisite(MedqaError):
    """A pipeline stage ran before the artifacts it depends on exist."""

    def __init__(self, stage: str, hint: str = ""):
        self.stage = stage
        self.hint = hint
        msg = f"stage {stage!r} is missing a prerequisite artifact"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)


class ConfigError(MedqaError, ValueError):
    """Run configuration is malformed (unknown key, bad value)."""
