"""Exception hierarchy.

Every error carries a short machine-parsable ``code`` that the CLI writes to
the log before exiting nonzero.
"""


class EEGAlignError(Exception):
    code = "E_GENERIC"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


class DimensionError(EEGAlignError, ValueError):
    code = "E_DIM"


class DegenerateInputError(EEGAlignError, ValueError):
    code = "E_DEGENERATE"


class ParameterError(EEGAlignError, ValueError):
    code = "E_PARAM"


class EmptyBatchError(EEGAlignError, ValueError):
    code = "E_EMPTY"


class LabelError(EEGAlignError, ValueError):
    code = "E_LABEL"


class NumericError(EEGAlignError, ArithmeticError):
    code = "E_NUMERIC"


class EmptyGalleryError(EEGAlignError, ValueError):
    code = "E_EMPTY_GALLERY"


class InsufficientGalleryError(EEGAlignError, ValueError):
    code = "E_GALLERY"


class ManifestError(EEGAlignError):
    code = "E_MANIFEST"


class IntegrityError(EEGAlignError):
    code = "E_INTEGRITY"


class FormatError(EEGAlignError):
    code = "E_FORMAT"


class ConfigError(EEGAlignError, ValueError):
    code = "E_CONFIG"


class CapabilityError(EEGAlignError):
    code = "E_CAPABILITY"


class NonFiniteLossError(NumericError):
    code = "E_NONFINITE_LOSS"

    def __init__(self, term: str, value: float, epoch: int, step: int):
        super().__init__(
            f"loss term '{term}' became non-finite ({value}) at epoch {epoch}, step {step}"
        )
        self.term = term
        self.value = value
        self.epoch = epoch
        self.step = step
