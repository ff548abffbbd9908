"""Exception hierarchy shared across the package."""


class HiCroPLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HiCroPLError, ValueError):
    pass


class NumericError(HiCroPLError, ArithmeticError):
    pass


class ContractError(HiCroPLError, RuntimeError):
    pass


class DegenerateVectorError(NumericError):
    """A zero-norm vector reached an operation that needs a direction."""


class ConfigError(HiCroPLError, ValueError):
    pass


class VocabularyError(HiCroPLError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TemplateError(HiCroPLError, ValueError):
    pass


class ProtocolError(HiCroPLError, ValueError):
    pass


class SpecError(HiCroPLError, ValueError):
    pass


class CheckpointError(HiCroPLError, OSError):
    pass


class NumericWarning(UserWarning):
    pass


class DomainError(HiCroPLError, ValueError):
    pass


class OutputExistsError(HiCroPLError, FileExistsError):
    """An output file exists and overwriting was not requested."""
