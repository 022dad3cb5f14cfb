"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition (shapes, ranges, counts)."""


class TypingError(ValueError):
    """An atom type name is not present in the active type table."""


class StructureError(ValueError):
    """A ligand torsion tree is malformed (cyclic, overlapping, out of bounds)."""


class FormatError(ValueError):
    """A file on disk could not be decoded."""


class ConfigurationError(ValueError):
    pass


class StateError(RuntimeError):
    """An operation was called before the state it depends on exists."""


class InputError(ValueError):
    pass


class AlignmentError(ValueError):
    """Result sets being compared do not refer to the same poses."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = sorted(missing)
