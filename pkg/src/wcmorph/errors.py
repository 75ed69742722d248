"""Exception types shared across the package."""


class WcMorphError(Exception):
    pass


class DimensionError(WcMorphError, ValueError):
    """Tensor or array shapes do not conform."""


class DegenerateInputError(WcMorphError, ValueError):
    """Input has (near) zero norm and cannot be normalized."""


class DegeneratePairError(WcMorphError, ValueError):
    """Two embeddings are antipodal, so the worst case is not unique."""


class InvariantError(WcMorphError, ValueError):
    """A value violates a type invariant, e.g. a non-unit embedding."""


class StageDependencyError(WcMorphError):
    """A pipeline stage was run before the artifacts it needs exist."""

    def __init__(self, missing):
        self.missing = str(missing)
        super().__init__(f"missing upstream artifact: {self.missing}")


class FormatError(WcMorphError):
    """An artifact has the wrong format or version."""
