"""Exception hierarchy shared by all modules."""


class PmpFoldError(Exception):
    """Base class for every error raised by this package."""


class TopologyError(PmpFoldError):
    pass


class ParseError(TopologyError):
    """Molecule document is not well formed."""


class ValidationError(TopologyError):
    """Molecule document parsed but violates a structural invariant."""


class DegenerateFrameError(PmpFoldError):
    """Three frame atoms are (numerically) collinear, so no normal exists."""

    def __init__(self, message, atom=None):
        super().__init__(message)
        self.atom = atom


class GeometryError(PmpFoldError):
    """Cartesian coordinates disagree with the rigid internal geometry."""


class SingularityError(PmpFoldError):
    """Two atoms closer than the hard distance floor."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair
