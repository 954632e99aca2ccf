"""Exception types shared across the package."""


class SingularMatrixError(ValueError):
    """Factorization hit a zero or near-zero pivot.

    ``pivot`` is the position in elimination order, ``index`` the
    corresponding index in the original numbering (when known).
    """

    def __init__(self, msg, pivot=None, index=None):
        super().__init__(msg)
        self.pivot = pivot
        self.index = index


class SingularUpdateError(ValueError):
    """The dense update system is singular.

    Usually means the accumulated updates disconnected part of the model
    (over-cut) or an update request was inconsistent.
    """


class DegenerateElementError(ValueError):
    """A tetrahedron has non-positive volume."""

    def __init__(self, msg, elements=None):
        super().__init__(msg)
        self.elements = elements if elements is not None else []
