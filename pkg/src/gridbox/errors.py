"""Domain errors for gridbox."""


class GridError(RuntimeError):
    """Raised when a grid-box operation cannot complete.

    ``code`` is the stable, machine-readable error name (``NotFound``,
    ``MacMismatch``, ...); ``message`` is the human explanation.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}")
