"""Exception types shared across the package."""


class RangeError(IndexError):
    """A coordinate or particle position fell outside the valid grid region."""


class ConsistencyError(ValueError):
    """Inputs disagree with each other (duplicate coordinates, size mismatch)."""


class ShapeError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    def __init__(self, row, coord=None):
        self.row = row
        self.coord = coord
        where = f" at grid cell {tuple(int(c) for c in coord)}" if coord is not None else ""
        super().__init__(f"zero diagonal on active row {row}{where}")


class IndefiniteMatrixError(ArithmeticError):
    pass


class ConvergenceError(RuntimeError):
    """An iterative solve hit its iteration cap before reaching tolerance."""

    def __init__(self, message, report=None, frame=None):
        self.report = report
        self.frame = frame
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss; carries the last finite model."""

    def __init__(self, iteration, model=None, checkpoint=None):
        self.iteration = iteration
        self.model = model
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at iteration {iteration}")
