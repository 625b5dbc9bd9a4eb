"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class SequenceTooLongError(ValueError):
    """A sequence is longer than the maximum length a position embedding was built for."""

    def __init__(self, n: int, max_len: int):
        super().__init__(f"sequence length {n} exceeds maximum length {max_len}")
        self.n = n
        self.max_len = max_len


class DegenerateKernelError(ValueError):
    """A normalized attention row has a zero similarity sum."""

    def __init__(self, position: int):
        super().__init__(f"zero similarity row-sum at query position {position}")
        self.position = position


class NonFiniteError(ValueError):
    pass
