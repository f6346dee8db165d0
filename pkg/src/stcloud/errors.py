"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class ShapeError(ContractError):
    """Spatial or channel dimensions are incompatible with a model or operation."""


class CapacityError(ContractError):
    """More non-overlapping crops were requested than fit in a tile."""


class FormatError(ValueError):
    """File does not start with a recognised header."""


class CorruptionError(ValueError):
    """File header is valid but the payload is truncated or inconsistent."""


class ManifestParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TrainingFault(RuntimeError):
    """A loss or gradient became non-finite during optimisation."""

    def __init__(self, step: int, message: str, snapshot: dict | None = None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.snapshot = snapshot or {}
