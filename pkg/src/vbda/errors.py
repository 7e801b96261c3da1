class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an op (e.g. log of a non-positive entry)."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


class FormatError(ValueError):
    """Malformed binary or text input. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Experiment configuration could not be parsed or is inconsistent."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown
