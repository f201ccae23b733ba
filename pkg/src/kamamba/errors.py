class TrainingFault(RuntimeError):
    """Raised when a forward pass or loss produces non-finite values.

    ``where`` names the block or loss term that produced them; the trainer
    attaches ``trace``, the per-epoch records completed before the fault.
    """

    def __init__(self, where: str, message: str = "non-finite values"):
        super().__init__(f"{where}: {message}")
        self.where = where
        self.trace: list = []


class ValidationError(ValueError):
    """Bad inputs on the CLI / harness surface (maps to exit code 1)."""
