"""Exception hierarchy.  The CLI maps these onto exit codes 1/2/3."""


class NetTrimError(Exception):
    pass


class ConfigError(NetTrimError, ValueError):
    """Invalid layer chain, policy, or config file."""


class InputError(NetTrimError, ValueError):
    """Bad runtime input: labels out of range, empty dataset, wrong batch shape."""


class DataError(NetTrimError):
    """Unreadable or malformed dataset files."""


class NumericFault(NetTrimError, ArithmeticError):
    def __init__(self, layer_index: int, layer_name: str | None = None):
        self.layer_index = layer_index
        self.layer_name = layer_name
        super().__init__(f"non-finite value in output of layer {layer_index} ({layer_name})")


class TrainingDiverged(NetTrimError, ArithmeticError):
    """Raised when training loss becomes non-finite.

    ``last_good`` is the network after the most recent finite epoch.
    """

    def __init__(self, epoch: int, last_good, reason: str = ""):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"training diverged in epoch {epoch + 1}: {reason}")


class CheckpointError(NetTrimError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    """Header shapes disagree with the payload length."""
