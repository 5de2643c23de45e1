"""Exception hierarchy shared by all modules."""


class DeepBizError(Exception):
    """Base class for library errors."""


class DimensionError(DeepBizError, ValueError):
    pass


class ContractError(DeepBizError, ValueError):
    """A precondition of an operation was violated."""


class GraphError(DeepBizError):
    pass


class NumericError(DeepBizError, ArithmeticError):
    """A computation produced NaN or Inf."""


class VocabularyError(DeepBizError, IndexError):
    pass


class MetricUndefinedError(DeepBizError, ValueError):
    pass


class DegenerateTestError(DeepBizError, ValueError):
    pass


class DivergenceError(DeepBizError):
    def __init__(self, epoch, learning_rate, detail=""):
        self.epoch = epoch
        self.learning_rate = learning_rate
        msg = f"training diverged at epoch {epoch} (learning rate {learning_rate})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SolverError(DeepBizError, ArithmeticError):
    pass


class ConvergenceError(DeepBizError):
    pass


class SchemaError(DeepBizError, ValueError):
    pass


class DataError(DeepBizError, ValueError):
    """Malformed or insufficient data."""


class ExperimentError(DeepBizError):
    pass
