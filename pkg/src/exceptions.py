from typing import Optional


class MCICJMError(Exception):
    error_type = "MCICJM Error"
    exit_code = 3


class InputError(MCICJMError):
    error_type = "Invalid Input"
    exit_code = 2


class ConfigurationError(MCICJMError):
    error_type = "Configuration Error"
    exit_code = 2


class ParameterError(MCICJMError):
    error_type = "Parameter Out Of Support"
    exit_code = 3


class QuadratureEvaluationError(MCICJMError):
    error_type = "Quadrature Evaluation Error"
    exit_code = 3

    def __init__(self, message: str, node: Optional[float] = None):
        super().__init__(message)
        self.node = node


class DataValidationError(MCICJMError):
    error_type = "Data Validation Error"
    exit_code = 2

    def __init__(self, message: str, row_errors: Optional[list[dict]] = None):
        super().__init__(message)
        self.row_errors = row_errors or []


class SchemaError(MCICJMError):
    error_type = "Schema Mismatch"
    exit_code = 2


class NumericalError(MCICJMError):
    error_type = "Numerical Failure"
    exit_code = 3


class ChainInitializationError(NumericalError):
    error_type = "Chain Initialization Failed"


# Input problems that retrying cannot fix
NON_RETRYABLE_EXCEPTIONS = {
    InputError,
    ConfigurationError,
    DataValidationError,
    SchemaError,
}
