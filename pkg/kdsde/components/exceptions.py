import json
from typing import Any, List, Optional

__all__ = (
    'KdsdeError',
    'InvalidArgumentError',
    'DomainViolationError',
    'AmbiguousProjectionError',
    'EvaluationError',
    'ResolutionError',
    'NumericError',
    'InternalSolverError',
    'NonConvergenceError',
    'IndeterminateRatioError',
    'SingularityError',
    'InvalidTestFunctionError',
    'ConfigError',
    'UnknownComponentError',
)


class KdsdeError(Exception):
    exit_code = 2
    reason = 'Error'

    def __init__(self,
                 details: Any = None,
                 reason: Optional[str] = None,
                 **kwargs: Any,
                 ) -> None:
        if reason is not None:
            self.reason = reason
        self.details = details
        self.context = kwargs
        super().__init__(self.__str__())

    def payload(self) -> dict:
        body = {'error': self.reason, 'details': self.details}
        if self.context:
            body.update(self.context)
        return body

    def __str__(self):
        return json.dumps(self.payload(), default=str)


class InvalidArgumentError(KdsdeError):
    reason = 'Invalid Argument'


class DomainViolationError(KdsdeError):
    reason = 'Domain Violation'


class AmbiguousProjectionError(KdsdeError):
    reason = 'Ambiguous Projection'


class EvaluationError(KdsdeError):
    reason = 'Evaluation Error'


class ResolutionError(KdsdeError):
    reason = 'Resolution Error'


class NumericError(KdsdeError):
    reason = 'Numeric Error'


class InternalSolverError(KdsdeError):
    exit_code = 3
    reason = 'Internal Solver Error'


class NonConvergenceError(KdsdeError):
    exit_code = 4
    reason = 'Not Converged'

    def __init__(self,
                 details: Any = None,
                 trace: Optional[List[Any]] = None,
                 **kwargs: Any
                 ) -> None:
        self.trace = list(trace or [])
        super().__init__(details=details, **kwargs)


class IndeterminateRatioError(KdsdeError):
    reason = 'Indeterminate Ratio'


class SingularityError(KdsdeError):
    reason = 'Singular Diffusion'


class InvalidTestFunctionError(KdsdeError):
    reason = 'Invalid Test Function'


class ConfigError(KdsdeError):
    exit_code = 64
    reason = 'Config Error'

    def __init__(self,
                 details: Any = None,
                 line: Optional[int] = None,
                 column: Optional[int] = None,
                 **kwargs: Any
                 ) -> None:
        self.line = line
        self.column = column
        if line is not None:
            kwargs.setdefault('line', line)
        if column is not None:
            kwargs.setdefault('column', column)
        super().__init__(details=details, **kwargs)


class UnknownComponentError(ConfigError):
    reason = 'Unknown Component'
