__all__ = (
    'BaseStatus',
    'PassStatus',
    'FailStatus',
    'ErrorStatus',
    'UsageStatus',
    'status_of',
)


class BaseStatus:
    code: int = None
    reason: str = None


class PassStatus(BaseStatus):
    code: int = 0
    reason = "PASS"


class FailStatus(BaseStatus):
    code: int = 1
    reason = "FAIL"


class ErrorStatus(BaseStatus):
    code: int = 2
    reason = "ERROR"


class UsageStatus(BaseStatus):
    code: int = 64
    reason = "USAGE"


def status_of(passed: bool) -> type:
    return PassStatus if passed else FailStatus
