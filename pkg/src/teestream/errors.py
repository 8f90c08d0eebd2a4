"""Exception hierarchy. Each class carries the status code that crosses the gate."""


class TeeError(Exception):
    code = "ERROR"


class RejectedInput(TeeError, ValueError):
    code = "REJECTED_INPUT"


class RefInvalid(TeeError, KeyError):
    code = "REF_INVALID"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class ParamInvalid(TeeError, ValueError):
    code = "PARAM_INVALID"


class EmptyInput(TeeError, ValueError):
    code = "EMPTY_INPUT"


class LifecycleViolation(TeeError, RuntimeError):
    code = "LIFECYCLE_VIOLATION"


class Backpressure(TeeError, MemoryError):
    """Secure memory capacity is exhausted; the caller should reclaim and retry."""

    code = "BACKPRESSURE"


class AuthFail(TeeError):
    code = "AUTH_FAIL"


class Corrupt(TeeError, ValueError):
    code = "CORRUPT"


class VerificationRefused(TeeError):
    code = "AUTH_FAIL"
