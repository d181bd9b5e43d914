"""Exception hierarchy shared by the library and the CLI exit codes."""


class TLRDAError(Exception):
    exit_code = 1


class ContractError(TLRDAError, ValueError):
    """Caller violated a documented precondition."""
    exit_code = 2


class DataError(TLRDAError, ValueError):
    """Input data is unusable (missing class, non-finite entries, ...)."""
    exit_code = 3


class NumericalError(TLRDAError, ArithmeticError):
    """A solve or fixed point failed to meet its tolerance."""
    exit_code = 4

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class UnsupportedRegimeError(ContractError):
    """Quantity is not estimable in the requested regime (e.g. gamma >= 1)."""
