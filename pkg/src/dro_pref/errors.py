"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DroPrefError(Exception):
    exit_code = 1

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), "exit_code": self.exit_code}


class ConfigError(DroPrefError):
    exit_code = 2


class ParseError(ConfigError):
    """Malformed or truncated JSON/CSV artifact."""


class InvalidDimensionError(ConfigError):
    pass


class DigestMismatchError(DroPrefError):
    exit_code = 3


class NumericalError(DroPrefError):
    exit_code = 4

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        d = super().to_dict()
        # numpy scalars are not JSON serialisable
        d["details"] = {k: v.item() if hasattr(v, "item") else v
                        for k, v in self.details.items()}
        return d


class DegenerateGeometryError(NumericalError):
    pass


class ContractError(DroPrefError):
    """A caller violated a documented precondition."""


class DimensionTooLargeError(ContractError):
    pass
