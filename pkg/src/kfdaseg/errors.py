"""Exception types shared across the toolkit."""


class KfdaSegError(Exception):
    """Base class for all toolkit errors."""


class FormatError(KfdaSegError):
    pass


class UnsupportedError(KfdaSegError):
    pass


class DimensionError(KfdaSegError):
    pass


class ValidationError(KfdaSegError):
    pass


class IoError(KfdaSegError):
    pass


class DegenerateError(KfdaSegError):
    pass


class SingularError(KfdaSegError):
    pass


class ConfigError(KfdaSegError):
    pass


class ClassAbsent(KfdaSegError):
    """A tissue class needed by a classification stage is missing from a subdomain."""

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage {stage}: class {missing} absent")


class InfiniteCnr(KfdaSegError):
    """Both tissue classes have zero spread but distinct means."""
