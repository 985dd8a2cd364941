class TwofoldError(Exception):
    """Base class of every error raised by the harness"""


class InsufficientData(TwofoldError):
    pass


class InvalidData(TwofoldError):
    pass


class DimensionError(TwofoldError):
    pass


class SingularFit(TwofoldError):
    """Normal equations of a least-squares fit are rank deficient"""


class EmptyEnsemble(TwofoldError):
    pass


class NotCharacterized(TwofoldError):
    """The ensemble has no error control chart yet"""


class NumericalFailure(TwofoldError):
    pass


class RegimeError(TwofoldError):
    pass


class ConfigError(TwofoldError):
    def __init__(self, key: str, message: str):
        """
        :param key: dotted path of the offending configuration entry
        :param message: what is wrong with it
        """
        super(ConfigError, self).__init__('%s: %s' % (key, message))
        self.key = key


class IoError(TwofoldError, OSError):
    def __init__(self, path: str, message: str):
        super(IoError, self).__init__('%s: %s' % (path, message))
        self.path = path
