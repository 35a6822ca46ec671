"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class RateinvError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RateinvError):
    """Invalid experiment configuration or incompatible settings."""


class DataError(RateinvError):
    """Problem with input data (audio, manifests, features, trials)."""


class WavFormatError(DataError):
    """File is not a readable RIFF/WAVE container."""


class UnsupportedWavError(DataError):
    """WAV file is readable but not mono 16-bit PCM."""


class TooShortError(DataError):
    """Input is shorter than the minimum an operation requires."""


class EmptyAfterVadError(DataError):
    """Voice activity detection removed every frame of an utterance."""


class EmptyTrialError(DataError):
    """Trial construction produced no usable target/impostor pairs."""


class NumericalError(RateinvError):
    """Numerical failure (divergence, singular matrices, non-finite values)."""


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite; last good parameters were kept."""
