"""Exception hierarchy shared across the toolkit.

Categories map onto the CLI exit codes: I/O trouble (3), validation of
configs/inputs/schemas (4), and numerical failure such as divergence (5).
Usage errors are argparse's business and never raised from library code.
"""


class VoiceShieldError(Exception):
    """Base class for all toolkit errors."""


class AudioIOError(VoiceShieldError):
    """File missing, malformed header, unsupported encoding, ..."""


class ValidationError(VoiceShieldError):
    """A config, precondition, or serialized structure failed validation."""


class NumericalError(VoiceShieldError):
    """NaN/Inf appeared or an iterative routine diverged."""
