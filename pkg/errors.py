"""
Exception hierarchy for scalepress
Library code raises these; only the CLI turns them into exit codes
"""

from typing import Dict


# Process exit codes used by scalepress_cli
EXIT_CODES = {
    'ok': 0,
    'usage': 1,      # bad arguments or failed validation
    'io': 2,         # unreadable / unwritable path
    'fingerprint': 3,  # artifact belongs to a different model
}


class ScalepressError(Exception):
    """Base class for every error raised by scalepress"""

    exit_code = EXIT_CODES['usage']


class ConfigError(ScalepressError, ValueError):
    """Invalid model, sampler or schedule configuration"""


class ScaleRangeError(ScalepressError, IndexError):
    """Scale index (or another bounded integer) outside its valid range"""


class StateError(ScalepressError, RuntimeError):
    """KV cache is not in the state the next scale expects"""


class ShapeError(ScalepressError, ValueError):
    """Tensor shapes that must agree do not"""


class InputError(ScalepressError, ValueError):
    """Caller-supplied input rejected (labels, mismatched runs, ...)"""


class NumericError(ScalepressError, ValueError):
    """Non-finite values where finite ones are required"""


class MaskError(ScalepressError, ValueError):
    """Attention mask row without any visible key"""


class FormatError(ScalepressError, ValueError):
    """Malformed artifact, unknown version, or dump/schedule mismatch"""


class FingerprintError(FormatError):
    """Pattern or plan was produced for a different model"""

    exit_code = EXIT_CODES['fingerprint']


class ArtifactIOError(ScalepressError, OSError):
    """Artifact path could not be read or written"""

    exit_code = EXIT_CODES['io']


class UsageError(ScalepressError):
    """Command-line usage error"""


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the CLI exit code

    Args:
        error: Raised exception

    Returns:
        Exit code (1 for anything that is not a ScalepressError)
    """
    if isinstance(error, ScalepressError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_CODES['io']
    return EXIT_CODES['usage']


def describe_exit_codes() -> Dict[int, str]:
    """Exit code table for --help epilogs"""
    return {code: name for name, code in EXIT_CODES.items()}
