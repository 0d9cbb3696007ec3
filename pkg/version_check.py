"""Python version check for dipwell.

This module checks that the Python version is compatible (3.11 to 3.14).
Import this FIRST in entry points, before numpy and scipy.
"""
import sys

REQUIRED_MIN = (3, 11)
REQUIRED_MAX = (3, 15)


def check_python_version():
    """Check Python version, exit with a message if incompatible.

    Returns True if version is acceptable.
    """
    version = sys.version_info[:2]
    if version >= REQUIRED_MIN and version < REQUIRED_MAX:
        return True

    _show_version_error(version)
    sys.exit(1)


def _show_version_error(current):
    """Print the version mismatch to stderr."""
    print(
        f"dipwell requires Python 3.11 to 3.14 "
        f"(running {current[0]}.{current[1]}); tomllib needs 3.11+",
        file=sys.stderr,
    )


# Auto-check on import
check_python_version()
