import os

_FLAG = "ALLINONE_DISABLE_NUMBA"


def numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def use_numba():
    """True unless ALLINONE_DISABLE_NUMBA is set to a truthy value or numba is missing."""
    flag = os.environ.get(_FLAG, "").strip().lower()
    if flag in ("1", "true", "yes", "on"):
        return False
    return numba_available()
