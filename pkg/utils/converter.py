import os


def str_to_bool(value, default=None):
    """
    Convert a string to a boolean value.

    Accepts "yes", "y", "true", "t", "1" (True) and "no", "n", "false", "f", "0" (False),
    case-insensitively. Missing or invalid values return the default when one is
    provided and raise ValueError otherwise.
    """
    value_str = str(value).strip().lower() if value is not None else ""
    if value_str in ("yes", "y", "true", "t", "1"):
        return True
    if value_str in ("no", "n", "false", "f", "0"):
        return False

    if default is not None:
        return default
    raise ValueError(f"Invalid string value for boolean conversion: {value}")


def env_int(name, default):
    """Read an integer environment variable, falling back to default when unset or empty."""
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    try:
        return int(float(value))
    except ValueError:
        raise ValueError(f"Environment variable {name} must be an integer, got {value!r}")


def parse_float_list(value):
    """
    Parse a comma-separated list of reals, e.g. "0.1,0.01,1e-3".

    Parameters
    ----------
    value : str or list
        The string to parse. Lists are returned as floats unchanged.

    Returns
    -------
    list[float]
    """
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    items = [item.strip() for item in str(value).split(",") if item.strip()]
    if not items:
        raise ValueError(f"Empty list: {value!r}")
    return [float(item) for item in items]
