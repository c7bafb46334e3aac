"""
Utility functions and constants shared across modules.
"""

import hashlib
import json
import logging
import os
from typing import Iterable, Optional

from rapidfuzz import fuzz, process
from rich.logging import RichHandler

# Environment variable selecting the log level
LOG_ENV_VAR = "FORGESEM_LOG"

LOG_LEVELS = {
    "error": logging.ERROR,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

# Minimum similarity for a "did you mean" suggestion
SUGGESTION_THRESHOLD = 60

# Detector display names (for reporting)
DETECTOR_DISPLAY_NAMES = {
    "fc": "Stage 2 (Fc, Detector3)",
    "fa": "Stage 1 (Fa, Detector1)",
}


def configure_logging(level: Optional[str] = None) -> int:
    """
    Install a single rich handler on the root logger.

    Args:
        level: One of error/warning/info/debug. Falls back to the
            FORGESEM_LOG environment variable, then to warning.

    Returns:
        The numeric logging level that was applied
    """
    name = (level or os.environ.get(LOG_ENV_VAR) or "warning").strip().lower()
    numeric = LOG_LEVELS.get(name)
    unknown = numeric is None
    if unknown:
        numeric = logging.WARNING

    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(show_path=False, rich_tracebacks=False))
    root.setLevel(numeric)

    if unknown:
        logging.getLogger(__name__).warning(
            f"Unknown log level '{name}', using warning"
        )
    return numeric


def suggest_name(name: str, choices: Iterable[str]) -> Optional[str]:
    """
    Find the closest known name for a mistyped one.

    Args:
        name: Name the user supplied
        choices: Valid names

    Returns:
        Best match above the similarity threshold, or None

    Example:
        >>> suggest_name("splice_hew", ["splice_noise", "splice_hue"])
        'splice_hue'
    """
    choices = list(choices)
    if not name or not choices:
        return None
    match = process.extractOne(
        name, choices, scorer=fuzz.ratio, score_cutoff=SUGGESTION_THRESHOLD
    )
    return match[0] if match else None


def unknown_name_message(kind: str, name: str, choices: Iterable[str]) -> str:
    """Build an error message for an unknown name, with a suggestion if one exists."""
    choices = sorted(choices)
    message = f"Unknown {kind} '{name}'"
    hint = suggest_name(name, choices)
    if hint:
        message += f" (did you mean '{hint}'?)"
    return message


def config_hash(payload: dict) -> str:
    """Return the sha256 of the canonical JSON form of a config dictionary."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def format_auc(value: float, decimals: int = 4) -> str:
    """
    Format an AUC value for display.

    Example:
        >>> format_auc(0.93125)
        '0.9313'
    """
    if value is None:
        return "N/A"
    return f"{value:.{decimals}f}"
