import os
import sys
import json
import logging
from enum import Enum
from functools import lru_cache
from typing import Any, Iterable, Optional

import numpy as np

__all__ = (
    "setup_logging",
    "get_capsattack_filepath",
    "load_presets",
    "example_rng",
    "to_jsonable",
    "dump_json",
    "write_jsonl",
    "read_jsonl",
)

BOLD_WHITE = "\033[1;37;49m"
RESET = "\033[0m"


class ColorFormatter(logging.Formatter):
    """Formats records as `level name: message`, coloring the level unless disabled."""

    def __init__(self, color: bool) -> None:
        super().__init__("%(levelname)s %(name)s: %(message)s")
        self.color = color

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        if self.color:
            level = record.levelname
            text = text.replace(level, f"{BOLD_WHITE}{level}{RESET}", 1)
        return text


def setup_logging(verbosity: int = 0, stream=None) -> logging.Logger:
    """
    Install a single stream handler on the `capsattack` logger.

    Args:
        verbosity:
            0 logs INFO, anything above logs DEBUG and anything below WARNING.
        stream:
            Where records go. Defaults to standard error.
    """
    stream = sys.stderr if stream is None else stream
    color = "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()

    logger = logging.getLogger("capsattack")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    handler = logging.StreamHandler(stream)
    handler.setFormatter(ColorFormatter(color))
    logger.addHandler(handler)
    logger.propagate = False

    if verbosity > 0:
        logger.setLevel(logging.DEBUG)
    elif verbosity < 0:
        logger.setLevel(logging.WARNING)
    else:
        logger.setLevel(logging.INFO)
    return logger


def get_capsattack_filepath(file: str) -> str:
    return os.path.join(os.path.split(__file__)[0], file)


@lru_cache(maxsize=None)
def _read_presets() -> str:
    with open(get_capsattack_filepath("presets.json"), "r", encoding="utf-8") as f:
        return f.read()


def load_presets() -> dict:
    # a fresh copy on every call so callers may mutate the result
    return json.loads(_read_presets())


def example_rng(seed: int, index: int) -> np.random.Generator:
    """The PRNG stream owned by one example: seeded with `seed XOR index`."""
    return np.random.default_rng(int(seed) ^ int(index))


def to_jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if hasattr(value, "to_dict"):
        return to_jsonable(value.to_dict())
    return value


def dump_json(obj: Any, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def write_jsonl(records: Iterable[Any], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(to_jsonable(record), sort_keys=True))
            f.write("\n")


def read_jsonl(path: str, limit: Optional[int] = None) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
            if limit is not None and len(records) >= limit:
                break
    return records
