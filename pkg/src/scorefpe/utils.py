"""Shared plumbing: named random substreams, CSV writers, atomic file writes."""

import hashlib
import os
import tempfile

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or input artifact (CLI exit code 2)."""


class NumericsError(RuntimeError):
    """Non-finite values where finite ones are required (CLI exit code 3)."""


def substream(seed, *labels):
    """Deterministic named substream of a root seed.

    Same (seed, labels) always yields the same generator, independent of any
    other substream, so workflows can split randomness per task.
    """
    digest = hashlib.sha256("/".join(str(x) for x in labels).encode()).digest()
    words = np.frombuffer(digest, dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(int, words[:4])]))


def format_sig(value):
    """Format a float with 17 significant digits (round-trips float64)."""
    return format(float(value), ".17g")


def write_csv(path, header, rows):
    """Write rows of floats/ints/strings under a comma-separated header.

    Floats are written with 17 significant digits; writes are atomic
    (temp file + rename) so partial files never appear at `path`.
    """
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, (bool, np.bool_)):
                cells.append(str(bool(cell)).lower())
            elif isinstance(cell, (int, np.integer)):
                cells.append(str(int(cell)))
            elif isinstance(cell, (float, np.floating)):
                cells.append(format_sig(cell))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text):
    path = os.fspath(path)
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path):
    """Read a CSV written by write_csv back into (header, list-of-row-lists of strings)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    return header, rows
