"""Local artifact storage.

Every file is written to a temporary sibling and then moved into place with
``os.replace``, so a reader never sees a half-written result even when
several workers write into the same output tree.
"""

import json
import logging
import os
import tempfile

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def write_text_atomic(path: str, text: str) -> str:
    """
    Write ``text`` to ``path`` atomically, creating parent directories.

    Args:
        path: Destination file path.
        text: Full file contents.

    Returns:
        The destination path.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_path, path)
    except Exception:
        logger.error("Failed to write %s", path, exc_info=True)
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug("Wrote %s (%d bytes)", path, len(text))
    return path


def dumps_json(document) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def write_json_atomic(path: str, document) -> str:
    return write_text_atomic(path, dumps_json(document))


def write_frame_atomic(path: str, frame: pd.DataFrame, index: bool = False, header: bool = True) -> str:
    """Write a DataFrame as CSV with round-trip float precision."""
    text = frame.to_csv(index=index, header=header, float_format=FLOAT_FORMAT, lineterminator="\n")
    return write_text_atomic(path, text)


def write_matrix_atomic(path: str, matrix: np.ndarray, labels: list[str]) -> str:
    """Write a square matrix with ``labels`` as both header and row index (rows = effects)."""
    frame = pd.DataFrame(np.asarray(matrix), index=labels, columns=labels)
    frame.index.name = "effect"
    return write_frame_atomic(path, frame, index=True)


def run_dir(output_dir: str, task: str, model: str, seed: int) -> str:
    """<output_dir>/<task>/<model>/<seed>/, created if missing."""
    path = os.path.join(output_dir, task, model, str(seed))
    os.makedirs(path, exist_ok=True)
    return path
