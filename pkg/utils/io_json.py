# utils/io_json.py

import json
import os
import tempfile

from backend.errors import IoFailure
from utils.logger import get_logger

logger = get_logger(__name__)


def dumps_record(record):
    """Serialize one record to a single JSON line (no trailing newline)."""
    return json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(", ", ": "))


def atomic_write_text(file_path, text):
    """
    Write text to file_path through a temp file in the same directory, then rename.

    An interrupted write never leaves a truncated file under the final name.

    Args:
        file_path: Destination path
        text: Full file contents
    """
    directory = os.path.dirname(os.path.abspath(file_path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
                f.write(text)
            os.replace(tmp_path, file_path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
    except OSError as e:
        raise IoFailure(f"Error writing {file_path}: {e}") from e
    logger.debug(f"Wrote {file_path}")


def read_lines(file_path):
    """
    Read a UTF-8 text file and return its lines without terminators.

    Raises:
        IoFailure: file missing or unreadable
    """
    if not os.path.exists(file_path):
        raise IoFailure(f"File not found: {file_path}")
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return f.read().splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise IoFailure(f"Error reading {file_path}: {e}") from e


def read_jsonl(file_path):
    """
    Read a line-delimited JSON file.

    Returns:
        List of (line number, decoded object or None, error message or None);
        blank lines are skipped
    """
    rows = []
    for line_no, line in enumerate(read_lines(file_path), 1):
        if not line.strip():
            continue
        try:
            rows.append((line_no, json.loads(line), None))
        except json.JSONDecodeError as e:
            rows.append((line_no, None, f"invalid JSON: {e}"))
    return rows


def write_jsonl(records, file_path):
    """
    Write records (dicts) as one JSON object per line.

    Returns:
        Number of records written
    """
    lines = [dumps_record(record) for record in records]
    atomic_write_text(file_path, "".join(line + "\n" for line in lines))
    logger.info(f"Wrote {len(lines)} records to {file_path}")
    return len(lines)


def read_json(file_path):
    """Read a single JSON document."""
    if not os.path.exists(file_path):
        raise IoFailure(f"File not found: {file_path}")
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise IoFailure(f"Invalid JSON format in {file_path}: {e}") from e
    except OSError as e:
        raise IoFailure(f"Error reading {file_path}: {e}") from e


def write_json(data, file_path, indent=2):
    """Write a single JSON document with sorted keys."""
    atomic_write_text(file_path, json.dumps(data, ensure_ascii=False, indent=indent, sort_keys=True) + "\n")
