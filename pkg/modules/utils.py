"""
Utility Functions for the Continual Unlearning Platform

This module provides the file helpers shared by the CLI, the evaluation
report writer and the checkpoint store. Every writer creates its parent
directory and every failure is re-raised with the offending path.

Core Functionality:
- Data Persistence: JSON documents for reports, configs and checkpoints
- Line Records: JSON-lines files for activation dumps and embedding files
- Tables: CSV export through pandas with fixed float formatting

Supported File Formats:
- JSON: 2-space indented, UTF-8, trailing newline
- JSONL: one compact object per line
- CSV: `.` decimal separator, no index column, LF line endings

Output Determinism:
- No writer embeds timestamps or host information
- Identical inputs always give byte-identical files
"""
import json
import os

import pandas as pd

from unlearning.errors import DataError

CSV_FLOAT_FORMAT = "%.6f"


def ensure_directory(path):
    """
    Create a directory (and parents) if it does not exist yet.

    Args:
        path (str | os.PathLike): Directory to create

    Returns:
        str: The directory path as a string

    Error Handling:
        - Permission or file-in-the-way failures raise DataError naming the path
    """
    path = os.fspath(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create directory {path}: {exc}") from None
    return path


def ensure_parent_directory(filename):
    parent = os.path.dirname(os.fspath(filename))
    if parent:
        ensure_directory(parent)


def save_json(data, filename):
    """
    Save a JSON-serialisable document with pretty formatting.

    Args:
        data (dict | list): Document to write
        filename (str | os.PathLike): Target file; parent directories are created

    Returns:
        str: Full path to the saved JSON file

    File Structure:
        - Content: Pretty-printed JSON with 2-space indentation
        - Encoding: UTF-8, non-ASCII characters kept as-is
    """
    filename = os.fspath(filename)
    ensure_parent_directory(filename)
    try:
        with open(filename, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, ensure_ascii=False)
            f.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {filename}: {exc}") from None
    return filename


def load_json(filename):
    """
    Load a JSON document.

    Error Handling:
        - Missing file: DataError naming the path
        - Invalid JSON: DataError with the decoder position
    """
    filename = os.fspath(filename)
    if not os.path.exists(filename):
        raise DataError(f"file not found: {filename}")
    try:
        with open(filename, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {filename}: {exc}") from None
    except OSError as exc:
        raise DataError(f"cannot read {filename}: {exc}") from None


def save_jsonl(rows, filename):
    """
    Write an iterable of JSON objects, one compact object per line.

    Returns:
        str: Full path to the saved file
    """
    filename = os.fspath(filename)
    ensure_parent_directory(filename)
    try:
        with open(filename, "w", encoding="utf-8", newline="\n") as f:
            for row in rows:
                f.write(json.dumps(row, separators=(",", ":"), ensure_ascii=False))
                f.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {filename}: {exc}") from None
    return filename


def save_table_csv(df: pd.DataFrame, filename, float_format=CSV_FLOAT_FORMAT):
    """
    Export a DataFrame to CSV.

    Args:
        df (pd.DataFrame): Table to write, columns in output order
        filename (str | os.PathLike): Target file
        float_format (str): printf-style float format, locale independent

    Returns:
        str: Full path to the saved CSV file
    """
    filename = os.fspath(filename)
    ensure_parent_directory(filename)
    try:
        df.to_csv(filename, index=False, float_format=float_format, lineterminator="\n")
    except OSError as exc:
        raise DataError(f"cannot write {filename}: {exc}") from None
    return filename
