# utils/io_excel.py

import os

import pandas as pd

from backend.errors import IoFailure
from utils.io_json import atomic_write_text
from utils.logger import get_logger

logger = get_logger(__name__)


def detect_table_format(file_path):
    """Detect table format (excel, csv or json) from extension."""
    ext = os.path.splitext(file_path)[1].lower()
    if ext in ['.xlsx', '.xls']:
        return 'excel'
    elif ext == '.csv':
        return 'csv'
    elif ext == '.json':
        return 'json'
    raise IoFailure(f"Unsupported table file type: {ext}")


def write_report_table(df: pd.DataFrame, file_path, sheet_name="Report"):
    """
    Write a metrics or sweep table to Excel, CSV or JSON.

    Args:
        df: DataFrame to write
        file_path: Destination; the extension selects the format
        sheet_name: Sheet name for Excel output

    Returns:
        Number of rows written
    """
    table_format = detect_table_format(file_path)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(file_path)), exist_ok=True)
        if table_format == 'excel':
            # openpyxl writes a zip; write to a sibling temp name then rename
            tmp_path = f"{file_path}.part.xlsx"
            df.to_excel(tmp_path, sheet_name=sheet_name, index=False, engine="openpyxl")
            os.replace(tmp_path, file_path)
        elif table_format == 'csv':
            atomic_write_text(file_path, df.to_csv(index=False, lineterminator="\n"))
        else:
            atomic_write_text(file_path, df.to_json(orient='records', indent=2) + "\n")
    except OSError as e:
        raise IoFailure(f"Error writing table {file_path}: {e}") from e

    logger.info(f"Wrote {len(df)} rows to {file_path}")
    return len(df)


def read_report_table(file_path, sheet_name=0):
    """Read a table previously written by write_report_table."""
    if not os.path.exists(file_path):
        raise IoFailure(f"File not found: {file_path}")
    table_format = detect_table_format(file_path)
    try:
        if table_format == 'excel':
            return pd.read_excel(file_path, sheet_name=sheet_name, engine="openpyxl")
        if table_format == 'csv':
            return pd.read_csv(file_path)
        return pd.read_json(file_path, orient='records')
    except (OSError, ValueError) as e:
        raise IoFailure(f"Error reading table {file_path}: {e}") from e
