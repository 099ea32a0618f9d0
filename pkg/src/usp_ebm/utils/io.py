"""
Artifact I/O for usp-ebm

All CSVs are UTF-8 with a header row, `,` delimiter and floats written at 17
significant digits so that identical runs produce byte-identical files.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from loguru import logger

PathLike = Union[str, Path]


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(
    path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter=",", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return path


def write_array_csv(path: PathLike, header: Sequence[str], array: np.ndarray) -> Path:
    array = np.asarray(array)
    if array.ndim == 1:
        array = array[:, None]
    return write_csv(path, header, array.tolist())


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader]
    return header, rows


def read_numeric_csv(path: PathLike) -> Tuple[List[str], np.ndarray]:
    header, rows = read_csv(path)
    if not rows:
        return header, np.zeros((0, len(header)))
    return header, np.asarray(rows, dtype=np.float64)


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
