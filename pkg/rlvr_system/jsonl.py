"""JSON Lines persistence for datasets, metrics logs, graded output and ablation reports.

``DataFrame.to_json`` caps floats at 15 significant digits, so rows are encoded with
``json.dumps`` (shortest round-trip repr) and decoded with pandas' precise float parser.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def _json_value(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        value = value.tolist()
    elif isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, (list, tuple)):
        return [_json_value(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _json_value(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def write_jsonl(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """One JSON object per row; NaN becomes null and infinities become ``"inf"``/``"-inf"``."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps({str(k): _json_value(v) for k, v in row.items()}, allow_nan=False)
        for row in df.to_dict(orient="records")
    ]
    with open(target, "w", encoding="utf-8") as handle:
        handle.write("".join(line + "\n" for line in lines))
    return target


def read_jsonl(path: Union[str, Path]) -> pd.DataFrame:

    return pd.read_json(Path(path), lines=True, dtype=False, convert_dates=False, precise_float=True)
