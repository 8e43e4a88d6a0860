"""
services/export.py
~~~~~~~~~~~~~~~~~~
Запись результатов CLI в CSV/JSON.

Формат
------
1. Каждый файл начинается с блока provenance: версия пакета, seed и
   итоговая конфигурация запуска.
2. CSV: строки `# key: value`, затем `DataFrame.to_csv` с 9 значащими
   цифрами; пустая ячейка, если метрики нет.
3. JSON: `{"provenance": {...}, "result": ...}`, NaN/inf пишутся как `null`.
"""
from __future__ import annotations

import json
import math
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, TextIO

import numpy as np
import pandas as pd
from pydantic import BaseModel

from momentum_lab import __version__

# ────────────────────────────────────────────────────────────────────────────────
# Константы и утилиты
# ────────────────────────────────────────────────────────────────────────────────
FLOAT_FORMAT = "%.9g"                 # 9 значащих цифр во всех таблицах


def provenance(config: Mapping[str, Any], seed: Optional[int] = None) -> Dict[str, Any]:
    header = {"version": __version__, "seed": seed}
    header.update(config)
    return header


def _round9(value: float) -> Optional[float]:
    if not math.isfinite(value):
        return None
    return float(f"{value:.9g}")


def jsonable(value: Any) -> Any:
    """Приводит значение к обычным JSON-типам, float обрезаются до 9 цифр."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, BaseModel):
        return jsonable(value.model_dump())
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return _round9(float(value))
    return value


def records_frame(models: Iterable[BaseModel]) -> pd.DataFrame:
    """Одна строка на модель, колонки в порядке полей."""
    rows = [jsonable(m) for m in models]
    return pd.DataFrame(rows)


# ────────────────────────────────────────────────────────────────────────────────
# Запись файлов
# ────────────────────────────────────────────────────────────────────────────────
def _open(path: Optional[Path | str]) -> TextIO:
    # "-" и None означают stdout
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8", newline="")


def _header_value(value: Any) -> str:
    if isinstance(value, (Mapping, list, tuple)):
        return json.dumps(jsonable(value), sort_keys=True)
    return str(jsonable(value))


def write_csv(frame: pd.DataFrame, meta: Mapping[str, Any], path: Optional[Path | str] = None) -> None:
    out = _open(path)
    try:
        for key, value in meta.items():
            out.write(f"# {key}: {_header_value(value)}\n")
        frame.to_csv(out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    finally:
        if out is not sys.stdout:
            out.close()


def write_json(payload: Any, meta: Mapping[str, Any], path: Optional[Path | str] = None) -> None:
    out = _open(path)
    try:
        json.dump({"provenance": jsonable(meta), "result": jsonable(payload)}, out, indent=2)
        out.write("\n")
    finally:
        if out is not sys.stdout:
            out.close()
