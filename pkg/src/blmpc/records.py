"""Output files: CSV tables, JSON documents and line-delimited diagnostics.

Floats are written with ``repr`` (shortest round-tripping form), files are
UTF-8 with LF line endings, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .policy import GaussianPolicy, NaturalParams

RECORD_VERSION = 1
TIMING_KEYS = ("timing", "wall_time")


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, np.bool_):
        return bool(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def write_json(path: Path, data: Any) -> None:
    text = json.dumps(_plain(data), indent=2, sort_keys=False, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(_plain(row), ensure_ascii=False) + "\n")


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def policy_json(policy: GaussianPolicy, eta: NaturalParams | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"mean": policy.mean, "cov": policy.cov}
    if eta is not None:
        out["eta1"] = eta.eta1
        out["eta2"] = eta.eta2
    return out


def trajectory_header(n_state: int, n_control: int) -> list[str]:
    return (
        ["round", "step", "time"]
        + [f"x{i}" for i in range(n_state)]
        + [f"u{i}" for i in range(n_control)]
        + ["cost"]
    )


def trajectory_rows(
    rounds: Sequence[int],
    times: np.ndarray,
    states: np.ndarray,
    controls: np.ndarray,
    costs: np.ndarray,
) -> list[list[Any]]:
    """One row per state sample; the control is the one held from this time on (blank on the last row)."""
    rows = []
    n_control = controls.shape[1] if controls.ndim == 2 and controls.size else 0
    for i in range(times.size):
        u = controls[i].tolist() if i < controls.shape[0] else [None] * n_control
        rows.append([rounds[i], i, float(times[i]), *states[i].tolist(), *u, float(costs[i])])
    return rows


def versions() -> dict[str, str]:
    import scipy

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {
        "blmpc": pkg,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def strip_timing(data: Any) -> Any:
    """Copy of a record without wall-clock fields (for reproducibility comparisons)."""
    if isinstance(data, dict):
        return {k: strip_timing(v) for k, v in data.items() if k not in TIMING_KEYS}
    if isinstance(data, list):
        return [strip_timing(v) for v in data]
    return data
