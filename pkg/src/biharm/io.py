"""Result files: CSV with 17 significant digits, JSON plot series, and the run manifest."""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if len(r) != len(header):
                raise ValueError(f"row has {len(r)} fields, header {len(header)}")
            w.writerow([fmt(v) for v in r])
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_series(path, series: dict):
    """Plot data: {name: {"x": [...], "y": [...], "log": true}}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(series), indent=2, sort_keys=True), encoding="utf-8")
    return path


def _versions():
    import scipy
    import sklearn

    from . import __version__

    return {
        "biharm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


@dataclass
class RunManifest:
    config_hash: str
    versions: dict = field(default_factory=_versions)
    stages: dict = field(default_factory=dict)
    cache: dict = field(default_factory=lambda: {"hits": 0, "misses": 0})
    outputs: list = field(default_factory=list)

    def add_output(self, path):
        p = str(path)
        if p not in self.outputs:
            self.outputs.append(p)

    def record_stage(self, name, seconds, status="ok", error=None):
        entry = {"seconds": seconds, "status": status}
        if error:
            entry["error"] = error
        self.stages[name] = entry

    def failed(self):
        return [k for k, v in self.stages.items() if v["status"] != "ok"]

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        self.add_output(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True), encoding="utf-8")
        return path


class StageTimer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        return False
