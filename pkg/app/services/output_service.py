import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.config import RunConfig, get_settings
from app.models.schemas import CheckReport, GridSolution, PicardTrace
from app.utils.exceptions import ConfigurationError
from app.utils.logger import get_logger

logger = get_logger(__name__)

SOLUTION_COLUMNS = ["k", "j", "t", "x", "u", "grad"]
MEASURE_COLUMNS = ["k", "j", "t", "x", "mass"]
DIAGNOSTICS_COLUMNS = ["k", "t", "energy_l2", "energy_grad", "max_upper_excess", "max_lower_excess"]
TRACE_COLUMNS = ["iter", "norm_sq", "ratio"]
MANIFEST_FILE = "manifest.json"


class OutputService:
    """Writes command results into one output directory.

    Every file is written once, through a temporary file renamed into place,
    with fixed column order and a fixed float format.
    """

    def __init__(self, out_dir: str, float_format: Optional[str] = None):
        self.out_dir = Path(out_dir)
        self.float_format = float_format or get_settings().csv_float_format
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def _atomic_write(self, name: str, text: str) -> Path:
        target = self.out_dir / name
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.written.append(name)
        logger.debug("file written", path=str(target))
        return target

    def write_table(self, name: str, df: pd.DataFrame) -> Path:
        return self._atomic_write(name, df.to_csv(index=False, float_format=self.float_format, lineterminator="\n"))

    def write_json(self, name: str, payload: Any) -> Path:
        return self._atomic_write(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_solution(self, sol: GridSolution) -> None:
        """u.csv, nu_plus.csv, nu_minus.csv and diagnostics.csv."""
        grid = sol.grid
        k, j = np.meshgrid(np.arange(grid.Nt + 1), np.arange(grid.Nx), indexing="ij")
        self.write_table("u.csv", pd.DataFrame({
            "k": k.ravel(),
            "j": j.ravel(),
            "t": grid.ts[k].ravel(),
            "x": grid.xs[j].ravel(),
            "u": sol.u.values.ravel(),
            "grad": sol.u.grad.ravel(),
        }, columns=SOLUTION_COLUMNS))

        cells_k, cells_j = k[:-1], j[:-1]
        for name, measure in (("nu_plus.csv", sol.nu_plus), ("nu_minus.csv", sol.nu_minus)):
            self.write_table(name, pd.DataFrame({
                "k": cells_k.ravel(),
                "j": cells_j.ravel(),
                "t": grid.ts[cells_k].ravel(),
                "x": grid.xs[cells_j].ravel(),
                "mass": measure.increments.ravel(),
            }, columns=MEASURE_COLUMNS))

        diag = sol.diagnostics
        self.write_table("diagnostics.csv", pd.DataFrame({
            "k": np.arange(grid.Nt + 1),
            "t": grid.ts,
            "energy_l2": diag.energy_l2,
            "energy_grad": diag.energy_grad,
            "max_upper_excess": diag.max_upper_excess,
            "max_lower_excess": diag.max_lower_excess,
        }, columns=DIAGNOSTICS_COLUMNS))

    def write_sweep(self, rows: Sequence[Dict[str, float]], columns: Sequence[str]) -> None:
        self.write_table("sweep.csv", pd.DataFrame(list(rows), columns=list(columns)))

    def write_trace(self, trace: PicardTrace) -> None:
        self.write_table("trace.csv", pd.DataFrame(
            [r.model_dump() for r in trace.records], columns=TRACE_COLUMNS,
        ))

    def write_summary(self, summary: pd.DataFrame, reports: Sequence[CheckReport]) -> None:
        self.write_table("summary.csv", summary)
        self.write_json("summary.json", [r.model_dump(mode="json") for r in reports])

    def write_manifest(self, command: str, arguments: Dict[str, Any], config: Optional[RunConfig], wall_time: float) -> None:
        settings = get_settings()
        self.write_json(MANIFEST_FILE, {
            "command": command,
            "arguments": arguments,
            "config": config.model_dump(mode="json") if config is not None else None,
            "seed": config.noise.seed if config is not None else None,
            "version": settings.app_version,
            "wall_time_s": wall_time,
            "files": sorted(self.written),
        })


def read_manifest(path: str) -> Dict[str, Any]:
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_FILE
    if not manifest.is_file():
        raise ConfigurationError(f"not found: {manifest}")
    try:
        with open(manifest, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{manifest}: {e}") from e
