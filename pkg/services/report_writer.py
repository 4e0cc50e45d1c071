"""
Report Writer Service - deterministic CSV, JSON and PGM emission
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from models.fields import PotentialGrid
from models.motion import Trajectory
from models.optics import PhotonStream
from models.servo import LockResult
from models.tables import ExperimentResult, ScanTable

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"


def json_safe(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays unwrapped, non-finite floats to null"""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


class ReportWriter:
    """Writes experiment outputs into one directory, stamping seed and config hash"""

    def __init__(self, out_dir, config_hash: str, master_seed: int):
        self.out_dir = Path(out_dir)
        self.config_hash = config_hash
        self.master_seed = master_seed
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _metadata(self, experiment: str, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        meta = {"experiment": experiment, "master_seed": self.master_seed, "config_hash": self.config_hash}
        meta.update(extra or {})
        return meta

    def _write_frame(self, frame: pd.DataFrame, path: Path, metadata: Dict[str, Any]) -> Path:
        with path.open("w", newline="") as fh:
            for key in sorted(metadata):
                fh.write(f"# {key}: {json.dumps(json_safe(metadata[key]), sort_keys=True)}\n")
            frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.debug(f"Wrote {path}")
        return path

    def write_table(self, name: str, table: ScanTable, extra: Optional[Dict[str, Any]] = None) -> Path:
        frame = pd.DataFrame({column: table.column(column) for column in table.columns})
        metadata = self._metadata(name, {**table.metadata, **(extra or {})})
        return self._write_frame(frame, self.out_dir / f"{name}.csv", metadata)

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = self.out_dir / f"{name}.json"
        body = {"metadata": self._metadata(name), **json_safe(payload)}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path

    def write_result(self, result: ExperimentResult) -> List[Path]:
        """<name>.csv plus <name>.json summary"""
        paths = [self.write_table(result.name, result.table), self.write_json(result.name, result.to_dict())]
        for key, artifact in sorted(result.artifacts.items()):
            paths.extend(self.write_artifact(f"{result.name}_{key}", artifact))
        return paths

    def write_artifact(self, name: str, artifact: Any) -> List[Path]:
        if isinstance(artifact, ScanTable):
            return [self.write_table(name, artifact)]
        if isinstance(artifact, Trajectory):
            return [self.write_trajectory(name, artifact)]
        if isinstance(artifact, PhotonStream):
            return [self.write_photons(name, artifact)]
        if isinstance(artifact, LockResult):
            return [self.write_residual(name, artifact)]
        if isinstance(artifact, PotentialGrid):
            return [self.write_field(name, artifact)]
        if isinstance(artifact, np.ndarray) and artifact.ndim == 2:
            return [self.write_pgm(name, artifact)]
        return [self.write_json(name, {"value": artifact})]

    def write_trajectory(self, name: str, traj: Trajectory) -> Path:
        columns = {"t": traj.times}
        for k, axis in enumerate("xyz"):
            columns[axis] = traj.positions[:, k]
        for k, axis in enumerate("xyz"):
            columns[f"v{axis}"] = traj.velocities[:, k]
        return self._write_frame(pd.DataFrame(columns), self.out_dir / f"{name}.csv", self._metadata(name))

    def write_photons(self, name: str, stream: PhotonStream) -> Path:
        frame = pd.DataFrame({"arrival_s": stream.arrivals})
        return self._write_frame(frame, self.out_dir / f"{name}.csv", self._metadata(name, {"window": list(stream.window)}))

    def write_residual(self, name: str, lock: LockResult) -> Path:
        frame = pd.DataFrame({"t": lock.times, "error_linewidths": lock.residual})
        return self._write_frame(frame, self.out_dir / f"{name}.csv", self._metadata(name, lock.to_dict()))

    def write_field(self, name: str, grid: PotentialGrid) -> Path:
        r, z = grid.coordinates()
        frame = pd.DataFrame({"r": r.ravel(), "z": z.ravel(), "value": grid.values.ravel()})
        return self._write_frame(frame, self.out_dir / f"{name}.csv", self._metadata(name))

    def write_pgm(self, name: str, frame: np.ndarray) -> Path:
        """Binary PGM; 16-bit big-endian when counts exceed 255"""
        counts = np.clip(np.rint(frame), 0, None).astype(np.int64)
        max_value = max(int(counts.max(initial=0)), 1)
        depth = 255 if max_value <= 255 else 65535
        data = np.minimum(counts, depth).astype(">u2" if depth > 255 else np.uint8)
        path = self.out_dir / f"{name}.pgm"
        header = f"P5\n{frame.shape[1]} {frame.shape[0]}\n{depth}\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
        return path
