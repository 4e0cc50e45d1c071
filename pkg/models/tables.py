"""
Scan tables and experiment results
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np

from models.fits import FitResult


@dataclass
class ScanTable:
    """Column table of one scan: independent variables, measured values and their errors"""
    independent: Dict[str, np.ndarray]
    dependent: Dict[str, np.ndarray]
    errors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.independent = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in self.independent.items()}
        self.dependent = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in self.dependent.items()}
        self.errors = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in self.errors.items()}

        if not self.independent:
            raise ValueError("scan table needs at least one independent column")
        names = list(self.independent) + list(self.dependent)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in {names}")
        lengths = {len(v) for v in list(self.independent.values()) + list(self.dependent.values())}
        lengths |= {len(v) for v in self.errors.values()}
        if len(lengths) > 1:
            raise ValueError(f"columns have unequal lengths {sorted(lengths)}")

        for name, err in self.errors.items():
            if name not in self.dependent:
                raise ValueError(f"error column '{name}' has no matching dependent column")
            if np.any(err < 0) or np.any(np.isnan(err)):
                raise ValueError(f"errors for '{name}' must be non-negative")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.independent.values())))

    @property
    def columns(self) -> List[str]:
        return list(self.independent) + list(self.dependent) + [f"{name}_err" for name in self.errors]

    def column(self, name: str) -> np.ndarray:
        if name in self.independent:
            return self.independent[name]
        if name in self.dependent:
            return self.dependent[name]
        if name.endswith("_err") and name[:-4] in self.errors:
            return self.errors[name[:-4]]
        raise KeyError(f"no column '{name}' in {self.columns}")

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.column(name) for name in self.columns])


@dataclass
class ExperimentResult:
    """Everything one experiment run produces"""
    name: str
    table: ScanTable
    fits: Dict[str, FitResult] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.name,
            "metadata": self.table.metadata,
            "fits": {name: fit.to_dict() for name, fit in self.fits.items()},
            "summary": self.summary,
        }
