"""
Fit result record shared by every least-squares routine
"""
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np


@dataclass
class FitResult:
    params: Dict[str, float]
    covariance: np.ndarray
    residual_rms: float
    converged: bool
    iterations: int
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.params)

    @property
    def values(self) -> np.ndarray:
        return np.array(list(self.params.values()), dtype=float)

    @property
    def errors(self) -> Dict[str, float]:
        """1-sigma uncertainties from the covariance diagonal"""
        diag = np.diag(self.covariance) if self.covariance.size else np.zeros(len(self.params))
        return {name: float(np.sqrt(max(v, 0.0))) for name, v in zip(self.params, diag)}

    def __getitem__(self, name: str) -> float:
        if name in self.params:
            return self.params[name]
        return self.extras[name]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": {k: float(v) for k, v in self.params.items()},
            "errors": self.errors,
            "residual_rms": float(self.residual_rms),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "extras": {k: float(v) for k, v in self.extras.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
