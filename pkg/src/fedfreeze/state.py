"""Layer-unit indexed parameter snapshots."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ModelState:
    """Parameters of a model, one flat vector per trainable unit.

    A unit groups the layers that are selected together (a convolution and
    its batch normalization, or a single dense layer).  A full model state
    holds every unit; a partial update holds only the trained ones.
    """

    units: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(int(v.size) for v in self.units.values())

    @property
    def tensor_bytes(self) -> int:
        """Size of the parameter payload on the wire (4 bytes per value)."""
        return 4 * self.n_params

    def indices(self) -> list[int]:
        return sorted(self.units)

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.units.items()})

    def subset(self, indices) -> "ModelState":
        return ModelState({k: self.units[k].copy() for k in sorted(indices)})

    def astype(self, dtype) -> "ModelState":
        return ModelState({k: v.astype(dtype, copy=True) for k, v in self.units.items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.units.values())

    def flat(self) -> np.ndarray:
        """All parameters concatenated in unit order."""
        if not self.units:
            return np.zeros(0)
        return np.concatenate([self.units[k].ravel() for k in self.indices()])

    def equals(self, other: "ModelState") -> bool:
        """Bit-exact equality of unit sets, dtypes and values."""
        if self.indices() != other.indices():
            return False
        for k, v in self.units.items():
            w = other.units[k]
            if v.dtype != w.dtype or v.shape != w.shape or v.tobytes() != w.tobytes():
                return False
        return True
