from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class BoundaryTrace:
    """Per-step record of one sequence read by the network.

    ``z[k, t]`` is the boundary of layer ``k+1`` (the top layer has none),
    ``norms[k, t]`` is ``||h||_2`` of layer ``k+1`` and ``z_init`` holds the
    boundaries carried in from before the first step.
    """

    z: np.ndarray
    norms: np.ndarray
    text: list[int] | str = field(default_factory=list)
    z_init: np.ndarray | None = None
    mode: str = "step"

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.norms = np.asarray(self.norms, dtype=np.float64)
        if self.z.ndim != 2 or self.norms.ndim != 2:
            raise ValueError("trace arrays must be 2-D (layer, time)")
        if self.z.shape[0] != self.norms.shape[0] - 1 or self.z.shape[1] != self.norms.shape[1]:
            raise ValueError(f"boundary rows {self.z.shape} must be one fewer than norm rows {self.norms.shape}")
        if self.z_init is None:
            self.z_init = np.zeros(self.z.shape[0])
        self.z_init = np.asarray(self.z_init, dtype=np.float64)

    @property
    def num_layers(self) -> int:
        return self.norms.shape[0]

    @property
    def length(self) -> int:
        return self.norms.shape[1]
