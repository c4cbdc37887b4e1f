"""
Learned Group Convolution

A 1x1 convolution whose outputs are split into G contiguous filter groups. Each group
learns, through staged L1 condensation, which input channels it keeps reading.
"""

import logging
from typing import List, Optional

import numpy as np

from .exceptions import StageOverflowError, TensorShapeError
from .layers import Conv2d, Layer
from .sfr_module import reduce_kernel
from .tensor_core import ConvWeights

logger = logging.getLogger(__name__)


class LgcLayer(Layer):
    def __init__(self, in_channels: int, out_channels: int, groups: int, condense_factor: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if groups < 1 or out_channels % groups:
            raise TensorShapeError("LgcLayer", f"output channels divisible by G={groups}", str(out_channels))
        if condense_factor < 1:
            raise ValueError(f"condense factor must be >= 1, got {condense_factor}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups
        self.condense_factor = condense_factor
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng)
        self.conv.weight.mask = np.ones_like(self.conv.weight.data)
        self.stages_done = 0

    @property
    def weight(self) -> ConvWeights:
        return self.conv.weight

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups

    def group_rows(self, g: int) -> slice:
        return slice(g * self.out_per_group, (g + 1) * self.out_per_group)

    @property
    def input_masks(self) -> np.ndarray:
        """(G, I) binary matrix of live input columns per group."""
        m = self.weight.mask[:, :, 0, 0]
        return np.stack([m[g * self.out_per_group] for g in range(self.groups)])

    def live_inputs(self, g: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.input_masks[g])]

    @property
    def columns_per_stage(self) -> int:
        return self.in_channels // self.condense_factor

    @property
    def fully_condensed(self) -> bool:
        return self.condense_factor == 1 or self.stages_done >= self.condense_factor - 1

    @property
    def live_connections(self) -> int:
        return self.weight.live_count

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise TensorShapeError("lgc_forward", f"{self.in_channels} input channels", x.shape)
        return self.conv(x)

    def backward(self, grad_out):
        return self.conv.backward(grad_out)

    def importance(self, g: int) -> np.ndarray:
        """Column L1 norms over the group's output rows; pruned columns score 0."""
        if not 0 <= g < self.groups:
            raise IndexError(f"group {g} out of range for G={self.groups}")
        rows = self.group_rows(g)
        return reduce_kernel(self.weight.effective[rows].astype(np.float64)).sum(axis=0)

    def prune_stage(self) -> "LgcLayer":
        """Drop floor(I/C) least important live input columns in every group."""
        if self.stages_done >= self.condense_factor - 1:
            raise StageOverflowError(
                f"LGC layer already completed {self.stages_done} of {self.condense_factor - 1} stages"
            )
        count = self.columns_per_stage
        for g in range(self.groups):
            scores = self.importance(g)
            victims = sorted(self.live_inputs(g), key=lambda j: (scores[j], j))[:count]
            rows = self.group_rows(g)
            for j in victims:
                self.weight.mask[rows, j] = 0
        self.stages_done += 1
        return self


def lgc_forward(layer: LgcLayer, x_in: np.ndarray) -> np.ndarray:
    return layer.forward(x_in)


def lgc_importance(layer: LgcLayer, g: int) -> np.ndarray:
    return layer.importance(g)


def lgc_prune_stage(layer: LgcLayer) -> LgcLayer:
    return layer.prune_stage()
