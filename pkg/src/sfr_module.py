"""
Sparse Feature Reactivation

The SFR module turns the newest dense-layer output x_new (I channels) into an additive
update y for the feature buffer (O channels): ReLU(BN(conv1x1(x_new, masks * weights))).
Input channels are split into G groups; staged L1 pruning removes, per group, whole
output rows until each group reactivates only a 1/S share of the buffer.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Set, Union

import numpy as np

from .exceptions import ScheduleError, StageOverflowError, TensorShapeError
from .layers import BatchNorm2d, Conv2d, Layer, ReLU
from .tensor_core import ConvWeights

logger = logging.getLogger(__name__)


@dataclass
class StageSchedule:
    """Epoch budget split into S-1 sparsification stages and one optimization stage."""
    total_epochs: int
    sparsification_stage_epochs: List[int] = field(default_factory=list)
    optimization_epochs: int = 0

    @property
    def prune_events(self) -> List[int]:
        """Number of completed epochs after which each prune event fires."""
        events, elapsed = [], 0
        for length in self.sparsification_stage_epochs:
            elapsed += length
            events.append(elapsed)
        return events

    def stages_due(self, epochs_completed: int) -> int:
        return sum(1 for e in self.prune_events if e <= epochs_completed)


def build_schedule(total_epochs: int, stages: int) -> StageSchedule:
    """
    Split E epochs for a factor of S (sparse factor or condense factor).

    Each of the S-1 sparsification stages lasts floor(E / (2(S-1))) epochs; the
    optimization stage absorbs the remainder.
    """
    if stages < 1:
        raise ScheduleError(f"factor must be >= 1, got {stages}")
    if total_epochs < 1:
        raise ScheduleError(f"epochs must be >= 1, got {total_epochs}")
    if stages == 1:
        return StageSchedule(total_epochs, [], total_epochs)
    if total_epochs < 2 * (stages - 1):
        raise ScheduleError(
            f"{total_epochs} epochs cannot host {stages - 1} sparsification stages "
            f"(need at least {2 * (stages - 1)})"
        )
    length = total_epochs // (2 * (stages - 1))
    stage_epochs = [length] * (stages - 1)
    return StageSchedule(total_epochs, stage_epochs, total_epochs - length * (stages - 1))


def reduce_kernel(weights: Union[ConvWeights, np.ndarray]) -> np.ndarray:
    """Collapse (O, I, k_h, k_w) filters to an (O, I) matrix of max |weight| over space."""
    data = weights.data if isinstance(weights, ConvWeights) else np.asarray(weights)
    return np.abs(data).max(axis=(2, 3))


def reactivate(x_in: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x_out = x_in + y."""
    if x_in.shape != y.shape:
        raise TensorShapeError("reactivate", f"update of shape {x_in.shape}", y.shape)
    return x_in + y


class SfrModule(Layer):
    """Masked 1x1 conv -> BN -> ReLU producing the reactivation update."""

    def __init__(self, in_channels: int, out_channels: int, groups: int, sparse_factor: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if groups < 1 or in_channels % groups:
            raise TensorShapeError("SfrModule", f"input channels divisible by G={groups}", str(in_channels))
        if sparse_factor < 1:
            raise ValueError(f"sparse factor must be >= 1, got {sparse_factor}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups
        self.sparse_factor = sparse_factor
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng)
        self.conv.weight.mask = np.ones_like(self.conv.weight.data)
        self.bn = BatchNorm2d(out_channels)
        self.relu = ReLU()
        self.pruned: List[Set[int]] = [set() for _ in range(groups)]
        self.stages_done = 0

    @property
    def in_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def weight(self) -> ConvWeights:
        return self.conv.weight

    @property
    def masks(self) -> np.ndarray:
        """Group masks M^g stacked as (G, O, I/G)."""
        m = self.weight.mask[:, :, 0, 0]
        return m.reshape(self.out_channels, self.groups, self.in_per_group).transpose(1, 0, 2).copy()

    def group_columns(self, g: int) -> slice:
        return slice(g * self.in_per_group, (g + 1) * self.in_per_group)

    @property
    def rows_per_stage(self) -> int:
        return math.ceil(self.out_channels / self.sparse_factor)

    @property
    def fully_sparsified(self) -> bool:
        return self.sparse_factor == 1 or self.stages_done >= self.sparse_factor - 1

    def live_rows(self, g: int) -> List[int]:
        return [i for i in range(self.out_channels) if i not in self.pruned[g]]

    @property
    def live_connections(self) -> int:
        return self.weight.live_count

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise TensorShapeError("sfr_forward", f"{self.in_channels} input channels", x.shape)
        return self.relu(self.bn(self.conv(x)))

    def backward(self, grad_out):
        return self.conv.backward(self.bn.backward(self.relu.backward(grad_out)))

    def importance(self, g: int) -> np.ndarray:
        """L1 norm of each output row within group g, over masked-in weights only."""
        if not 0 <= g < self.groups:
            raise IndexError(f"group {g} out of range for G={self.groups}")
        cols = self.group_columns(g)
        reduced = reduce_kernel(self.weight.effective[:, cols].astype(np.float64))
        return reduced.sum(axis=1)

    def prune_stage(self) -> "SfrModule":
        """Zero the ceil(O/S) least important live rows of every group (ties: lower index)."""
        if self.stages_done >= self.sparse_factor - 1:
            raise StageOverflowError(
                f"SFR module already completed {self.stages_done} of {self.sparse_factor - 1} stages"
            )
        for g in range(self.groups):
            live = self.live_rows(g)
            count = min(self.rows_per_stage, len(live) - 1)
            if count < self.rows_per_stage:
                logger.warning(f"⚠️ SFR group {g}: pruning clamped to {count} rows to keep one alive")
            scores = self.importance(g)
            victims = sorted(live, key=lambda i: (scores[i], i))[:count]
            cols = self.group_columns(g)
            for i in victims:
                self.weight.mask[i, cols] = 0
            self.pruned[g].update(victims)
        self.stages_done += 1
        logger.debug(f"SFR stage {self.stages_done}: {self.live_connections} live weights")
        return self


def sfr_forward(module: SfrModule, x_new: np.ndarray) -> np.ndarray:
    return module.forward(x_new)


def importance(module: SfrModule, g: int) -> np.ndarray:
    return module.importance(g)


def prune_stage(module: SfrModule) -> SfrModule:
    return module.prune_stage()
