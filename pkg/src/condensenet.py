"""
CondenseNetV2 Network Assembly

Declarative network configuration, the SFR dense layer and dense block, the full
network with stem / transitions / head, builders for the shipped presets and the
FLOPs / parameter accounting used by the analysis tools.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, TensorShapeError
from .layers import (
    AvgPool2d, BatchNorm2d, ChannelShuffle, Conv2d, GlobalAvgPool, Layer, Linear, ReLU, SEBlock,
    activation,
)
from .lgc_module import LgcLayer
from .sfr_module import SfrModule, reactivate

logger = logging.getLogger(__name__)

PRESETS_DIR = Path(__file__).resolve().parent.parent / "presets"


@dataclass
class BlockSpec:
    layers: int
    growth: int
    se: bool = False
    hs: bool = False


@dataclass
class StemSpec:
    kernel: int = 3
    stride: int = 2
    out_channels: Optional[int] = None  # None -> 2 * first growth rate


@dataclass
class HeadSpec:
    width: int = 0  # 0 -> no 1x1 head conv
    se: bool = False
    se_reduction: int = 16


@dataclass
class NetworkConfig:
    """Blocks (d_i, k_i, SE, HS), factors C / S / G and the surrounding stem and head."""
    name: str
    dataset: str
    input_resolution: int
    num_classes: int
    blocks: List[BlockSpec]
    condense_factor: int
    sparse_factor: int
    groups: int
    stem: StemSpec = field(default_factory=StemSpec)
    head: Optional[HeadSpec] = None
    lgc_groups: Optional[int] = None
    conv_groups: Optional[int] = None
    bottleneck: int = 4
    se_reduction: int = 4
    use_sfr: bool = True
    in_channels: int = 3

    @property
    def lgc_group_count(self) -> int:
        return self.lgc_groups or self.groups

    @property
    def conv_group_count(self) -> int:
        return self.conv_groups or self.groups

    @property
    def stem_channels(self) -> int:
        return self.stem.out_channels or 2 * self.blocks[0].growth

    @property
    def stem_resolution(self) -> int:
        pad = self.stem.kernel // 2
        return (self.input_resolution + 2 * pad - self.stem.kernel) // self.stem.stride + 1

    def block_resolutions(self) -> List[int]:
        r = self.stem_resolution
        out = []
        for i in range(len(self.blocks)):
            if i > 0:
                r = (r - 2) // 2 + 1
            out.append(r)
        return out

    def block_widths(self) -> List[Tuple[int, int]]:
        """(input width, output width) of every block under fully dense connectivity."""
        widths, w = [], self.stem_channels
        for block in self.blocks:
            widths.append((w, w + block.layers * block.growth))
            w += block.layers * block.growth
        return widths

    @property
    def final_width(self) -> int:
        return self.block_widths()[-1][1]

    def _type_errors(self) -> List[str]:
        def is_int(value) -> bool:
            return isinstance(value, int) and not isinstance(value, bool)

        errors = []
        ints = [("input_resolution", self.input_resolution), ("num_classes", self.num_classes),
                ("condense_factor", self.condense_factor), ("sparse_factor", self.sparse_factor),
                ("groups", self.groups), ("bottleneck", self.bottleneck),
                ("se_reduction", self.se_reduction), ("in_channels", self.in_channels),
                ("stem.kernel", self.stem.kernel), ("stem.stride", self.stem.stride)]
        optional_ints = [("lgc_groups", self.lgc_groups), ("conv_groups", self.conv_groups),
                         ("stem.out_channels", self.stem.out_channels)]
        flags = [("use_sfr", self.use_sfr)]
        for i, block in enumerate(self.blocks):
            ints += [(f"block {i} layers", block.layers), (f"block {i} growth", block.growth)]
            flags += [(f"block {i} se", block.se), (f"block {i} hs", block.hs)]
        if self.head:
            ints += [("head.width", self.head.width), ("head.se_reduction", self.head.se_reduction)]
            flags.append(("head.se", self.head.se))

        if not isinstance(self.dataset, str):
            errors.append(f"dataset must be a string, got {self.dataset!r}")
        errors += [f"{name} must be an integer, got {value!r}" for name, value in ints if not is_int(value)]
        errors += [f"{name} must be an integer or null, got {value!r}"
                   for name, value in optional_ints if value is not None and not is_int(value)]
        errors += [f"{name} must be true or false, got {value!r}"
                   for name, value in flags if not isinstance(value, bool)]
        return errors

    def validate(self) -> List[str]:
        """Return a list of human-readable problems (empty when valid)."""
        errors = []
        if not self.blocks:
            errors.append("at least one block is required")
            return errors
        errors = self._type_errors()
        if errors:
            return errors
        if self.dataset == "imagenet" and len(self.blocks) != 5:
            errors.append(f"imagenet configs need 5 blocks, got {len(self.blocks)}")
        if self.dataset.startswith("cifar") and len(self.blocks) != 3:
            errors.append(f"cifar configs need 3 blocks, got {len(self.blocks)}")
        for name, value in (("condense_factor", self.condense_factor), ("sparse_factor", self.sparse_factor),
                            ("groups", self.groups), ("bottleneck", self.bottleneck),
                            ("num_classes", self.num_classes), ("input_resolution", self.input_resolution)):
            if value < 1:
                errors.append(f"{name} must be >= 1, got {value}")
        if errors:
            return errors
        for i, block in enumerate(self.blocks):
            if block.layers < 1 or block.growth < 1:
                errors.append(f"block {i}: layers and growth must be >= 1")
                continue
            if block.growth % self.groups:
                errors.append(f"block {i}: growth {block.growth} not divisible by G={self.groups}")
            if block.growth % self.conv_group_count:
                errors.append(f"block {i}: growth {block.growth} not divisible by conv groups")
            width = self.bottleneck * block.growth
            if width % self.lgc_group_count or width % self.conv_group_count:
                errors.append(f"block {i}: bottleneck width {width} not divisible by group counts")
            if block.se and block.growth % self.se_reduction:
                errors.append(f"block {i}: growth {block.growth} not divisible by SE reduction {self.se_reduction}")
        resolutions = self.block_resolutions()
        if self.stem_resolution < 1 or resolutions[-1] < 1 or any(r < 2 for r in resolutions[:-1]):
            errors.append(f"input resolution {self.input_resolution} too small for {len(self.blocks)} blocks")
        if self.head and self.head.width > 0 and self.head.se and self.final_width % self.head.se_reduction:
            errors.append(f"head SE reduction {self.head.se_reduction} does not divide width {self.final_width}")
        return errors

    def check(self) -> "NetworkConfig":
        errors = self.validate()
        if errors:
            raise ConfigError(f"invalid network config '{self.name}': " + "; ".join(errors))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        try:
            payload = dict(data)
            payload["blocks"] = [BlockSpec(**b) for b in data["blocks"]]
            payload["stem"] = StemSpec(**data.get("stem", {}))
            head = data.get("head")
            payload["head"] = HeadSpec(**head) if head else None
            return cls(**payload)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed network config: {e}") from e

    @classmethod
    def from_file(cls, path) -> "NetworkConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read network config {path}: {e}") from e
        return cls.from_dict(data)


def available_presets() -> List[str]:
    return sorted(p.stem for p in PRESETS_DIR.glob("*.json") if p.stem != "reference_values")


def reference_values() -> Dict[str, Dict[str, Any]]:
    """Published FLOPs / params per preset name, keyed like the preset files."""
    data = json.loads((PRESETS_DIR / "reference_values.json").read_text())
    return {k: v for k, v in data.items() if not k.startswith("_")}


def preset_config(name: str) -> NetworkConfig:
    """Load a shipped network preset by name (e.g. 'cnv2-a', 'cnv2-cifar', 'toy')."""
    path = PRESETS_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"unknown preset '{name}' (available: {', '.join(available_presets())})")
    return NetworkConfig.from_file(path)


# ---------------------------------------------------------------------------
# Feature buffer
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    owner: str
    start: int
    width: int


@dataclass
class FeatureBuffer:
    """Ordered concatenation of layer outputs that reactivation rewrites in place."""
    data: np.ndarray
    segments: List[Segment]

    @classmethod
    def from_input(cls, x: np.ndarray, owner: str = "input") -> "FeatureBuffer":
        return cls(x, [Segment(owner, 0, x.shape[1])])

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def append(self, owner: str, x: np.ndarray) -> "FeatureBuffer":
        segment = Segment(owner, self.width, x.shape[1])
        return FeatureBuffer(np.concatenate([self.data, x], axis=1), self.segments + [segment])

    def segment(self, owner: str) -> np.ndarray:
        for seg in self.segments:
            if seg.owner == owner:
                return self.data[:, seg.start:seg.start + seg.width]
        raise KeyError(owner)


# ---------------------------------------------------------------------------
# Dense layer / block
# ---------------------------------------------------------------------------

class SfrDenseLayer(Layer):
    """
    H: LGC 1x1 -> BN -> act -> shuffle -> GC 3x3 -> BN -> act [-> SE] gives x_new (k channels).
    G: SFR(x_new) gives the update y (O channels) added to the incoming buffer.
    The layer returns concat(buffer + y, x_new).
    """

    def __init__(self, in_width: int, growth: int, config: NetworkConfig, se: bool = False, hs: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        act = "hswish" if hs else "relu"
        width = config.bottleneck * growth
        self.in_width = in_width
        self.growth = growth
        self.lgc = LgcLayer(in_width, width, config.lgc_group_count, config.condense_factor, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.act1 = activation(act)
        self.shuffle = ChannelShuffle(config.lgc_group_count)
        self.conv = Conv2d(width, growth, 3, padding=1, groups=config.conv_group_count, rng=rng)
        self.bn2 = BatchNorm2d(growth)
        self.act2 = activation(act)
        self.se = SEBlock(growth, config.se_reduction, rng=rng) if se else None
        self.sfr = SfrModule(growth, in_width, config.groups, config.sparse_factor, rng=rng) if config.use_sfr else None

    @property
    def transform(self) -> List[Layer]:
        chain = [self.lgc, self.bn1, self.act1, self.shuffle, self.conv, self.bn2, self.act2]
        return chain + [self.se] if self.se is not None else chain

    def new_features(self, buffer: np.ndarray) -> np.ndarray:
        h = buffer
        for layer in self.transform:
            h = layer(h)
        return h

    def forward(self, buffer):
        if buffer.shape[1] != self.in_width:
            raise TensorShapeError("dense_layer_forward", f"buffer width {self.in_width}", buffer.shape)
        x_new = self.new_features(buffer)
        top = reactivate(buffer, self.sfr(x_new)) if self.sfr is not None else buffer
        return np.concatenate([top, x_new], axis=1)

    def backward(self, grad_out):
        grad_top = grad_out[:, :self.in_width]
        grad_new = grad_out[:, self.in_width:]
        if self.sfr is not None:
            grad_new = grad_new + self.sfr.backward(grad_top)
        for layer in reversed(self.transform):
            grad_new = layer.backward(grad_new)
        return grad_top + grad_new


class DenseBlock(Layer):
    def __init__(self, in_width: int, spec: BlockSpec, config: NetworkConfig,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.in_width = in_width
        self.spec = spec
        self.layers: List[SfrDenseLayer] = []
        width = in_width
        for j in range(spec.layers):
            layer = SfrDenseLayer(width, spec.growth, config, se=spec.se, hs=spec.hs, rng=rng)
            self.add_child(f"layer{j}", layer)
            self.layers.append(layer)
            width += spec.growth
        self.out_width = width

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def dense_layer_forward(layer: SfrDenseLayer, buffer: FeatureBuffer, owner: str = "x_new") -> FeatureBuffer:
    """Run one dense layer on a FeatureBuffer: reactivate existing segments, append x_new."""
    out = layer.forward(buffer.data)
    segments = list(buffer.segments) + [Segment(owner, buffer.width, layer.growth)]
    return FeatureBuffer(out, segments)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network(Layer):
    """Stem -> dense blocks with 2x2 average-pool transitions -> BN/act -> pool -> [head] -> FC."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        config.check()
        rng = np.random.default_rng(seed)
        self.config = config
        stem = config.stem
        self.stem_conv = Conv2d(config.in_channels, config.stem_channels, stem.kernel, stride=stem.stride,
                                padding=stem.kernel // 2, rng=rng)
        self.stem_bn = BatchNorm2d(config.stem_channels)
        self.stem_act = ReLU()

        self.blocks: List[DenseBlock] = []
        self.pools: List[Optional[AvgPool2d]] = []
        for i, (spec, (w_in, _)) in enumerate(zip(config.blocks, config.block_widths())):
            self.pools.append(self.add_child(f"pool{i}", AvgPool2d(2, 2)) if i > 0 else None)
            self.blocks.append(self.add_child(f"block{i}", DenseBlock(w_in, spec, config, rng=rng)))

        width = config.final_width
        self.final_bn = BatchNorm2d(width)
        self.final_act = activation("hswish" if config.blocks[-1].hs else "relu")
        head = config.head
        self.has_head_conv = bool(head and head.width > 0)
        self.gap = GlobalAvgPool(keepdims=self.has_head_conv)
        self.head_se = None
        self.head_conv = None
        self.head_act = None
        if self.has_head_conv:
            if head.se:
                self.head_se = SEBlock(width, head.se_reduction, rng=rng)
            self.head_conv = Conv2d(width, head.width, 1, rng=rng)
            self.head_act = activation("hswish")
            width = head.width
        self.fc = Linear(width, config.num_classes, rng=rng)
        logger.debug(f"Built {config.name}: {sum(p.data.size for p in self.parameters())} stored weights")

    def head_layers(self) -> List[Layer]:
        return [l for l in (self.head_se, self.head_conv, self.head_act) if l is not None]

    def features(self, x: np.ndarray) -> np.ndarray:
        """Everything up to (and including) the final BN / activation."""
        r = self.config.input_resolution
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, r, r):
            raise TensorShapeError("network_forward", f"input (N, {self.config.in_channels}, {r}, {r})", x.shape)
        x = self.stem_act(self.stem_bn(self.stem_conv(x)))
        for pool, block in zip(self.pools, self.blocks):
            if pool is not None:
                x = pool(x)
            x = block(x)
        return self.final_act(self.final_bn(x))

    def forward(self, x):
        h = self.gap(self.features(x))
        for layer in self.head_layers():
            h = layer(h)
        return self.fc(h.reshape(h.shape[0], -1))

    def backward(self, grad_logits):
        g = self.fc.backward(grad_logits)
        if self.has_head_conv:
            g = g.reshape(g.shape[0], -1, 1, 1)
            for layer in reversed(self.head_layers()):
                g = layer.backward(g)
        g = self.final_bn.backward(self.final_act.backward(self.gap.backward(g)))
        for pool, block in zip(reversed(self.pools), reversed(self.blocks)):
            g = block.backward(g)
            if pool is not None:
                g = pool.backward(g)
        return self.stem_conv.backward(self.stem_bn.backward(self.stem_act.backward(g)))

    # -- structure helpers -------------------------------------------------

    def dense_layers(self) -> Iterator[Tuple[str, SfrDenseLayer]]:
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block.layers):
                yield f"b{i}.l{j}", layer

    def sfr_modules(self) -> List[SfrModule]:
        return [layer.sfr for _, layer in self.dense_layers() if layer.sfr is not None]

    def lgc_layers(self) -> List[LgcLayer]:
        return [layer.lgc for _, layer in self.dense_layers()]

    def segment_labels(self) -> List[str]:
        """Owners of the final buffer's channel segments, in channel order."""
        return ["stem"] + [label for label, _ in self.dense_layers()]

    def segment_widths(self) -> List[int]:
        return [self.config.stem_channels] + [layer.growth for _, layer in self.dense_layers()]

    def prune_sfr_stage(self) -> None:
        for module in self.sfr_modules():
            module.prune_stage()

    def prune_lgc_stage(self) -> None:
        for layer in self.lgc_layers():
            layer.prune_stage()

    @property
    def sfr_stages_done(self) -> int:
        modules = self.sfr_modules()
        return modules[0].stages_done if modules else 0

    @property
    def lgc_stages_done(self) -> int:
        return self.lgc_layers()[0].stages_done

    def restore_stages(self, sfr_stages: int, lgc_stages: int) -> None:
        """Rebuild pruned-row bookkeeping after masks were loaded from disk."""
        for module in self.sfr_modules():
            module.stages_done = sfr_stages
            masks = module.masks
            module.pruned = [set(int(i) for i in np.flatnonzero(masks[g].sum(axis=1) == 0))
                             for g in range(module.groups)]
        for layer in self.lgc_layers():
            layer.stages_done = lgc_stages

    @property
    def fully_sparsified(self) -> bool:
        return all(m.fully_sparsified for m in self.sfr_modules()) and \
            all(l.fully_condensed for l in self.lgc_layers())

    def live_sfr_connections(self) -> int:
        return sum(m.live_connections for m in self.sfr_modules())

    def live_lgc_connections(self) -> int:
        return sum(l.live_connections for l in self.lgc_layers())


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    net = Network(config, seed=seed)
    logger.info(f"🏗️ Built {config.name}: {len(config.blocks)} blocks, buffer width {config.final_width}")
    return net


def build_twin(net: Network, use_sfr: bool = False) -> Network:
    """Same wiring with or without SFR modules, sharing every common weight and statistic."""
    twin = Network(replace(net.config, use_sfr=use_sfr))
    twin.load_state_dict(net.state_dict(), net.mask_dict(), strict=False)
    twin.train(net.training)
    return twin


def network_forward(net: Network, batch: np.ndarray) -> np.ndarray:
    return net.forward(batch)


def network_backward(net: Network, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    net.backward(loss_grad)
    return {name: p.grad for name, p in net.named_parameters()}


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

COST_KINDS = ("stem", "lgc", "gc", "se", "sfr", "head", "fc")


@dataclass
class CostReport:
    flops: int = 0
    params: int = 0
    flops_by_kind: Dict[str, int] = field(default_factory=lambda: {k: 0 for k in COST_KINDS})
    params_by_kind: Dict[str, int] = field(default_factory=lambda: {k: 0 for k in COST_KINDS})

    def add(self, kind: str, flops: int, params: int) -> None:
        self.flops += int(flops)
        self.params += int(params)
        self.flops_by_kind[kind] += int(flops)
        self.params_by_kind[kind] += int(params)


def conv_cost(weight_count: int, out_hw: Tuple[int, int]) -> Tuple[int, int]:
    """(multiply-adds, weights) of a bias-free convolution with the given live weight count."""
    return weight_count * out_hw[0] * out_hw[1], weight_count


def se_cost(channels: int, reduction: int) -> Tuple[int, int]:
    hidden = channels // reduction
    return 2 * channels * hidden, 2 * channels * hidden + hidden + channels


def deployed_lgc_inputs(in_width: int, condense_factor: int) -> int:
    if condense_factor == 1:
        return in_width
    return in_width - (condense_factor - 1) * (in_width // condense_factor)


def deployed_sfr_rows(out_width: int, sparse_factor: int) -> int:
    if sparse_factor == 1:
        return out_width
    return max(1, out_width - (sparse_factor - 1) * math.ceil(out_width / sparse_factor))


def cost_report(net: Network, deployed: bool = True) -> CostReport:
    """
    Multiply-add and parameter counts by component.

    With ``deployed`` the masked layers are counted in their compiled form (every LGC
    and SFR layer fully condensed / sparsified); otherwise the current masks are used,
    so a freshly built network reports its dense cost.
    """
    cfg = net.config
    report = CostReport()
    r = cfg.stem_resolution
    report.add("stem", *conv_cost(net.stem_conv.weight.data.size, (r, r)))
    report.add("stem", 0, 2 * cfg.stem_channels)

    for block, r in zip(net.blocks, cfg.block_resolutions()):
        for layer in block.layers:
            width = cfg.bottleneck * layer.growth
            if deployed:
                lgc_weights = width * deployed_lgc_inputs(layer.in_width, cfg.condense_factor)
            else:
                lgc_weights = layer.lgc.live_connections
            report.add("lgc", *conv_cost(lgc_weights, (r, r)))
            report.add("lgc", 0, 2 * width)
            report.add("gc", *conv_cost(layer.conv.weight.data.size, (r, r)))
            report.add("gc", 0, 2 * layer.growth)
            if layer.se is not None:
                report.add("se", *se_cost(layer.growth, layer.se.reduction))
            if layer.sfr is not None:
                if deployed:
                    sfr_weights = layer.growth * deployed_sfr_rows(layer.in_width, cfg.sparse_factor)
                else:
                    sfr_weights = layer.sfr.live_connections
                report.add("sfr", *conv_cost(sfr_weights, (r, r)))
                report.add("sfr", 0, 2 * layer.in_width)

    report.add("head", 0, 2 * cfg.final_width)
    if net.head_se is not None:
        report.add("head", *se_cost(net.head_se.channels, net.head_se.reduction))
    if net.head_conv is not None:
        report.add("head", *conv_cost(net.head_conv.weight.data.size, (1, 1)))
    fc_in, fc_out = net.fc.weight.data.shape
    report.add("fc", fc_in * fc_out, fc_in * fc_out + fc_out)
    return report


def count_flops(net: Network, deployed: bool = True) -> int:
    return cost_report(net, deployed).flops


def count_params(net: Network, deployed: bool = True) -> int:
    return cost_report(net, deployed).params
