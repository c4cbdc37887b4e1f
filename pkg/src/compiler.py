"""
Inference Compiler

Turns a fully sparsified training-form network into an InferencePlan: every masked
layer becomes a standard group convolution plus an index layer, batch norm becomes a
per-channel affine map (optionally folded into the preceding convolution), and the
dense wiring is kept as is.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .condensenet import CostReport, Network, NetworkConfig, se_cost
from .exceptions import NotReadyError, TensorShapeError
from .layers import BatchNorm2d, Conv2d, HardSwish, Layer, Linear, SEBlock
from .lgc_module import LgcLayer
from .sfr_module import SfrModule
from .tensor_core import (
    ConvWeights, avg_pool, channel_shuffle, conv2d, fully_connected, global_avg_pool, hard_swish, relu,
    se_block,
)

logger = logging.getLogger(__name__)

GATHER = "gather"
SCATTER_SUM = "scatter_sum"


@dataclass
class IndexMap:
    """
    Channel index layer.

    gather: output channel ``destinations[e]`` copies input channel ``sources[e]``; every
    destination appears exactly once.
    scatter_sum: input channel ``sources[e]`` is added into output channel
    ``destinations[e]``; destinations may repeat and unreached destinations stay zero.
    """
    mode: str
    sources: np.ndarray
    destinations: np.ndarray
    output_width: int
    input_width: int

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.int64)
        self.destinations = np.asarray(self.destinations, dtype=np.int64)
        if self.mode not in (GATHER, SCATTER_SUM):
            raise ValueError(f"unknown index mode: {self.mode}")
        if self.sources.shape != self.destinations.shape:
            raise TensorShapeError("IndexMap", "one destination per source", self.destinations.shape)
        if self.sources.size and min(self.sources.min(), self.destinations.min()) < 0:
            lowest = int(min(self.sources.min(), self.destinations.min()))
            raise TensorShapeError("IndexMap", "non-negative indices", f"index {lowest}")
        if self.sources.size and (self.sources.max() >= self.input_width or self.destinations.max() >= self.output_width):
            raise TensorShapeError("IndexMap", f"indices below ({self.input_width}, {self.output_width})")
        if self.mode == GATHER and not np.array_equal(np.sort(self.destinations), np.arange(self.output_width)):
            raise TensorShapeError("IndexMap", "gather destinations covering every output once")

    @classmethod
    def identity(cls, width: int) -> "IndexMap":
        idx = np.arange(width)
        return cls(GATHER, idx, idx, width, width)

    @property
    def entries(self) -> List[Tuple[int, int]]:
        return [(int(s), int(d)) for s, d in zip(self.sources, self.destinations)]

    @property
    def is_identity(self) -> bool:
        return (self.mode == GATHER and self.input_width == self.output_width
                and np.array_equal(self.sources, self.destinations))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.input_width:
            raise TensorShapeError("IndexMap.apply", f"{self.input_width} channels", x.shape)
        out_shape = (x.shape[0], self.output_width) + x.shape[2:]
        if self.mode == GATHER:
            out = np.empty(out_shape, dtype=x.dtype)
            out[:, self.destinations] = x[:, self.sources]
            return out
        # channel-first so np.add.at accumulates whole feature maps, in entry order
        acc = np.zeros((self.output_width, x.shape[0]) + x.shape[2:], dtype=x.dtype)
        np.add.at(acc, self.destinations, np.moveaxis(x, 1, 0)[self.sources])
        return np.ascontiguousarray(np.moveaxis(acc, 0, 1))

    def inverse(self) -> "IndexMap":
        """Gather that undoes this map; only defined when destinations are distinct."""
        if np.unique(self.destinations).size != self.destinations.size:
            raise ValueError("index map with repeated destinations has no inverse")
        if self.sources.size != self.input_width:
            raise ValueError("index map that drops inputs has no inverse")
        return IndexMap(GATHER, self.destinations, self.sources, self.input_width, self.output_width)


@dataclass
class PlanStep:
    """One inference operation: kind plus scalar attributes, arrays and an optional index map."""
    kind: str
    attrs: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    index: Optional[IndexMap] = None

    def run(self, x: np.ndarray) -> np.ndarray:
        kind = self.kind
        if kind == "conv":
            w = self.tensors["weight"]
            return conv2d(x, ConvWeights(w, groups=self.attrs["groups"]), self.attrs["stride"], self.attrs["padding"])
        if kind == "affine":
            c = x.shape[1]
            shape = (1, c) + (1,) * (x.ndim - 2)
            return x * self.tensors["scale"].reshape(shape) + self.tensors["shift"].reshape(shape)
        if kind == "act":
            return hard_swish(x) if self.attrs["fn"] == "hswish" else relu(x)
        if kind == "shuffle":
            return channel_shuffle(x, self.attrs["groups"])
        if kind == "index":
            return self.index.apply(x)
        if kind == "se":
            t = self.tensors
            return se_block(x, t["w1"], t["b1"], t["w2"], t["b2"])[0]
        if kind == "pool":
            return avg_pool(x, self.attrs["kernel"], self.attrs["stride"])
        if kind == "gap":
            return global_avg_pool(x)
        if kind == "fc":
            return fully_connected(x.reshape(x.shape[0], -1), self.tensors["weight"], self.tensors["bias"])
        raise ValueError(f"unknown plan step: {kind}")

    def describe(self, name: str) -> Dict[str, Any]:
        """JSON-friendly layout entry; arrays are referenced by record name."""
        return {
            "kind": self.kind,
            "attrs": self.attrs,
            "tensors": {key: f"{name}.{key}" for key in self.tensors},
            "index": f"{name}.index" if self.index is not None else None,
        }

    def records(self, name: str) -> List[Tuple[str, Any]]:
        out: List[Tuple[str, Any]] = [(f"{name}.{key}", arr) for key, arr in self.tensors.items()]
        if self.index is not None:
            out.append((f"{name}.index", self.index))
        return out


def run_steps(steps: List[PlanStep], x: np.ndarray) -> np.ndarray:
    for step in steps:
        x = step.run(x)
    return x


@dataclass
class DenseLayerPlan:
    transform: List[PlanStep]
    sfr: List[PlanStep] = field(default_factory=list)

    def run(self, buffer: np.ndarray) -> np.ndarray:
        x_new = run_steps(self.transform, buffer)
        top = buffer + run_steps(self.sfr, x_new) if self.sfr else buffer
        return np.concatenate([top, x_new], axis=1)


@dataclass
class InferencePlan:
    """Compiled, read-only form of a network."""
    config: NetworkConfig
    stem: List[PlanStep]
    blocks: List[List[DenseLayerPlan]]
    tail: List[PlanStep]
    folded: bool = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        r = self.config.input_resolution
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, r, r):
            raise TensorShapeError("plan_forward", f"input (N, {self.config.in_channels}, {r}, {r})", x.shape)
        x = run_steps(self.stem, x)
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = avg_pool(x, 2, 2)
            for layer in block:
                x = layer.run(x)
        return run_steps(self.tail, x)

    def named_steps(self):
        for i, step in enumerate(self.stem):
            yield f"stem.{i}", step
        for b, block in enumerate(self.blocks):
            for l, layer in enumerate(block):
                for i, step in enumerate(layer.transform):
                    yield f"b{b}.l{l}.transform.{i}", step
                for i, step in enumerate(layer.sfr):
                    yield f"b{b}.l{l}.sfr.{i}", step
        for i, step in enumerate(self.tail):
            yield f"tail.{i}", step

    def layout(self) -> Dict[str, Any]:
        return {
            "folded": self.folded,
            "stem": [s.describe(f"stem.{i}") for i, s in enumerate(self.stem)],
            "blocks": [
                [
                    {
                        "transform": [s.describe(f"b{b}.l{l}.transform.{i}") for i, s in enumerate(layer.transform)],
                        "sfr": [s.describe(f"b{b}.l{l}.sfr.{i}") for i, s in enumerate(layer.sfr)],
                    }
                    for l, layer in enumerate(block)
                ]
                for b, block in enumerate(self.blocks)
            ],
            "tail": [s.describe(f"tail.{i}") for i, s in enumerate(self.tail)],
        }

    def records(self) -> List[Tuple[str, Any]]:
        out = []
        for name, step in self.named_steps():
            out.extend(step.records(name))
        return out

    @classmethod
    def from_layout(cls, config: NetworkConfig, layout: Dict[str, Any], records: Dict[str, Any]) -> "InferencePlan":
        def build(desc: Dict[str, Any]) -> PlanStep:
            tensors = {key: records[ref] for key, ref in desc["tensors"].items()}
            index = records[desc["index"]] if desc.get("index") else None
            return PlanStep(desc["kind"], dict(desc["attrs"]), tensors, index)

        blocks = [
            [DenseLayerPlan([build(d) for d in layer["transform"]], [build(d) for d in layer["sfr"]]) for layer in block]
            for block in layout["blocks"]
        ]
        return cls(
            config=config,
            stem=[build(d) for d in layout["stem"]],
            blocks=blocks,
            tail=[build(d) for d in layout["tail"]],
            folded=bool(layout.get("folded", False)),
        )


# ---------------------------------------------------------------------------
# Layer conversion
# ---------------------------------------------------------------------------

def convert_sfr(module: SfrModule) -> Tuple[ConvWeights, IndexMap]:
    """
    Pack each group's live rows into a standard group convolution.

    Output p = g * kept + q of the group conv is row ``live_rows(g)[q]`` of group g; the
    scatter-sum index layer adds it back into that original channel.
    """
    if not module.fully_sparsified:
        raise NotReadyError(
            f"SFR module not fully sparsified ({module.stages_done}/{module.sparse_factor - 1} stages)"
        )
    w = module.weight.effective
    if module.sparse_factor == 1:
        return ConvWeights(w.copy(), groups=1), IndexMap.identity(module.out_channels)

    live = [module.live_rows(g) for g in range(module.groups)]
    kept = len(live[0])
    if any(len(rows) != kept for rows in live):
        raise NotReadyError("SFR groups have unequal live-row counts")
    blocks = [w[rows][:, module.group_columns(g)] for g, rows in enumerate(live)]
    packed = ConvWeights(np.concatenate(blocks, axis=0).copy(), groups=module.groups)
    destinations = np.concatenate([np.asarray(rows) for rows in live])
    index = IndexMap(SCATTER_SUM, np.arange(destinations.size), destinations, module.out_channels, destinations.size)
    return packed, index


def convert_lgc(layer: LgcLayer) -> Tuple[IndexMap, ConvWeights]:
    """Gather every group's live input columns into a contiguous slab, then group-convolve."""
    if not layer.fully_condensed:
        raise NotReadyError(
            f"LGC layer not fully sparsified ({layer.stages_done}/{layer.condense_factor - 1} stages)"
        )
    w = layer.weight.effective
    if layer.condense_factor == 1:
        return IndexMap.identity(layer.in_channels), ConvWeights(w.copy(), groups=1)

    live = [layer.live_inputs(g) for g in range(layer.groups)]
    count = len(live[0])
    if any(len(cols) != count for cols in live):
        raise NotReadyError("LGC groups have unequal live-input counts")
    blocks = [w[layer.group_rows(g)][:, cols] for g, cols in enumerate(live)]
    packed = ConvWeights(np.concatenate(blocks, axis=0).copy(), groups=layer.groups)
    sources = np.concatenate([np.asarray(cols) for cols in live])
    index = IndexMap(GATHER, sources, np.arange(sources.size), sources.size, layer.in_channels)
    return index, packed


def _conv_step(weights: ConvWeights, stride: int = 1, padding: int = 0) -> PlanStep:
    return PlanStep("conv", {"groups": weights.groups, "stride": stride, "padding": padding},
                    {"weight": weights.data.copy()})


def _layer_conv_step(conv: Conv2d) -> PlanStep:
    return _conv_step(ConvWeights(conv.weight.effective.copy(), groups=conv.weight.groups), conv.stride, conv.padding)


def _affine_step(bn: BatchNorm2d) -> PlanStep:
    scale, shift = bn.affine()
    return PlanStep("affine", {}, {"scale": scale, "shift": shift})


def _act_step(layer: Layer) -> PlanStep:
    return PlanStep("act", {"fn": "hswish" if isinstance(layer, HardSwish) else "relu"})


def _se_step(se: SEBlock) -> PlanStep:
    return PlanStep("se", {"reduction": se.reduction}, {
        "w1": se.w1.data.copy(), "b1": se.b1.data.copy(), "w2": se.w2.data.copy(), "b2": se.b2.data.copy(),
    })


def _fc_step(fc: Linear) -> PlanStep:
    return PlanStep("fc", {}, {"weight": fc.weight.data.copy(), "bias": fc.bias.data.copy()})


def compile_network(net: Network, fold: bool = False) -> InferencePlan:
    """
    Convert every SFR and LGC layer of a fully sparsified network.

    Args:
        net: Trained network (LGC condensed, SFR sparsified)
        fold: Fold BN scales into the preceding convolutions

    Returns:
        InferencePlan computing the eval-mode logits of ``net``
    """
    not_ready = [label for label, layer in net.dense_layers()
                 if not layer.lgc.fully_condensed or (layer.sfr is not None and not layer.sfr.fully_sparsified)]
    if not_ready:
        raise NotReadyError(f"network not fully sparsified: {len(not_ready)} layers pending (first: {not_ready[0]})")

    stem = [_layer_conv_step(net.stem_conv), _affine_step(net.stem_bn), _act_step(net.stem_act)]
    blocks = []
    for block in net.blocks:
        layers = []
        for layer in block.layers:
            gather, lgc_weights = convert_lgc(layer.lgc)
            transform = []
            if not gather.is_identity:
                transform.append(PlanStep("index", {}, {}, gather))
            transform += [
                _conv_step(lgc_weights),
                _affine_step(layer.bn1),
                _act_step(layer.act1),
                PlanStep("shuffle", {"groups": layer.shuffle.groups}),
                _layer_conv_step(layer.conv),
                _affine_step(layer.bn2),
                _act_step(layer.act2),
            ]
            if layer.se is not None:
                transform.append(_se_step(layer.se))
            sfr = []
            if layer.sfr is not None:
                packed, scatter = convert_sfr(layer.sfr)
                sfr.append(_conv_step(packed))
                if not scatter.is_identity:
                    sfr.append(PlanStep("index", {}, {}, scatter))
                sfr += [_affine_step(layer.sfr.bn), _act_step(layer.sfr.relu)]
            layers.append(DenseLayerPlan(transform, sfr))
            logger.debug(f"Converted dense layer: LGC {lgc_weights.data.shape}, SFR {len(sfr)} steps")
        blocks.append(layers)

    tail = [_affine_step(net.final_bn), _act_step(net.final_act), PlanStep("gap")]
    if net.head_se is not None:
        tail.append(_se_step(net.head_se))
    if net.head_conv is not None:
        tail += [_layer_conv_step(net.head_conv), _act_step(net.head_act)]
    tail.append(_fc_step(net.fc))

    plan = InferencePlan(net.config, stem, blocks, tail)
    if fold:
        plan = fold_bn(plan)
    logger.info(f"⚙️ Compiled {net.config.name}: {plan_cost(plan).flops:,} multiply-adds")
    return plan


# ---------------------------------------------------------------------------
# BN folding
# ---------------------------------------------------------------------------

def _fold_into(conv: PlanStep, affine: PlanStep, rows_to_channel: Optional[np.ndarray] = None) -> None:
    scale = affine.tensors["scale"]
    per_row = scale if rows_to_channel is None else scale[rows_to_channel]
    conv.tensors["weight"] = (conv.tensors["weight"] * per_row.reshape(-1, 1, 1, 1)).astype(np.float32)
    affine.tensors["scale"] = np.ones_like(scale)


def _fold_steps(steps: List[PlanStep]) -> None:
    for i, step in enumerate(steps):
        if step.kind != "conv":
            continue
        nxt = steps[i + 1] if i + 1 < len(steps) else None
        if nxt is not None and nxt.kind == "affine":
            _fold_into(step, nxt)
        elif (nxt is not None and nxt.kind == "index" and nxt.index.mode == SCATTER_SUM
              and i + 2 < len(steps) and steps[i + 2].kind == "affine"):
            # packed rows take the scale of the channel they scatter into
            order = np.empty(nxt.index.input_width, dtype=np.int64)
            order[nxt.index.sources] = nxt.index.destinations
            _fold_into(step, steps[i + 2], order)


def fold_bn(plan: InferencePlan) -> InferencePlan:
    """Multiply every BN scale into the convolution feeding it; the shift stays as a bias step."""
    folded = copy.deepcopy(plan)
    _fold_steps(folded.stem)
    for block in folded.blocks:
        for layer in block:
            _fold_steps(layer.transform)
            _fold_steps(layer.sfr)
    _fold_steps(folded.tail)
    folded.folded = True
    return folded


# ---------------------------------------------------------------------------
# Evaluation and accounting
# ---------------------------------------------------------------------------

def plan_forward(plan: InferencePlan, batch: np.ndarray) -> np.ndarray:
    return plan.forward(batch)


def plan_cost(plan: InferencePlan) -> CostReport:
    """FLOPs / params of the compiled form, itemized like ``cost_report``."""
    cfg = plan.config
    report = CostReport()

    def conv_weights(step: PlanStep) -> int:
        return int(step.tensors["weight"].size)

    r = cfg.stem_resolution
    for step in plan.stem:
        if step.kind == "conv":
            report.add("stem", conv_weights(step) * r * r, conv_weights(step))
        elif step.kind == "affine":
            report.add("stem", 0, 2 * step.tensors["scale"].size)

    for block, r in zip(plan.blocks, cfg.block_resolutions()):
        for layer in block:
            convs = 0
            for step in layer.transform:
                if step.kind == "conv":
                    kind = "lgc" if convs == 0 else "gc"
                    report.add(kind, conv_weights(step) * r * r, conv_weights(step))
                    convs += 1
                elif step.kind == "affine":
                    report.add("lgc" if convs == 1 else "gc", 0, 2 * step.tensors["scale"].size)
                elif step.kind == "se":
                    report.add("se", *se_cost(step.tensors["w1"].shape[0], step.attrs["reduction"]))
            for step in layer.sfr:
                if step.kind == "conv":
                    report.add("sfr", conv_weights(step) * r * r, conv_weights(step))
                elif step.kind == "affine":
                    report.add("sfr", 0, 2 * step.tensors["scale"].size)

    for step in plan.tail:
        if step.kind == "affine":
            report.add("head", 0, 2 * step.tensors["scale"].size)
        elif step.kind == "se":
            report.add("head", *se_cost(step.tensors["w1"].shape[0], step.attrs["reduction"]))
        elif step.kind == "conv":
            report.add("head", conv_weights(step), conv_weights(step))
        elif step.kind == "fc":
            w = step.tensors["weight"]
            report.add("fc", w.size, w.size + step.tensors["bias"].size)
    return report


def verify_equivalence(net: Network, plan: InferencePlan, batches: int = 4, batch_size: int = 8,
                       seed: int = 0) -> float:
    """Max |logit difference| between the eval-mode network and its plan on random inputs."""
    rng = np.random.default_rng(seed)
    was_training = net.training
    net.eval()
    cfg = net.config
    worst = 0.0
    try:
        for _ in range(batches):
            x = rng.standard_normal((batch_size, cfg.in_channels, cfg.input_resolution, cfg.input_resolution))
            x = x.astype(np.float32)
            diff = np.abs(net.forward(x) - plan.forward(x)).max()
            worst = max(worst, float(diff))
    finally:
        net.train(was_training)
    logger.info(f"🔍 Equivalence check: max abs diff {worst:.3e}")
    return worst
