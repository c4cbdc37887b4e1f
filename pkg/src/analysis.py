"""
Analysis Tools

Connectivity-strength matrices over the dense feature buffer (which earlier layers
each LGC filter group still reads, and how strongly), CSV / PGM heatmap export, and the
sparse-factor / group-number ablation sweep.
"""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .condensenet import Network, NetworkConfig, build_network, cost_report
from .datasets import DatasetSource, synthetic_blobs
from .exceptions import ConfigError
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

GRANULARITIES = ("per_group", "per_layer")
REDUCTIONS = ("mean", "sum")


@dataclass
class ConnectivityMatrix:
    """
    Rows are buffer segments (producing layer), columns are target layers or
    (target layer, filter group) pairs. Cells with no live weight are flagged
    ``pruned``; cells whose source does not precede the target are not ``defined``.
    """
    row_labels: List[str]
    col_labels: List[str]
    values: np.ndarray
    pruned: np.ndarray
    defined: np.ndarray
    sums: np.ndarray
    counts: np.ndarray
    granularity: str = "per_group"
    reduction: str = "mean"
    col_layers: Optional[List[str]] = None

    @property
    def shape(self):
        return self.values.shape

    def metadata(self) -> Dict[str, object]:
        return {
            "granularity": self.granularity,
            "reduction": self.reduction,
            "rows": len(self.row_labels),
            "cols": len(self.col_labels),
        }


def _reduce(sums: np.ndarray, counts: np.ndarray, defined: np.ndarray, reduction: str):
    pruned = defined & (counts == 0)
    live = defined & ~pruned
    values = np.full(sums.shape, np.nan)
    if reduction == "mean":
        values[live] = sums[live] / counts[live]
    else:
        values[live] = sums[live]
    return values, pruned


def connectivity(net: Network, granularity: str = "per_group", reduction: str = "mean") -> ConnectivityMatrix:
    """
    Strength of every (source segment, target LGC group) connection.

    A cell aggregates |w| over the live LGC weights that connect the source segment's
    channels to the target group's outputs: their mean by default, or their L1 sum.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")

    labels = net.segment_labels()
    widths = net.segment_widths()
    starts = np.concatenate([[0], np.cumsum(widths)[:-1]])
    layers = list(net.dense_layers())
    row_count = len(labels) - 1  # the newest segment feeds no later layer

    col_labels, col_layers, sums, counts, defined = [], [], [], [], []
    for label, layer in layers:
        lgc = layer.lgc
        magnitude = np.abs(lgc.weight.data[:, :, 0, 0].astype(np.float64))
        live = lgc.weight.mask[:, :, 0, 0] != 0
        for g in range(lgc.groups):
            rows = lgc.group_rows(g)
            col_sum, col_count, col_defined = [], [], []
            for s in range(row_count):
                a, b = starts[s], starts[s] + widths[s]
                if b <= lgc.in_channels:
                    block_live = live[rows, a:b]
                    col_sum.append(magnitude[rows, a:b][block_live].sum())
                    col_count.append(int(block_live.sum()))
                    col_defined.append(True)
                else:
                    col_sum.append(0.0)
                    col_count.append(0)
                    col_defined.append(False)
            col_labels.append(f"{label}.g{g}")
            col_layers.append(label)
            sums.append(col_sum)
            counts.append(col_count)
            defined.append(col_defined)

    sums_arr = np.array(sums, dtype=np.float64).T.reshape(row_count, len(col_labels))
    counts_arr = np.array(counts, dtype=np.int64).T.reshape(row_count, len(col_labels))
    defined_arr = np.array(defined, dtype=bool).T.reshape(row_count, len(col_labels))
    values, pruned = _reduce(sums_arr, counts_arr, defined_arr, reduction)
    matrix = ConnectivityMatrix(labels[:row_count], col_labels, values, pruned, defined_arr, sums_arr, counts_arr,
                                "per_group", reduction, col_layers)
    if granularity == "per_layer":
        return aggregate_layers(matrix, reduction)
    return matrix


def aggregate_layers(matrix: ConnectivityMatrix, reduction: str = "mean") -> ConnectivityMatrix:
    """Collapse the filter-group columns of a per-group matrix into one column per layer."""
    if matrix.granularity != "per_group":
        raise ValueError("aggregate_layers expects a per_group matrix")
    layer_labels = list(dict.fromkeys(matrix.col_layers))
    rows = len(matrix.row_labels)
    sums = np.zeros((rows, len(layer_labels)))
    counts = np.zeros((rows, len(layer_labels)), dtype=np.int64)
    defined = np.zeros((rows, len(layer_labels)), dtype=bool)
    for c, layer in enumerate(matrix.col_layers):
        target = layer_labels.index(layer)
        sums[:, target] += matrix.sums[:, c]
        counts[:, target] += matrix.counts[:, c]
        defined[:, target] |= matrix.defined[:, c]
    values, pruned = _reduce(sums, counts, defined, reduction)
    return ConnectivityMatrix(list(matrix.row_labels), layer_labels, values, pruned, defined, sums, counts,
                              "per_layer", reduction, layer_labels)


def _cell_text(matrix: ConnectivityMatrix, r: int, c: int) -> str:
    if not matrix.defined[r, c]:
        return ""
    if matrix.pruned[r, c]:
        return "NA"
    return "%.9g" % matrix.values[r, c]


def heatmap_pixels(matrix: ConnectivityMatrix) -> np.ndarray:
    """8-bit min-max scaled image; pruned and undefined cells are 0, a flat matrix is 255."""
    valid = matrix.defined & ~matrix.pruned & np.isfinite(matrix.values)
    pixels = np.zeros(matrix.values.shape, dtype=np.uint8)
    if not valid.any():
        return pixels
    lo = matrix.values[valid].min()
    hi = matrix.values[valid].max()
    if hi == lo:
        pixels[valid] = 255
    else:
        scaled = np.floor((matrix.values[valid] - lo) / (hi - lo) * 255 + 0.5)
        pixels[valid] = np.clip(scaled, 0, 255).astype(np.uint8)
    return pixels


def export_heatmap(matrix: ConnectivityMatrix, path: Union[str, Path]) -> Dict[str, Path]:
    """
    Write ``<path>.csv`` (labels + values, pruned cells "NA", undefined cells empty),
    ``<path>.pgm`` (8-bit grayscale) and ``<path>.meta.json``.

    Args:
        matrix: Connectivity matrix to export
        path: Output path; a .csv or .pgm suffix is dropped

    Returns:
        Paths of the written files keyed by 'csv', 'pgm' and 'meta'
    """
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".csv", ".pgm") else base
    base.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": base.parent / f"{base.name}.csv",
        "pgm": base.parent / f"{base.name}.pgm",
        "meta": base.parent / f"{base.name}.meta.json",
    }

    with open(paths["csv"], "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["source"] + list(matrix.col_labels))
        for r, label in enumerate(matrix.row_labels):
            writer.writerow([label] + [_cell_text(matrix, r, c) for c in range(len(matrix.col_labels))])

    Image.fromarray(heatmap_pixels(matrix)).save(paths["pgm"], format="PPM")
    paths["meta"].write_text(json.dumps(matrix.metadata(), sort_keys=True, indent=2) + "\n")
    logger.info(f"🗺️ Exported {matrix.granularity} heatmap {matrix.values.shape} to {paths['csv']}")
    return paths


def read_heatmap_csv(path: Union[str, Path]):
    """Parse an exported CSV back into (row_labels, col_labels, values, pruned)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    col_labels = rows[0][1:]
    row_labels = [r[0] for r in rows[1:]]
    values = np.full((len(row_labels), len(col_labels)), np.nan)
    pruned = np.zeros(values.shape, dtype=bool)
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:]):
            if cell == "NA":
                pruned[i, j] = True
            elif cell:
                values[i, j] = float(cell)
    return row_labels, col_labels, values, pruned


# ---------------------------------------------------------------------------
# Ablation sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    value: int
    flops: int
    params: int
    sfr_flops: int
    metric: float

    def row(self) -> List[str]:
        metric = "NA" if math.isnan(self.metric) else f"{self.metric:.6f}"
        return [str(self.value), str(self.flops), str(self.params), str(self.sfr_flops), metric]


def sweep_config(base: NetworkConfig, axis: str, value: int) -> NetworkConfig:
    """Variant of ``base`` with the sparse factor (axis 'S') or SFR group count (axis 'G') changed.

    Varying G leaves the LGC and 3x3 group counts at their base values.
    """
    if axis == "S":
        config = replace(base, sparse_factor=value, name=f"{base.name}-S{value}")
    elif axis == "G":
        config = replace(base, groups=value, lgc_groups=base.lgc_group_count,
                         conv_groups=base.conv_group_count, name=f"{base.name}-G{value}")
    else:
        raise ConfigError(f"sweep axis must be 'S' or 'G', got {axis!r}")
    errors = config.validate()
    if errors:
        raise ConfigError(f"illegal {axis}={value}: " + "; ".join(errors))
    return config


def _sweep_run(job) -> SweepRow:
    value, config, train_config, source = job
    net = build_network(config, seed=train_config.seed if train_config else 0)
    metric = float("nan")
    if train_config is not None:
        result = train(net, train_config, source)
        metric = result.final.acc
    report = cost_report(net, deployed=True)
    return SweepRow(value, report.flops, report.params, report.flops_by_kind["sfr"], metric)


def ablation_sweep(base: NetworkConfig, axis: str, values: Sequence[int], epochs: int = 0,
                   train_config: Optional[TrainConfig] = None, source: Optional[DatasetSource] = None,
                   output: Optional[Union[str, Path]] = None, threads: int = 1) -> List[SweepRow]:
    """
    Build (and with ``epochs`` > 0, train) one network per value and record its cost.

    Args:
        base: Network configuration to vary
        axis: 'S' (sparse factor) or 'G' (SFR group count)
        values: Values to sweep
        epochs: Training epochs per run; 0 records costs only
        train_config: Optimizer settings (epochs overridden by ``epochs``)
        source: Training data (defaults to seeded synthetic blobs matching the config)
        output: Optional CSV path
        threads: Worker processes, capped at the number of values

    Returns:
        One SweepRow per value, in input order
    """
    configs = [sweep_config(base, axis, v) for v in values]
    tc = None
    if epochs > 0:
        tc = replace(train_config or TrainConfig(), epochs=epochs)
        if source is None:
            source = synthetic_blobs(200, base.input_resolution, base.num_classes, base.in_channels, seed=tc.seed)
    jobs = [(v, c, tc, source) for v, c in zip(values, configs)]

    workers = max(1, min(threads, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_run, jobs))
    else:
        rows = [_sweep_run(job) for job in jobs]

    if output is not None:
        output = Path(output)
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow([axis, "flops", "params", "sfr_flops", "metric"])
            for row in rows:
                writer.writerow(row.row())
    for row in rows:
        logger.info(f"📊 {axis}={row.value}: {row.flops:,} FLOPs, {row.params:,} params, SFR {row.sfr_flops:,}")
    return rows
