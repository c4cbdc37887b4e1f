"""
Trainer

Softmax cross-entropy, cosine learning rate, masked Nesterov SGD and the training loop
that drives staged sparsification: after the epochs named by the SFR and LGC stage
schedules it fires a prune event on every masked layer of the network.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import closing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .compiler import InferencePlan
from .condensenet import Network
from .datasets import DatasetSource
from .exceptions import ConfigError, TrainingError
from .sfr_module import StageSchedule, build_schedule
from .tensor_core import Parameter

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "loss", "acc", "live_sfr", "live_lgc", "lr"]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def cosine_lr(t: float, lr0: float) -> float:
    """0.5 * lr0 * (1 + cos(pi * t)) for training progress t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {t}")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t))


def sgd_step(params: List[Tuple[str, Parameter]], lr: float, momentum: float = 0.9,
             weight_decay: float = 4e-5, nesterov: bool = True,
             buffers: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """
    One SGD update (PyTorch convention, no dampening).

    d = g + wd * w (decay-enabled parameters only), masked; buf = m * buf + d;
    d = d + m * buf when Nesterov, else buf; w -= lr * d. The momentum buffer is
    multiplied by the mask as well so pruned entries never move again.

    Returns:
        The momentum buffers keyed by parameter name
    """
    buffers = {} if buffers is None else buffers
    for name, param in params:
        if param.grad is None:
            continue
        if not np.all(np.isfinite(param.grad)):
            raise TrainingError(f"non-finite gradient in parameter '{name}'")
        d = param.grad.astype(param.data.dtype, copy=True)
        if weight_decay and param.decay:
            d += weight_decay * param.data
        if param.mask is not None:
            d *= param.mask
        if momentum:
            buf = buffers.get(name)
            buf = d.copy() if buf is None else momentum * buf + d
            if param.mask is not None:
                buf *= param.mask
            buffers[name] = buf
            d = d + momentum * buf if nesterov else buf
        param.data -= (lr * d).astype(param.data.dtype)
    return buffers


class NesterovSGD:
    """Stateful wrapper around :func:`sgd_step` for a fixed parameter list."""

    def __init__(self, named_params, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 4e-5,
                 nesterov: bool = True):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.nesterov, self.buffers)

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    nesterov: bool = True
    seed: int = 0
    workers: int = 0  # >0: background batch producer

    def validate(self) -> List[str]:
        errors = []
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            errors.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            errors.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        return errors

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        config = cls(**data)
        errors = config.validate()
        if errors:
            raise ConfigError("invalid training config: " + "; ".join(errors))
        return config

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    acc: float
    live_sfr: int
    live_lgc: int
    lr: float

    def row(self) -> List[str]:
        return [str(self.epoch), f"{self.loss:.6f}", f"{self.acc:.6f}", str(self.live_sfr), str(self.live_lgc),
                f"{self.lr:.6g}"]


@dataclass
class TrainResult:
    history: List[EpochMetrics] = field(default_factory=list)
    sfr_schedule: Optional[StageSchedule] = None
    lgc_schedule: Optional[StageSchedule] = None
    metrics_path: Optional[Path] = None

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]


PruneCallback = Callable[[str, int, Network], None]


def stage_schedules(net: Network, epochs: int) -> Tuple[StageSchedule, StageSchedule]:
    """SFR and LGC schedules; one shared grid when C == S."""
    cfg = net.config
    sfr_factor = cfg.sparse_factor if cfg.use_sfr else 1
    sfr = build_schedule(epochs, sfr_factor)
    lgc = sfr if cfg.condense_factor == sfr_factor else build_schedule(epochs, cfg.condense_factor)
    return sfr, lgc


def train(net: Network, config: TrainConfig, source: DatasetSource, metrics_path: Optional[Union[str, Path]] = None,
          on_prune: Optional[PruneCallback] = None) -> TrainResult:
    """
    Train ``net`` in place with staged sparsification.

    Args:
        net: Freshly built (or partially trained) network
        config: Optimizer and loop settings
        source: Training data
        metrics_path: Optional CSV written as epoch,loss,acc,live_sfr,live_lgc,lr
        on_prune: Called as on_prune(kind, epoch, net) right after each prune event,
            kind being 'sfr' or 'lgc'

    Returns:
        TrainResult with per-epoch metrics and the schedules used
    """
    errors = config.validate()
    if errors:
        raise ConfigError("invalid training config: " + "; ".join(errors))
    sfr_schedule, lgc_schedule = stage_schedules(net, config.epochs)
    rng = np.random.default_rng(config.seed)
    optimizer = NesterovSGD(net.named_parameters(), config.lr, config.momentum, config.weight_decay, config.nesterov)
    steps_per_epoch = math.ceil(len(source) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    result = TrainResult(sfr_schedule=sfr_schedule, lgc_schedule=lgc_schedule)

    logger.info(f"🚀 Training {net.config.name}: {config.epochs} epochs, {len(source)} samples, "
                f"SFR events {sfr_schedule.prune_events}, LGC events {lgc_schedule.prune_events}")

    writer = None
    handle = None
    if metrics_path is not None:
        result.metrics_path = Path(metrics_path)
        result.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        handle = open(result.metrics_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)

    try:
        net.train()
        step = 0
        lr = config.lr
        for epoch in range(1, config.epochs + 1):
            batches = (source.prefetch(config.batch_size, rng) if config.workers > 0
                       else source.batches(config.batch_size, rng))
            loss_sum, correct, seen = 0.0, 0, 0
            with closing(batches):
                for x, y in batches:
                    lr = cosine_lr(step / total_steps, config.lr)
                    optimizer.lr = lr
                    optimizer.zero_grad()
                    logits = net.forward(x)
                    loss, grad = softmax_cross_entropy(logits, y)
                    if not math.isfinite(loss):
                        raise TrainingError(f"loss diverged at epoch {epoch}")
                    net.backward(grad.astype(logits.dtype))
                    optimizer.step()
                    loss_sum += loss * len(y)
                    correct += int((logits.argmax(axis=1) == y).sum())
                    seen += len(y)
                    step += 1

            for _ in range(sfr_schedule.prune_events.count(epoch)):
                net.prune_sfr_stage()
                if on_prune:
                    on_prune("sfr", epoch, net)
                logger.info(f"✂️ Epoch {epoch}: SFR stage {net.sfr_stages_done}, "
                            f"{net.live_sfr_connections()} live reactivation weights")
            for _ in range(lgc_schedule.prune_events.count(epoch)):
                net.prune_lgc_stage()
                if on_prune:
                    on_prune("lgc", epoch, net)
                logger.info(f"✂️ Epoch {epoch}: LGC stage {net.lgc_stages_done}, "
                            f"{net.live_lgc_connections()} live input weights")

            metrics = EpochMetrics(epoch, loss_sum / max(seen, 1), correct / max(seen, 1),
                                   net.live_sfr_connections(), net.live_lgc_connections(), lr)
            result.history.append(metrics)
            if writer:
                writer.writerow(metrics.row())
                handle.flush()
            logger.info(f"📈 Epoch {epoch}/{config.epochs}: loss {metrics.loss:.4f}, acc {metrics.acc:.3f}, lr {lr:.4g}")
    finally:
        if handle:
            handle.close()
    return result


def evaluate(model: Union[Network, InferencePlan], source: DatasetSource, batch_size: int = 64,
             threads: int = 1) -> Tuple[float, float]:
    """
    Eval-mode loss and accuracy over a dataset.

    A compiled plan is read-only, so its batches may be spread over ``threads`` workers;
    a training-form network is always evaluated on the calling thread.
    """
    batches = list(source.batches(batch_size, shuffle=False))
    if not batches:
        return 0.0, 0.0

    def score(batch) -> Tuple[float, int, int]:
        x, y = batch
        logits = model.forward(x)
        loss, _ = softmax_cross_entropy(logits, y)
        return loss * len(y), int((logits.argmax(axis=1) == y).sum()), len(y)

    if isinstance(model, Network):
        was_training = model.training
        model.eval()
        try:
            scores = [score(b) for b in batches]
        finally:
            model.train(was_training)
    elif threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score, batches))
    else:
        scores = [score(b) for b in batches]

    total = sum(s[2] for s in scores)
    return sum(s[0] for s in scores) / total, sum(s[1] for s in scores) / total
