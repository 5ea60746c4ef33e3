"""
Training loops: baseline training, fine-tuning and training pruned
architectures from scratch. Momentum SGD with weight decay, cosine learning
rate stepped once per epoch, softmax cross-entropy.
"""

import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel
from scipy import special

from app.logic.graph import ModelGraph, blueprint_from_layers, build_graph
from app.logic.pruner import plan_widths
from app.models.configs import TrainConfig
from app.models.data import Dataset, Split
from app.models.runs import EpochRecord
from app.models.search import SparsityPlan

logger = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "lr", "train_loss", "train_acc", "test_acc"]
CROP_PAD = 4


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""
    pass


class TrainResult(BaseModel):
    graph: ModelGraph
    history: list[EpochRecord]


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValueError(f"cosine schedule needs a positive horizon, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


class MomentumSgd:
    """v ← μ·v + g + λ·w; w ← w − lr·v, per weight entry."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        updated = {}
        for name, w in weights.items():
            g = grads[name] + self.weight_decay * w
            v = self.momentum * self.velocities.get(name, np.zeros_like(w)) + g
            self.velocities[name] = v
            updated[name] = (w - lr * v).astype(np.float32)
        return updated


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    logits = logits.astype(np.float64)
    log_probs = special.log_softmax(logits, axis=1)
    n = len(labels)
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(np.float32)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and 4-pixel zero-pad random crop."""
    n, _, h, w = images.shape
    flipped = np.where(rng.random(n)[:, None, None, None] < 0.5, images[..., ::-1], images)
    padded = np.pad(flipped, ((0, 0), (0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)))
    dy = rng.integers(0, 2 * CROP_PAD + 1, size=n)
    dx = rng.integers(0, 2 * CROP_PAD + 1, size=n)
    return np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(graph: ModelGraph, split: Split, batch_size: int = 256) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return accuracy(graph.predict(split.images, batch_size), split.labels)


def train(graph: ModelGraph, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """
    Train all weights of `graph` on dataset.train.

    Args:
        graph: starting weights (fresh init for baselines, reconstructed for fine-tuning)
        dataset: needs train and test splits
        config: epochs, schedule and optimizer settings; epochs=0 returns the graph untouched

    Returns:
        trained graph and one EpochRecord per epoch
    """
    if config.epochs == 0:
        return TrainResult(graph=graph, history=[])
    if len(dataset.train) == 0:
        raise ValueError("training split is empty")

    rng = np.random.default_rng(config.seed)
    optimizer = MomentumSgd(config.momentum, config.weight_decay)
    history: list[EpochRecord] = []
    n = len(dataset.train)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images = dataset.train.images[idx]
            labels = dataset.train.labels[idx]
            if config.augment:
                images = augment_batch(images, rng)
            forward = graph.forward(images, keep_inputs=True)
            loss, dlogits = softmax_cross_entropy(forward.logits, labels)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, batch starting at {start} (lr {lr:.3e}); "
                    f"try a smaller --lr0 or disable augmentation to reproduce"
                )
            grads = graph.backward(forward, dlogits)
            graph = graph.copy_with(weights=optimizer.step(graph.weights, grads, lr))
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(forward.logits, axis=1) == labels))

        test_acc = evaluate(graph, dataset.test) if len(dataset.test) else 0.0
        record = EpochRecord(epoch=epoch, lr=lr, train_loss=loss_sum / n, train_acc=correct / n, test_acc=test_acc)
        history.append(record)
        logger.info(
            f"Epoch {epoch + 1}/{config.epochs}: lr {lr:.4f}, loss {record.train_loss:.4f}, "
            f"train acc {record.train_acc:.4f}, test acc {record.test_acc:.4f}"
        )
    return TrainResult(graph=graph, history=history)


def fine_tune(graph: ModelGraph, dataset: Dataset, config: TrainConfig) -> TrainResult:
    return train(graph, dataset, config)


def scratch_graph(plan: SparsityPlan, original: ModelGraph, seed: int = 0) -> ModelGraph:
    """The pruned architecture of `plan`, freshly initialized."""
    widths = plan_widths(original, plan)
    return build_graph(original.arch, blueprint_from_layers(original.layers, widths), original.input_shape, seed)


def train_from_scratch(
    plan: SparsityPlan,
    original: ModelGraph,
    dataset: Dataset,
    config: TrainConfig,
    seed: Optional[int] = None,
) -> TrainResult:
    graph = scratch_graph(plan, original, config.seed if seed is None else seed)
    logger.info(f"Training pruned {original.arch} from scratch: {graph.parameter_count()} parameters")
    return train(graph, dataset, config)
