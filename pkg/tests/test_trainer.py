import math

import numpy as np
import pytest

from app.logic.graph import build_graph
from app.logic.pruner import prune_network
from app.logic.trainer import (
    MomentumSgd,
    TrainingDivergedError,
    accuracy,
    augment_batch,
    cosine_lr,
    evaluate,
    scratch_graph,
    softmax_cross_entropy,
    train,
    train_from_scratch,
)
from app.models.configs import TrainConfig
from app.models.data import Dataset, Split
from app.models.graph import LayerBlueprint
from app.models.search import SparsityPlan
from app.schemas import LayerKind
from tests.conftest import TINY_SHAPE, tiny_graph


def make_dataset(images: np.ndarray, labels: np.ndarray) -> Dataset:
    split = Split(images=images, labels=labels)
    return Dataset(train=split, test=split, mini_val=split.take(np.arange(0)), calibration=split)


@pytest.fixture
def dataset(rng) -> Dataset:
    images = (0.5 * rng.standard_normal((32, *TINY_SHAPE))).astype(np.float32)
    return make_dataset(images, rng.integers(0, 10, size=32))


class TestSchedule:
    def test_cosine_values(self):
        assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1)
        assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)
        assert cosine_lr(10, 10, 0.1) == pytest.approx(0.0)

    @pytest.mark.parametrize("step,total", [(0, 0), (-1, 10), (11, 10)])
    def test_cosine_rejects_bad_arguments(self, step, total):
        with pytest.raises(ValueError):
            cosine_lr(step, total, 0.1)

    def test_momentum_with_weight_decay(self):
        sgd = MomentumSgd(momentum=0.9, weight_decay=0.1)
        w = {"w": np.array([1.0], np.float32)}
        g = {"w": np.array([0.5], np.float32)}
        w = sgd.step(w, g, lr=0.1)
        assert w["w"][0] == pytest.approx(1.0 - 0.1 * 0.6)
        w2 = sgd.step(w, g, lr=0.1)
        velocity = 0.9 * 0.6 + 0.5 + 0.1 * w["w"][0]
        assert w2["w"][0] == pytest.approx(w["w"][0] - 0.1 * velocity, rel=1e-6)


class TestLoss:
    def test_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.zeros((4, 10)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(math.log(10))
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-7)
        assert grad[0, 0] == pytest.approx((0.1 - 1.0) / 4)

    def test_perfect_accuracy(self):
        labels = np.array([3, 1, 4, 1, 5])
        assert accuracy(np.eye(10)[labels], labels) == 1.0

    def test_random_predictions_near_chance(self):
        rng = np.random.default_rng(0)
        acc = accuracy(rng.standard_normal((1000, 10)), rng.integers(0, 10, size=1000))
        assert abs(acc - 0.1) <= 0.03

    def test_empty_split(self, graph):
        with pytest.raises(ValueError):
            evaluate(graph, Split(images=np.zeros((0, *TINY_SHAPE), np.float32), labels=np.zeros(0, np.int64)))

    def test_augmentation_keeps_shape(self, rng):
        images = rng.uniform(size=(6, 3, 8, 8)).astype(np.float32)
        out = augment_batch(images, np.random.default_rng(0))
        assert out.shape == images.shape
        assert out.min() >= 0.0 and out.max() <= images.max()


class TestTraining:
    def test_zero_epochs_returns_graph(self, graph, dataset):
        result = train(graph, dataset, TrainConfig(epochs=0))
        assert result.graph is graph
        assert result.history == []

    def test_zero_learning_rate_changes_nothing(self, graph, dataset):
        result = train(graph, dataset, TrainConfig(epochs=2, lr0=0.0, batch_size=8))
        assert result.graph.is_identical(graph)

    def test_deterministic(self, graph, dataset):
        config = TrainConfig(epochs=2, batch_size=8, seed=5)
        assert train(graph, dataset, config).graph.is_identical(train(graph, dataset, config).graph)

    def test_history_per_epoch(self, graph, dataset):
        history = train(graph, dataset, TrainConfig(epochs=3, batch_size=16)).history
        assert [r.epoch for r in history] == [0, 1, 2]
        assert history[-1].lr < history[0].lr
        assert all(0.0 <= r.test_acc <= 1.0 for r in history)

    def test_memorizes_small_set(self, dataset):
        graph = build_graph(
            "overfit",
            [
                LayerBlueprint(kind=LayerKind.CONV, width=16),
                LayerBlueprint(kind=LayerKind.RELU),
                LayerBlueprint(kind=LayerKind.MAXPOOL, kernel=2, stride=2, pad=0),
                LayerBlueprint(kind=LayerKind.FLATTEN),
                LayerBlueprint(kind=LayerKind.LINEAR, width=10),
            ],
            TINY_SHAPE,
        )
        config = TrainConfig(epochs=300, lr0=0.05, batch_size=32, augment=False, weight_decay=0.0)
        trained = train(graph, dataset, config).graph
        assert evaluate(trained, dataset.train) >= 0.99

    def test_nan_inputs_diverge(self, graph, dataset):
        images = np.full_like(dataset.train.images, np.nan)
        with pytest.raises(TrainingDivergedError):
            train(graph, make_dataset(images, dataset.train.labels), TrainConfig(epochs=1))


class TestScratch:
    def test_zero_plan_rebuilds_original_init(self, graph):
        assert scratch_graph(SparsityPlan.zeros(graph.prunable_ids), graph, seed=0).is_identical(tiny_graph(0))

    def test_matches_pruned_architecture(self, graph, cache):
        plan = SparsityPlan(ratios=[("conv1", 0.5), ("conv2", 0.25)])
        pruned = prune_network(graph, plan, cache)
        fresh = scratch_graph(plan, graph, seed=1)
        assert fresh.parameter_count() == pruned.parameter_count()
        assert [s.c_out for s in fresh.layers] == [s.c_out for s in pruned.layers]

    def test_trains_pruned_architecture(self, graph, dataset):
        plan = SparsityPlan(ratios=[("conv1", 0.5), ("conv2", 0.5)])
        result = train_from_scratch(plan, graph, dataset, TrainConfig(epochs=1, batch_size=16))
        assert result.graph.layer("conv2").c_out == 4
        assert len(result.history) == 1
