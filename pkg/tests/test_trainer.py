import math

import numpy as np
import pytest

from mpm.data import ExampleSet, SyntheticSpec, encode_and_filter, generate_synthetic, leave_one_out_split
from mpm.evaluation import evaluate
from mpm.model import MpmConfig, init_params
from mpm.trainer import DivergenceError, TrainConfig, loss_on_batch, train

CFG = MpmConfig(embedding_dim=8, history_size=5, tcn_levels=2, dilations=[1, 2], mlp_layers=[16, 8],
                output_mlp_layers=[16, 8], dropout_rate=0.1)


@pytest.fixture(scope="module")
def split():
    data = generate_synthetic(SyntheticSpec(150, 200, 5, 25, 0.0, seed=7))
    return leave_one_out_split(encode_and_filter(data.events), seed=0)


def fast(**kw):
    base = dict(batch_size=256, max_epochs=3, patience=3, learning_rate=0.005)
    base.update(kw)
    return TrainConfig(**base)


class TestLossOnBatch:
    def test_half_scores_give_ln2(self):
        p = init_params("mf", CFG, 4, 4)
        for t in p.values():
            t.data[...] = 0
        batch = ExampleSet(np.array([0, 1]), np.zeros((2, 5), np.int64), np.array([2, 3]), np.array([1, 0]))
        assert loss_on_batch("mf", batch, p, CFG).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_duplicated_batch_same_mean(self):
        p = init_params("mpm", CFG, 10, 40, seed=1)
        rng = np.random.default_rng(0)
        b = ExampleSet(rng.integers(0, 10, 4), rng.integers(0, 40, (4, 5)), rng.integers(0, 40, 4), np.array([1, 0, 1, 0]))
        doubled = b.take(np.r_[np.arange(4), np.arange(4)])
        assert loss_on_batch("mpm", doubled, p, CFG).item() == pytest.approx(loss_on_batch("mpm", b, p, CFG).item(), rel=1e-6)

    def test_empty(self):
        p = init_params("mf", CFG, 2, 2)
        empty = ExampleSet(np.zeros(0, np.int64), np.zeros((0, 5), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
        with pytest.raises(ValueError):
            loss_on_batch("mf", empty, p, CFG)


class TestTrain:
    def test_loss_decreases(self, split):
        _, report = train("mpm", split, CFG, fast(max_epochs=4, patience=4))
        assert report.losses[-1] < report.losses[0]

    def test_deterministic(self, split):
        _, a = train("no-detector", split, CFG, fast(max_epochs=2, patience=2, seed=3))
        _, b = train("no-detector", split, CFG, fast(max_epochs=2, patience=2, seed=3))
        np.testing.assert_allclose(a.losses, b.losses, atol=1e-6)
        assert [e.val_hr10 for e in a.epochs] == [e.val_hr10 for e in b.epochs]

    def test_seed_changes_trajectory(self, split):
        _, a = train("mf", split, CFG, fast(max_epochs=1, patience=1, seed=1))
        _, b = train("mf", split, CFG, fast(max_epochs=1, patience=1, seed=2))
        assert a.losses != b.losses

    def test_constant_metric_patience_one(self, split):
        # zero learning rate keeps validation HR fixed, so epoch 2 is the first stale one
        _, report = train("mf", split, CFG, fast(max_epochs=10, patience=1, learning_rate=0.0))
        assert len(report.epochs) == 2
        assert report.best_epoch == 1 and report.stopped_early

    def test_best_epoch_restored(self, split):
        params, report = train("mf", split, CFG, fast(max_epochs=4, patience=4, learning_rate=0.02))
        res = evaluate("mf", params, split, "validation", CFG)
        assert res.hr[10] == pytest.approx(report.best.val_hr10)

    def test_divergence(self, split):
        p = init_params("mf", CFG, split.num_users, split.num_items)
        p["item_embedding"].data[0] = np.nan
        with pytest.raises(DivergenceError) as info:
            train("mf", split, CFG, fast(), params=p)
        assert info.value.epoch == 1

    def test_on_epoch_callback(self, split):
        seen = []
        train("mf", split, CFG, fast(max_epochs=2, patience=2), on_epoch=seen.append)
        assert [r.epoch for r in seen] == [1, 2]

    def test_bad_config(self, split):
        with pytest.raises(ValueError):
            train("mf", split, CFG, TrainConfig(max_epochs=2, patience=5))

    def test_trained_beats_untrained(self, split):
        untrained = evaluate("mpm", init_params("mpm", CFG, split.num_users, split.num_items), split, "validation", CFG)
        params, _ = train("mpm", split, CFG, fast(max_epochs=10, patience=10))
        trained = evaluate("mpm", params, split, "validation", CFG)
        assert trained.hr[10] > untrained.hr[10]

    def test_max_epochs_does_not_change_early_epochs(self, split):
        _, short = train("no-detector", split, CFG, fast(max_epochs=1, patience=1, seed=4))
        _, long = train("no-detector", split, CFG, fast(max_epochs=3, patience=3, seed=4))
        assert short.losses[0] == long.losses[0]
        assert short.epochs[0].val_hr10 == long.epochs[0].val_hr10
