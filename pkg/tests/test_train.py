"""Trainer: schedule, loss composition, group discipline, smoke run."""

import math

import numpy as np
import pytest

from musenet import dataset as D
from musenet import model as M
from musenet import tensor as T
from musenet import train as TR
from musenet.errors import UsageError
from musenet.tensor import LrGroup


def tiny_model_config():
    return M.ModelConfig(input_size=32, stem_channels=4,
                         stage_channels=(8, 12, 16, 24), num_identities=8)


def tiny_model(seed=0):
    return M.build_model(tiny_model_config(), np.random.default_rng(seed))


class TestLrSchedule:
    def test_initial_rates(self):
        assert TR.lr_at(0, TR.TrainConfig()) == (0.0005, 0.005)

    def test_first_milestone(self):
        base, boosted = TR.lr_at(35, TR.TrainConfig())
        assert base == pytest.approx(0.00005)
        assert boosted == pytest.approx(0.0005)

    def test_second_milestone_compounds(self):
        base, boosted = TR.lr_at(50, TR.TrainConfig())
        assert base == pytest.approx(0.000005)
        assert boosted == pytest.approx(0.00005)

    def test_out_of_range_epoch_rejected(self):
        with pytest.raises(UsageError):
            TR.lr_at(60, TR.TrainConfig())

    def test_boosted_is_ten_times_base_by_default(self):
        config = TR.TrainConfig()
        assert config.boosted_lr == pytest.approx(10 * config.base_lr)


class TestLosses:
    def test_total_is_exact_composition(self, small_dataset):
        model = tiny_model()
        batch = D.load_training_batch(small_dataset, 4, 0, 0, seed=1)
        for lam in (0.5, 1.0, 2.0, 5.0):
            bundle, _ = TR.compute_losses(model, batch, lam, np.random.default_rng(0))
            expected = np.float32(bundle.l_id) + np.float32(lam) * np.float32(bundle.l_style)
            assert bundle.l_total == float(expected)
            assert bundle.l_total >= 0.0

    def test_untrained_identity_loss_near_uniform(self, small_dataset):
        model = tiny_model(seed=3)  # 8 identities -> ln 8
        batch = D.load_training_batch(small_dataset, 4, 0, 0, seed=2)
        bundle, _ = TR.compute_losses(model, batch, 1.0, np.random.default_rng(0))
        assert bundle.l_id == pytest.approx(math.log(8), abs=0.2)

    def test_zero_style_weight_blocks_style_gradient(self, small_dataset):
        model = tiny_model(seed=4)
        for state in model.spade_states():
            state.conv_w1.value.data[...] = 0.0
            state.conv_b1.value.data[...] = 0.0
        batch = D.load_training_batch(small_dataset, 4, 0, 0, seed=3)
        _, l_total = TR.compute_losses(model, batch, 0.0, np.random.default_rng(0))
        T.backward(l_total)
        for name, p in model.named_params():
            if name.startswith("style."):
                assert np.abs(p.grad).max() < 1e-7, name

    def test_style_gradient_flows_through_modulation(self, small_dataset):
        model = tiny_model(seed=5)
        batch = D.load_training_batch(small_dataset, 4, 0, 0, seed=4)
        _, l_total = TR.compute_losses(model, batch, 0.0, np.random.default_rng(0))
        T.backward(l_total)
        norms = [np.abs(p.grad).max() for name, p in model.named_params()
                 if name.startswith("style.")]
        assert max(norms) > 0.0  # the modulation path is the only route


class TestTrainStep:
    def test_group_discipline(self, small_dataset):
        model = tiny_model(seed=6)
        before = {name: p.value.data.copy() for name, p in model.named_params()}
        for _, p in model.named_params():
            p.value.grad[...] = 1.0
        base, boosted = TR._lr_groups(model)
        T.sgd_step(base, lr=0.1, momentum=0.0, weight_decay=0.0)
        T.sgd_step(boosted, lr=0.2, momentum=0.0, weight_decay=0.0)
        for name, p in model.named_params():
            delta = before[name] - p.value.data
            expected = 0.2 if p.lr_group is LrGroup.BOOSTED else 0.1
            np.testing.assert_allclose(delta, expected, rtol=1e-5, err_msg=name)

    def test_step_updates_and_returns_finite_bundle(self, small_dataset):
        model = tiny_model(seed=7)
        batch = D.load_training_batch(small_dataset, 4, 0, 0, seed=5)
        before = model.parameters()[0].value.data.copy()
        bundle = TR.train_step(model, batch, TR.TrainConfig(), 1e-3, 1e-2,
                               np.random.default_rng(0))
        assert np.isfinite([bundle.l_style, bundle.l_id, bundle.l_total]).all()
        assert not np.array_equal(before, model.parameters()[0].value.data)


@pytest.fixture(scope="module")
def short_config():
    return TR.TrainConfig(epochs=3, batch_per_platform=4, decay_epochs=(2,), seed=21)


class TestTrain:

    def test_run_writes_artifacts_and_learns(self, small_dataset, short_config, tmp_path):
        ckpt, log, model = TR.train(small_dataset, short_config, tiny_model_config(),
                                    tmp_path / "run")
        assert ckpt.is_file() and log.is_file()
        lines = log.read_text().splitlines()
        assert lines[0].split("\t") == ["epoch", "l_style", "l_id", "l_total", "lr_base", "lr_boosted"]
        assert len(lines) == 1 + short_config.epochs
        first = [float(v) for v in lines[1].split("\t")]
        last = [float(v) for v in lines[-1].split("\t")]
        assert last[3] < first[3]  # total loss fell over the smoke run

    def test_deterministic_checkpoints(self, small_dataset, short_config, tmp_path):
        a, _, _ = TR.train(small_dataset, short_config, tiny_model_config(), tmp_path / "a")
        b, _, _ = TR.train(small_dataset, short_config, tiny_model_config(), tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_identity_width_tracks_dataset(self, small_dataset, short_config, tmp_path):
        config = tiny_model_config()
        _, _, model = TR.train(small_dataset, short_config, config, tmp_path / "c")
        assert model.config.num_identities == len(small_dataset.train_ids)
