import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from efm.dataset import ConditionedDataset, fit_source_regressor, make_synthetic_2d
from efm.errors import InvalidConfigError, InvalidInputError, TrainingAborted
from efm.interpolant import KernelRegression, KernelSpec, spacetime_psi
from efm.training import (
    TrainConfig,
    efm_supervision,
    load_training_checkpoint,
    otcfm_supervision,
    sample_convhull,
    save_training_checkpoint,
    select_condition_subset,
    train_efm,
    train_otcfm_baseline,
)
from efm.transport import ClusterMMOTSampler


def small_config(**kw):
    base = dict(iterations=30, batch_size=16, hidden=(16, 16), K=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _same_params(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


class TestConfig:
    def test_defaults_valid(self):
        TrainConfig().validate()

    def test_errors_listed_per_field(self):
        with pytest.raises(InvalidConfigError) as err:
            TrainConfig.from_dict({"batch_size": 0, "lr": -1, "coupling": "x", "ema_decay": 1.0})
        msg = str(err.value)
        for field in ("batch_size", "lr", "coupling", "ema_decay"):
            assert f"{field}:" in msg

    def test_unknown_field(self):
        with pytest.raises(InvalidConfigError, match="bogus: unknown field"):
            TrainConfig.from_dict({"bogus": 1})

    def test_too_many_conditions(self, small_dataset):
        with pytest.raises(InvalidConfigError, match="conditions_per_step"):
            small_config(conditions_per_step=5).validate(small_dataset)

    def test_round_trip(self):
        cfg = small_config(kernel=KernelSpec(kind="linear"), ema_decay=0.5)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestConditionSubset:
    def test_full_set(self, rng):
        conds = rng.uniform(size=(5, 2))
        assert sorted(select_condition_subset(conds, 5, rng).tolist()) == list(range(5))

    def test_singleton(self, rng):
        assert len(select_condition_subset(rng.uniform(size=(5, 2)), 1, rng)) == 1

    def test_nearest_neighbour(self):
        conds = np.array([[0.0], [0.1], [5.0]])
        for seed in range(20):
            idx = select_condition_subset(conds, 2, np.random.default_rng(seed))
            if idx[0] == 0:
                assert idx.tolist() == [0, 1]
                return
        pytest.fail("anchor 0 never drawn")

    def test_bad_count(self, rng):
        with pytest.raises(InvalidInputError):
            select_condition_subset(rng.uniform(size=(3, 2)), 4, rng)


class TestConvHull:
    def test_single_point(self, rng):
        np.testing.assert_array_equal(sample_convhull([[0.3, 0.4]], rng), [0.3, 0.4])

    def test_segment_is_uniform(self):
        pts = sample_convhull([[0.0, 0.0], [2.0, 1.0]], np.random.default_rng(3), n=10_000)
        np.testing.assert_allclose(pts[:, 1], pts[:, 0] / 2, atol=1e-15)
        assert kstest(pts[:, 0] / 2, "uniform").pvalue > 0.01

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_inside_hull(self, m, k, seed):
        from efm.hull import hull_weights

        rng = np.random.default_rng(seed)
        pts = rng.uniform(size=(m, k))
        w = hull_weights(pts, 50, rng)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


class TestSupervision:
    def test_consistency_with_spacetime_psi(self, small_dataset, rng):
        cfg = small_config()
        src = fit_source_regressor(small_dataset)
        batch = efm_supervision(small_dataset, src, cfg, rng)
        reg = KernelRegression(small_dataset.conditions[batch.cond_idx], cfg.kernel)
        for b in range(len(batch.t)):
            value, jac = spacetime_psi(batch.x0[b], reg.fit(batch.targets[b]), batch.t[b], batch.c[b])
            np.testing.assert_allclose(batch.psi[b], value, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(batch.jac[b], jac, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("coupling", ["mmot-cluster", "ggc", "independent"])
    def test_targets_come_from_their_condition(self, small_dataset, rng, coupling):
        cfg = small_config(coupling=coupling)
        src = fit_source_regressor(small_dataset)
        for _ in range(5):
            batch = efm_supervision(small_dataset, src, cfg, rng)
            for j, ci in enumerate(batch.cond_idx):
                np.testing.assert_array_equal(batch.targets[:, j], small_dataset.samples[ci][batch.target_rows[:, j]])

    def test_repeats_for_probes(self, small_dataset, rng):
        cfg = small_config(time_samples=2, condition_probes=3)
        batch = efm_supervision(small_dataset, fit_source_regressor(small_dataset), cfg, rng)
        assert len(batch.t) == 16 * 6

    def test_source_drift_flag(self, small_dataset):
        src = fit_source_regressor(small_dataset)
        a = efm_supervision(small_dataset, src, small_config(), np.random.default_rng(1))
        b = efm_supervision(small_dataset, src, small_config(source_drift=True), np.random.default_rng(1))
        expected = (1 - a.t)[:, None, None] * src.weight[None]
        np.testing.assert_allclose(b.jac[:, :, 1:] - a.jac[:, :, 1:], expected, atol=1e-12)

    def test_otcfm_condition_columns_zero(self, small_dataset, rng):
        t, c, psi, jac = otcfm_supervision(small_dataset, fit_source_regressor(small_dataset), small_config(), rng)
        assert np.all(jac[:, :, 1:] == 0.0)
        assert len(t) == 16 * 4


class TestTraining:
    def test_zero_iterations_keeps_init(self, small_dataset):
        from efm.model import init_model

        res = train_efm(small_dataset, small_config(iterations=0))
        assert _same_params(res.model, init_model(2, 2, (16, 16), seed=0))
        assert res.loss_trace == []

    def test_deterministic_replay(self, small_dataset):
        a = train_efm(small_dataset, small_config())
        b = train_efm(small_dataset, small_config())
        assert _same_params(a.model, b.model)
        assert a.loss_trace == b.loss_trace

    def test_resume_equals_single_run(self, small_dataset, tmp_path):
        full = train_efm(small_dataset, small_config(iterations=40, ema_decay=0.9))
        half = train_efm(small_dataset, small_config(iterations=25, ema_decay=0.9))
        path = tmp_path / "ck.json"
        save_training_checkpoint(path, half, small_config(iterations=25, ema_decay=0.9), small_dataset)
        loaded, _ = load_training_checkpoint(path)
        rest = train_efm(small_dataset, small_config(iterations=15, ema_decay=0.9), resume=loaded)
        assert _same_params(rest.model, full.model)
        assert _same_params(rest.inference_model, full.inference_model)
        assert rest.loss_trace == full.loss_trace
        assert rest.iteration == 40

    def test_resume_method_mismatch(self, small_dataset):
        half = train_otcfm_baseline(small_dataset, small_config(iterations=2))
        with pytest.raises(InvalidConfigError):
            train_efm(small_dataset, small_config(iterations=2), resume=half)

    def test_ema_tracks_params(self, small_dataset):
        res = train_efm(small_dataset, small_config(iterations=5, ema_decay=0.5))
        assert res.ema is not None
        assert not _same_params(res.inference_model, res.model)
        assert train_efm(small_dataset, small_config(iterations=5)).inference_model is not None

    def test_periodic_checkpoints(self, small_dataset):
        seen = []
        train_efm(small_dataset, small_config(iterations=10, checkpoint_every=4), on_checkpoint=lambda r: seen.append(r.iteration))
        assert seen == [4, 8]

    def test_skip_budget(self, small_dataset, monkeypatch):
        import efm.training as training

        def broken(*args, **kwargs):
            raise training.CouplingFailure("forced")

        monkeypatch.setattr(training, "efm_supervision", broken)
        with pytest.raises(TrainingAborted):
            train_efm(small_dataset, small_config(iterations=10))

    def test_otcfm_loss_decreases(self):
        ds = make_synthetic_2d(n_per_cluster=50, seed=1)
        res = train_otcfm_baseline(ds, small_config(iterations=5000, batch_size=32, hidden=(32, 32)))
        losses = np.array([v for _, v in res.loss_trace])
        assert losses[-200:].mean() < 0.5 * losses[:200].mean()

    def test_unconditional_reduction(self):
        # k = 0: both trainers see identical straight-line batches.
        ds = ConditionedDataset(1, 0, np.zeros((1, 0)), [np.linspace(-1, 1, 16)[:, None]], [], [])
        cfg = small_config(conditions_per_step=1, kernel=KernelSpec(kind="linear"), iterations=20)
        a, b = train_otcfm_baseline(ds, cfg), train_efm(ds, cfg)
        for pa, pb in zip(a.model.params, b.model.params):
            np.testing.assert_allclose(pa, pb, atol=1e-6)

    def test_cluster_sampler_is_used(self, small_dataset, monkeypatch):
        calls = []
        original = ClusterMMOTSampler.sample

        def spy(self, n, rng):
            calls.append(n)
            return original(self, n, rng)

        monkeypatch.setattr(ClusterMMOTSampler, "sample", spy)
        train_efm(small_dataset, small_config(iterations=3))
        assert calls == [16, 16, 16]

    def test_checkpoint_round_trip(self, small_dataset, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = train_efm(small_dataset, small_config(iterations=3, ema_decay=0.9))
        save_training_checkpoint(tmp_path / "c.json", res, small_config(), small_dataset)
        back, payload = load_training_checkpoint(tmp_path / "c.json")
        assert _same_params(back.model, res.model)
        assert _same_params(back.inference_model, res.inference_model)
        assert back.rng.bit_generator.state == res.rng.bit_generator.state
        assert payload["train_conditions"] == small_dataset.conditions.tolist()
