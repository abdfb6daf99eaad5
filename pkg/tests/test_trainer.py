import numpy as np
import pytest

from salgrid.exceptions import ConfigError, DimensionError, TrainingError
from salgrid.losses import LossWeights
from salgrid.model import VARIANTS, ModelConfig
from salgrid.trainer import (HISTORY_FIELDS, SaliencyDataset, TrainConfig, TrainState, ablation_grid,
                             adam_step, batch_loss, kfold_split, lr_schedule, make_synthetic_dataset,
                             sub_loss_minima, train_loop)

TOY = ModelConfig(input_w=32, input_h=32)


def scalar_state(p):
    return TrainState.for_params({"p": p})


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = np.array([1.5, -2.0])
        st = scalar_state(p)
        st.m["p"][:] = [0.2, -0.1]
        st.v["p"][:] = [0.04, 0.01]
        before = p.copy()
        adam_step({"p": p}, {"p": np.zeros(2)}, scalar_state(p), lr=0.1)
        np.testing.assert_array_equal(p, before)
        adam_step({"p": p}, {"p": np.zeros(2)}, st, lr=0.1)
        np.testing.assert_allclose(st.m["p"], [0.18, -0.09])
        np.testing.assert_allclose(st.v["p"], [0.04 * 0.999, 0.01 * 0.999])

    def test_first_step_hand_oracle(self):
        for g in (3.0, -0.5, 1e-3):
            p = np.array([0.0])
            adam_step({"p": p}, {"p": np.array([g])}, scalar_state(p), lr=0.01)
            m_hat = (0.1 * g) / (1 - 0.9)
            v_hat = (0.001 * g * g) / (1 - 0.999)
            assert abs(p[0] - (-0.01 * m_hat / (np.sqrt(v_hat) + 1e-8))) <= 1e-15
            assert abs(p[0] + 0.01 * g / (abs(g) + 1e-8)) <= 1e-12

    def test_constant_gradient_limit(self):
        p = np.array([0.0])
        st = scalar_state(p)
        prev = 0.0
        for _ in range(1000):
            adam_step({"p": p}, {"p": np.array([0.7])}, st, lr=1e-3)
            step, prev = p[0] - prev, p[0]
        assert abs(step + 1e-3) <= 0.01 * 1e-3

    def test_scalar_simulation_oracle(self):
        rng = np.random.default_rng(0)
        gs = rng.standard_normal(50)
        p = np.array([0.3])
        st = scalar_state(p)
        x, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            adam_step({"p": p}, {"p": np.array([g])}, st, lr=0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert abs(p[0] - x) <= 1e-12 and st.step == 50

    def test_shape_mismatch(self):
        p = np.zeros(3)
        with pytest.raises(DimensionError):
            adam_step({"p": p}, {"p": np.zeros(2)}, scalar_state(p), lr=0.1)
        with pytest.raises(DimensionError):
            adam_step({"p": p}, {"q": np.zeros(3)}, scalar_state(p), lr=0.1)


class TestSchedule:
    def test_protocol_values(self):
        assert lr_schedule(0) == 1e-5
        assert lr_schedule(3) == pytest.approx(1e-6, rel=1e-12)
        assert lr_schedule(6) == pytest.approx(1e-7, rel=1e-12)
        assert lr_schedule(7) == lr_schedule(6)

    def test_non_increasing_and_closed_form(self):
        lrs = [lr_schedule(e) for e in range(30)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        for e, lr in enumerate(lrs):
            assert lr == pytest.approx(1e-5 * 10.0 ** -(e // 3), rel=1e-12)

    def test_constant_and_negative(self):
        assert lr_schedule(10, 0.01, every=None) == 0.01
        with pytest.raises(ValueError):
            lr_schedule(-1)


class TestFolds:
    def test_thousand_into_ten(self):
        plan = kfold_split(1000, 10, seed=0)
        assert [len(s) for s in plan.subsets] == [100] * 10

    @pytest.mark.parametrize("n,k,seed", [(10, 10, 0), (37, 5, 1), (101, 10, 2), (12, 3, 3)])
    def test_partition(self, n, k, seed):
        plan = kfold_split(n, k, seed)
        allidx = np.concatenate(plan.subsets)
        assert sorted(allidx.tolist()) == list(range(n))
        sizes = [len(s) for s in plan.subsets]
        assert max(sizes) - min(sizes) <= 1
        for i in range(k):
            tr, va, te = plan.assignment(i)
            assert np.array_equal(te, plan.subsets[i]) and np.array_equal(va, plan.subsets[(i + 1) % k])
            assert len(tr) + len(va) + len(te) == n
            assert not (set(tr) & set(va)) and not (set(tr) & set(te))

    def test_deterministic(self):
        a, b = kfold_split(50, 10, seed=4), kfold_split(50, 10, seed=4)
        assert all(np.array_equal(x, y) for x, y in zip(a.subsets, b.subsets))

    def test_too_few_items(self):
        with pytest.raises(ValueError):
            kfold_split(5, 10)


class TestDataset:
    def test_synthetic(self):
        d = make_synthetic_dataset(3, width=32, height=32, seed=1)
        assert d.images.shape == (3, 3, 32, 32) and d.maps.shape == (3, 32, 32)
        assert np.all(np.abs(d.maps.sum(axis=(1, 2)) - 1) <= 1e-9)
        assert np.all(d.fixations.sum(axis=(1, 2)) >= 1)
        assert d.images.min() >= 0 and d.images.max() <= 1

    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            SaliencyDataset(np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 5)), np.zeros((2, 4, 4)))


class TestTrainLoop:
    def test_empty_validation(self):
        d = make_synthetic_dataset(2)
        with pytest.raises(ConfigError):
            train_loop(d, d.subset([]), TOY, TrainConfig(epochs=1))

    def test_deterministic_history(self):
        d = make_synthetic_dataset(5, seed=2)
        tc = TrainConfig(epochs=2, batch_size=2, base_lr=1e-3, seed=11)
        a = train_loop(d.subset([0, 1, 2]), d.subset([3, 4]), TOY, tc)
        b = train_loop(d.subset([0, 1, 2]), d.subset([3, 4]), TOY, tc)
        assert a.history_csv() == b.history_csv()
        lines = a.history_csv().splitlines()
        assert lines[0] == ",".join(HISTORY_FIELDS) and len(lines) == 5
        assert lines[1].startswith("0,train,") and lines[2].startswith("0,val,")

    def test_early_stop_fires_after_patience(self):
        # lr 0 leaves weights fixed; only BatchNorm running statistics move
        d = make_synthetic_dataset(4, seed=3)
        res = train_loop(d.subset([0, 1]), d.subset([2, 3]), TOY,
                         TrainConfig(epochs=30, base_lr=0.0, patience=5))
        vals = [r for r in res.history if r["split"] == "val"]
        assert len(vals) < 30
        assert vals[-1]["epoch"] - res.state.best_epoch == 5
        assert min(r["loss"] for r in vals) == vals[res.state.best_epoch]["loss"]

    def test_early_stop_bound(self):
        d = make_synthetic_dataset(6, seed=4)
        res = train_loop(d.subset([0, 1, 2, 3]), d.subset([4, 5]), TOY,
                         TrainConfig(epochs=12, base_lr=3e-2, lr_every=None, patience=2, seed=1))
        last = max(r["epoch"] for r in res.history)
        assert last - res.state.best_epoch <= 2
        assert res.state.bad_epochs <= 2

    def test_best_params_kept(self):
        d = make_synthetic_dataset(6, seed=4)
        tc = TrainConfig(epochs=4, base_lr=1e-2, lr_every=None, patience=None, seed=1)
        res = train_loop(d.subset([0, 1, 2, 3]), d.subset([4, 5]), TOY, tc)
        from salgrid.trainer import validate
        best = min(r["loss"] for r in res.history if r["split"] == "val")
        assert validate(d.subset([4, 5]), TOY, res.params)["loss"] == best

    def test_degenerate_batch_identified(self):
        d = make_synthetic_dataset(3, seed=0)
        d.fixations[1] = 0.0
        with pytest.raises(TrainingError, match="0001"):
            train_loop(d.subset([0, 1]), d.subset([2]), TOY, TrainConfig(epochs=1, batch_size=1))

    def test_bce_variant_trains(self):
        d = make_synthetic_dataset(3, seed=0)
        cfg = ModelConfig.for_variant("BaseNet", input_w=32, input_h=32)
        res = train_loop(d.subset([0, 1]), d.subset([2]), cfg, TrainConfig(epochs=1, base_lr=1e-3))
        assert np.isfinite(res.history[0]["loss"])

    def test_batch_loss_is_image_mean(self):
        d = make_synthetic_dataset(2, seed=5)
        preds = 0.2 + 0.6 * d.maps[:, None] / d.maps.max()
        v, g = batch_loss(preds, d.maps, d.fixations, "CB", LossWeights())
        from salgrid.losses import combined_loss
        parts = [combined_loss(preds[i, 0], d.maps[i], d.fixations[i]) for i in range(2)]
        assert abs(v - (parts[0][0] + parts[1][0]) / 2) <= 1e-12
        np.testing.assert_allclose(g[1, 0], parts[1][1] / 2)


class TestAblation:
    def test_grid_shape_and_determinism(self):
        d = make_synthetic_dataset(6, seed=0)
        tc = TrainConfig(epochs=1, base_lr=1e-3, lr_every=None)
        a = ablation_grid(d, seed=3, base_config=TOY, train_config=tc, k=3)
        b = ablation_grid(d, seed=3, base_config=TOY, train_config=tc, k=3)
        assert [r[0] for r in a.rows] == list(VARIANTS)
        assert a.to_csv() == b.to_csv()
        lines = a.to_csv().splitlines()
        assert lines[0] == "group,perception,perception,perception,non-perception,non-perception,non-perception"
        assert lines[1] == "variant,CC,SIM,NSS,sAUC,AUC,KLD"
        assert len(lines) == 11
        assert "sAUC" in a.to_table()

    def test_calibration_harness(self):
        d = make_synthetic_dataset(4, seed=0)
        minima, w = sub_loss_minima(d.subset([0, 1]), d.subset([2, 3]), TOY,
                                    TrainConfig(epochs=1, base_lr=1e-3, lr_every=None))
        assert set(minima) == {"nss", "kld", "cc", "sim"}
        assert w.nss < 0 and w.kld > 0 and w.cc < 0 and w.sim < 0
