import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from focalfuse.architectures import ModelConfig, ParamStore, init_params
from focalfuse.data import PhantomSpec, generate_dataset
from focalfuse.errors import ConfigError, FormatError, NumericError
from focalfuse.tensor import Tensor
from focalfuse.training import (LR_MAX, LR_MIN, OptimState, TrainLog, TrainingDiverged, adam_step,
                                cyclic_lr, load_checkpoint, save_checkpoint, train)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(PhantomSpec(num_classes=3), count=2, seed=5)


TINY = ModelConfig(base_channels=2, num_classes=3, focal_levels=1, dense_layers_per_block=1)


class TestCyclicLr:
    def test_bounds(self):
        assert cyclic_lr(0) == 0.0005
        assert cyclic_lr(100, half_cycle=100) == 0.003
        assert cyclic_lr(200, half_cycle=100) == 0.0005

    def test_midpoint(self):
        assert cyclic_lr(50, half_cycle=100) == pytest.approx(0.00175, abs=1e-18)

    @given(st.integers(0, 10 ** 6), st.integers(1, 500))
    @settings(max_examples=200)
    def test_periodic_and_bounded(self, it, half):
        lr = cyclic_lr(it, half_cycle=half)
        assert lr == cyclic_lr(it + 2 * half, half_cycle=half)
        assert LR_MIN <= lr <= LR_MAX

    @pytest.mark.parametrize("half", [1, 3, 100])
    def test_piecewise_linear(self, half):
        lrs = [cyclic_lr(i, half_cycle=half) for i in range(4 * half + 1)]
        step = (LR_MAX - LR_MIN) / half
        diffs = np.diff(lrs)
        for i, d in enumerate(diffs):
            rising = (i % (2 * half)) < half
            assert d == pytest.approx(step if rising else -step, rel=1e-9)

    def test_bad_half_cycle(self):
        with pytest.raises(ConfigError):
            cyclic_lr(3, half_cycle=0)


def _quadratic(a, c):
    return lambda x: [2 * ai * (xi - ci) for ai, xi, ci in zip(a, x, c)]


class TestAdam:
    def test_first_step_closed_form(self):
        p = ParamStore({"w": Tensor(np.array([0.5]))})
        st_ = OptimState.for_params(p)
        adam_step(p, {"w": np.array([1.0])}, st_, 0.001)
        assert p["w"].data[0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)
        assert st_.t == 1

    def test_zero_gradient_is_noop(self, rng):
        p = ParamStore({"w": Tensor(rng.standard_normal(5))})
        before = p["w"].data.copy()
        st_ = OptimState.for_params(p)
        adam_step(p, {"w": np.zeros(5)}, st_, 0.01)
        assert np.array_equal(p["w"].data, before) and st_.t == 1

    def test_missing_grad_treated_as_zero(self):
        p = ParamStore({"w": Tensor(np.ones(2))})
        st_ = OptimState.for_params(p)
        adam_step(p, {}, st_, 0.01)
        assert np.array_equal(p["w"].data, np.ones(2))

    def test_five_step_trajectory(self):
        a, c, x0 = [1.0, 3.0, 0.2], [0.5, -1.0, 2.0], [0.0, 1.0, -3.0]
        grad = _quadratic(a, c)
        lrs = [cyclic_lr(i, half_cycle=2) for i in range(5)]
        p = ParamStore({"x": Tensor(np.array(x0))})
        st_ = OptimState.for_params(p)
        for lr in lrs:
            adam_step(p, {"x": np.array(grad(p["x"].data.tolist()))}, st_, lr)
        expect = oracles.adam_loop(x0, grad, lrs)[-1]
        np.testing.assert_allclose(p["x"].data, expect, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient_names_parameter(self, bad):
        p = ParamStore({"enc1.conv1.w": Tensor(np.ones(3))})
        with pytest.raises(NumericError, match="enc1.conv1.w"):
            adam_step(p, {"enc1.conv1.w": np.array([0.0, bad, 0.0])}, OptimState.for_params(p), 0.1)

    def test_second_moment_non_negative(self, rng):
        p = ParamStore({"w": Tensor(rng.standard_normal(10))})
        st_ = OptimState.for_params(p)
        for _ in range(3):
            adam_step(p, {"w": rng.standard_normal(10)}, st_, 0.01)
        assert (st_.v["w"] >= 0).all() and st_.m["w"].shape == (10,)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_params(TINY, 3)
        st_ = OptimState.for_params(params)
        st_.t = 7
        save_checkpoint(params, st_, TINY, tmp_path / "a.ckpt")
        back, st2, cfg = load_checkpoint(tmp_path / "a.ckpt")
        assert cfg == TINY and st2.t == 7
        assert list(back) == list(params)
        for n in params:
            assert back[n].data.tobytes() == params[n].data.tobytes()
        save_checkpoint(back, st2, cfg, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corrupt_payload_byte(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(TINY), None, TINY, path)
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="digest"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(TINY), None, TINY, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(TINY), None, TINY, path)
        path.write_bytes(path.read_bytes().replace(b'"format_version":1', b'"format_version":9'))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "x")

    def test_variant_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(TINY), None, TINY, path)
        msf = ModelConfig.from_dict({**TINY.to_dict(), "variant": "msf3d"})
        with pytest.raises(ConfigError, match="focal_fuse"):
            load_checkpoint(path, expected_config=msf)


class TestTrain:
    def test_deterministic_and_logs_schedule(self, tiny_data, tmp_path):
        runs = []
        for d in ("a", "b"):
            params, state, log = train(TINY, tiny_data, epochs=2, seed=4, half_cycle=2,
                                       checkpoint_dir=tmp_path / d)
            runs.append((params, log))
        (pa, la), (pb, lb) = runs
        assert la.records == lb.records and len(la.records) == 4
        assert all(pa[n].data.tobytes() == pb[n].data.tobytes() for n in pa)
        assert la.lrs() == [cyclic_lr(i, half_cycle=2) for i in range(4)]
        assert (tmp_path / "a" / "latest.ckpt").read_bytes() == (tmp_path / "b" / "latest.ckpt").read_bytes()
        assert [ep for ep, _ in la.validation] == [1, 2]

    def test_seed_changes_run(self, tiny_data):
        _, _, a = train(TINY, tiny_data, epochs=1, seed=0, validate_every=0)
        _, _, b = train(TINY, tiny_data, epochs=1, seed=1, validate_every=0)
        assert a.losses() != b.losses()

    def test_max_iterations(self, tiny_data):
        _, state, log = train(TINY, tiny_data, epochs=10, max_iterations=3, validate_every=0)
        assert len(log.records) == 3 and state.t == 3

    def test_log_file_round_trip(self, tiny_data, tmp_path):
        _, _, log = train(TINY, tiny_data, epochs=1, seed=2)
        log.write(tmp_path / "log.tsv")
        back = TrainLog.read(tmp_path / "log.tsv")
        assert back.records == log.records
        assert back.validation[0][1].mean_dsc == log.validation[0][1].mean_dsc

    def test_divergence_reports_iteration(self, tiny_data):
        params = init_params(TINY)
        params["head.b"].data[0] = np.inf
        with pytest.raises(NumericError):
            train(TINY, tiny_data, epochs=1, params=params)

    def test_divergence_from_non_finite_loss(self, tiny_data, monkeypatch):
        import focalfuse.training as tr

        real = tr.dice_ce_loss

        def flaky(logits, labels):
            out = real(logits, labels)
            if flaky.calls == 1:
                out.data = np.asarray(np.nan, dtype=out.data.dtype)
            flaky.calls += 1
            return out

        flaky.calls = 0
        monkeypatch.setattr(tr, "dice_ce_loss", flaky)
        with pytest.raises(TrainingDiverged) as info:
            train(TINY, tiny_data, epochs=1, validate_every=0)
        assert info.value.iteration == 1 and len(info.value.log.records) == 1

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train(TINY, [], epochs=1)

    def test_labels_beyond_classes(self, tiny_data):
        cfg = ModelConfig.from_dict({**TINY.to_dict(), "num_classes": 2})
        with pytest.raises(ConfigError, match="num_classes"):
            train(cfg, tiny_data, epochs=1)
