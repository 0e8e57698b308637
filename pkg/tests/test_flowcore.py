import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipalab.errors import AdapterError, NonFiniteError, ShapeError
from ipalab.flowcore import (FlowBatch, VelocityField, adapter_merge, fm_loss, interpolate,
                             load_checkpoint, sample_ode, save_checkpoint, target_velocity)
from ipalab.oracles import grad_check

from conftest import make_batch

finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestInterpolate:
    def test_endpoints(self):
        z0, z1 = np.array([1.0, -2.0]), np.array([3.0, 5.0])
        assert np.array_equal(interpolate(z0, z1, 0.0), z0)
        assert np.array_equal(interpolate(z0, z1, 1.0), z1)

    def test_midpoint(self):
        assert np.allclose(interpolate([0.0, 0.0], [2.0, 4.0], 0.5), [1.0, 2.0])

    @given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
           st.floats(0.0, 1.0))
    def test_on_segment(self, a, b, t):
        z0, z1 = np.array(a), np.array(b)
        zt = interpolate(z0, z1, t)
        # zt - z0 is parallel to v and scaled by t
        assert np.allclose(zt - z0, t * target_velocity(z0, z1), atol=1e-9 * (1 + np.abs(z1 - z0).max()))

    @pytest.mark.parametrize("t", [-0.1, 1.5, np.nan])
    def test_t_out_of_range(self, t):
        with pytest.raises(ValueError):
            interpolate([0.0], [1.0], t)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            interpolate(np.zeros(2), np.zeros(3), 0.5)

    def test_rowwise_times(self):
        z0, z1 = np.zeros((3, 2)), np.ones((3, 2))
        zt = interpolate(z0, z1, np.array([0.0, 0.5, 1.0]))
        assert np.allclose(zt[:, 0], [0.0, 0.5, 1.0])


def test_target_velocity_is_difference():
    assert np.array_equal(target_velocity([1.0, 2.0], [4.0, 0.0]), [3.0, -2.0])


def test_nonfinite_endpoint_rejected():
    with pytest.raises(NonFiniteError):
        target_velocity([np.inf], [0.0])


class TestFlowBatch:
    def test_consistency(self, rng):
        b = make_batch(rng, n=8)
        assert len(b) == 8
        assert np.allclose(b.zt, b.t[:, None] * b.z1 + (1 - b.t[:, None]) * b.z0)
        assert np.array_equal(b.v, b.z1 - b.z0)

    def test_subset_and_with_t(self, rng):
        b = make_batch(rng, n=8)
        s = b.subset(slice(2, 5))
        assert len(s) == 3 and np.array_equal(s.z0, b.z0[2:5])
        b2 = b.with_t(np.zeros(8))
        assert np.array_equal(b2.zt, b.z0)

    def test_bad_mask(self, rng):
        with pytest.raises(ValueError):
            FlowBatch.from_endpoints(np.zeros((2, 3)), np.ones((2, 3)), [0.1, 0.2], np.zeros((2, 1)),
                                     mask=np.full((2, 3), 0.5))

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            FlowBatch.from_endpoints(np.zeros((2, 3)), np.ones((2, 3)), [0.1], np.zeros((2, 1)))


class TestVelocityField:
    def test_output_shape(self, small_ref, rng):
        out = small_ref.predict(rng.standard_normal((7, 5)), rng.uniform(size=7),
                                rng.standard_normal((7, 3)))
        assert out.shape == (7, 5)

    def test_scalar_t_and_single_condition_broadcast(self, small_ref, rng):
        z = rng.standard_normal((4, 5))
        c = rng.standard_normal(3)
        a = small_ref.predict(z, 0.3, c)
        b = small_ref.predict(z, np.full(4, 0.3), np.tile(c, (4, 1)))
        assert np.array_equal(a, b)

    def test_wrong_dims(self, small_ref):
        with pytest.raises(ShapeError):
            small_ref.predict(np.zeros((2, 4)), 0.5, np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            small_ref.predict(np.zeros((2, 5)), 0.5, np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            small_ref.predict(np.zeros((2, 5)), [0.1, 0.2, 0.3], np.zeros((2, 3)))

    def test_reference_is_read_only(self, small_ref):
        with pytest.raises(AdapterError):
            small_ref.set_params(small_ref.get_params())
        with pytest.raises(ValueError):
            small_ref.weights[0][0, 0] = 1.0

    def test_fresh_adapter_leaves_outputs_unchanged(self, small_ref, rng):
        pol = small_ref.with_adapter(4, seed=3)
        z, t, c = rng.standard_normal((6, 5)), rng.uniform(size=6), rng.standard_normal((6, 3))
        assert np.array_equal(pol.predict(z, t, c), small_ref.predict(z, t, c))
        assert all(np.all(b == 0) for _, b in pol.adapter)

    def test_adapter_trains_only_low_rank_factors(self, small_ref):
        pol = small_ref.with_adapter(2)
        expected = sum(a.size + b.size for a, b in pol.adapter)
        assert pol.n_params == expected
        assert pol.n_params < small_ref.n_params

    def test_adapter_rank_validation(self, small_ref):
        with pytest.raises(ValueError):
            small_ref.with_adapter(0)

    def test_merge_matches_adapter(self, moved_policy, rng):
        merged = adapter_merge(moved_policy)
        z, t, c = rng.standard_normal((5, 5)), rng.uniform(size=5), rng.standard_normal((5, 3))
        assert np.allclose(merged.predict(z, t, c), moved_policy.predict(z, t, c), atol=1e-12)
        with pytest.raises(AdapterError):
            adapter_merge(merged)

    def test_params_round_trip(self, moved_policy):
        p = moved_policy.get_params()
        moved_policy.set_params(p * 2)
        assert np.array_equal(moved_policy.get_params(), p * 2)
        with pytest.raises(ShapeError):
            moved_policy.set_params(p[:-1])


class TestFmLoss:
    def test_gradient_full_model(self, rng):
        model = VelocityField.init(5, 3, hidden=(16, 16), seed=1)
        b = make_batch(rng)

        def f(p):
            model.set_params(p)
            return fm_loss(model, b)

        assert grad_check(f, model.get_params(), n_coords=100).max_rel_error <= 1e-5

    def test_gradient_adapter(self, moved_policy, rng):
        b = make_batch(rng)

        def f(p):
            moved_policy.set_params(p)
            return fm_loss(moved_policy, b)

        assert grad_check(f, moved_policy.get_params(), n_coords=100).max_rel_error <= 1e-5

    def test_value_is_mean_squared_error(self, moved_policy, rng):
        b = make_batch(rng)
        pred = moved_policy.predict(b.zt, b.t, b.c)
        loss, _ = fm_loss(moved_policy, b)
        assert loss == pytest.approx(np.mean(np.sum((pred - b.v) ** 2, axis=1)), rel=1e-12)

    def test_reference_cannot_be_trained(self, small_ref, rng):
        with pytest.raises(AdapterError):
            fm_loss(small_ref, make_batch(rng))


class TestSampleOde:
    def test_constant_field_is_exact(self):
        class Shift:
            def predict(self, z, t, c):
                return np.ones_like(z) * 2.0

        z = sample_ode(Shift(), np.zeros((3, 2)), np.zeros((3, 1)), 7)
        assert np.allclose(z, 2.0)

    def test_linear_field_converges(self):
        # dz/dt = z has exact solution z0 * e; Euler error shrinks like 1/n
        class Lin:
            def predict(self, z, t, c):
                return z

        errs = [abs(sample_ode(Lin(), np.ones(1), np.zeros(1), n)[0] - np.e) for n in (50, 100, 200)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)

    def test_non_finite_reports_step(self):
        class Blow:
            def predict(self, z, t, c):
                return np.where(t[:, None] > 0.4, np.inf, 0.0) * np.ones_like(z)

        with pytest.raises(NonFiniteError) as exc:
            sample_ode(Blow(), np.zeros((1, 2)), np.zeros((1, 1)), 10)
        assert exc.value.step == 5

    @pytest.mark.parametrize("n", [0, -1, 2.5])
    def test_bad_step_count(self, small_ref, n):
        with pytest.raises(ValueError):
            sample_ode(small_ref, np.zeros((1, 5)), np.zeros((1, 3)), n)


class TestCheckpoint:
    def test_round_trip_bitwise(self, moved_policy, tmp_path, rng):
        path = tmp_path / "m.npz"
        moved_policy.meta["note"] = "x"
        save_checkpoint(moved_policy, path)
        back = load_checkpoint(path)
        assert back.role == "policy" and back.meta == {"note": "x"}
        assert np.array_equal(back.get_params(), moved_policy.get_params())
        z, t, c = rng.standard_normal((4, 5)), rng.uniform(size=4), rng.standard_normal((4, 3))
        assert np.array_equal(back.predict(z, t, c), moved_policy.predict(z, t, c))

    def test_reference_role_survives(self, small_ref, tmp_path):
        save_checkpoint(small_ref, tmp_path / "r.npz")
        back = load_checkpoint(tmp_path / "r.npz")
        assert back.role == "reference" and back.adapter is None

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.npz"
        np.savez(p, header=np.array('{"format": "other"}'))
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_rejects_newer_version(self, small_ref, tmp_path):
        import json
        p = tmp_path / "r.npz"
        save_checkpoint(small_ref, p)
        with np.load(p) as d:
            arrays = dict(d)
        h = json.loads(str(arrays["header"]))
        h["version"] = 99
        arrays["header"] = np.array(json.dumps(h))
        np.savez(p, **arrays)
        with pytest.raises(ValueError):
            load_checkpoint(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 16))
def test_adapter_gradient_any_rank(rank, seed):
    ref = VelocityField.init(4, 2, hidden=(8,), seed=seed).frozen()
    pol = ref.with_adapter(rank, seed=seed)
    r = np.random.default_rng(seed)
    pol.set_params(0.1 * r.standard_normal(pol.n_params))
    b = make_batch(r, n=6, dim=4, cond_dim=2)

    def f(p):
        pol.set_params(p)
        return fm_loss(pol, b)

    assert grad_check(f, pol.get_params(), n_coords=30, seed=seed).max_rel_error <= 1e-5
