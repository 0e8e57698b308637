from dataclasses import replace

import numpy as np
import pytest

from ipalab import objectives as obj
from ipalab import trainlab as tl
from ipalab.errors import DivergenceError, NonFiniteError


def _cfg(**kw):
    base = dict(steps=30, batch_size=16, delta_batch=32, adapter_rank=4)
    base.update(kw)
    return tl.TrainConfig(**base)


def test_adam_first_step_is_lr_sized():
    opt = tl.Adam(3, lr=0.1)
    p = opt.step(np.zeros(3), np.array([1.0, -2.0, 0.5]))
    assert np.allclose(p, [-0.1, 0.1, -0.1], atol=1e-6)


def test_make_optimizer():
    assert isinstance(tl.make_optimizer("sgd", 2, 0.1), tl.SGD)
    with pytest.raises(ValueError):
        tl.make_optimizer("rmsprop", 2, 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        tl.TrainConfig(steps=0)
    with pytest.raises(ValueError):
        tl.TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        tl.TrainConfig(batch_size=0)


def test_corrupted_training_data_keeps_body(tiny_world):
    spec = tiny_world[0]
    from ipalab.dataworld import generate_dataset, hand_mask
    z, c = tl.corrupted_training_data(spec, 100, 1.0, seed=4)
    clean, c2 = generate_dataset(spec, 100, seed=4)
    body = hand_mask(spec) == 0
    assert np.array_equal(c, c2) and np.array_equal(z[:, body], clean[:, body])


class TestTrain:
    def test_starts_at_anchor_with_zero_gap(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        res = tl.run_alignment(ref, cur, ev, spec, _cfg())
        assert res.record.rows[0][1] == pytest.approx(np.log(2.0), abs=1e-12)
        assert res.record.rows[0][2] == 0.0 and res.record.rows[0][5] == 0.0

    def test_zero_lr_keeps_parameters(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        pol = ref.with_adapter(4)
        p0 = pol.get_params()
        rec = tl.train(pol, ref, cur.good, _cfg(lr=0.0))
        assert np.array_equal(pol.get_params(), p0)
        assert np.all(rec.column("param_dev") == 0.0)
        assert np.allclose(rec.column("loss"), np.log(2.0), atol=1e-12)

    def test_reference_untouched(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        before = [a.copy() for a in ref._all_arrays()]
        tl.run_alignment(ref, cur, ev, spec, _cfg(objective=obj.ObjectiveConfig(kind="sft")))
        assert all(np.array_equal(a, b) for a, b in zip(before, ref._all_arrays()))

    def test_deterministic(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        a = tl.run_alignment(ref, cur, ev, spec, _cfg(seed=3))
        b = tl.run_alignment(ref, cur, ev, spec, _cfg(seed=3))
        assert a.record.to_csv() == b.record.to_csv()
        assert a.report.row() == b.report.row()

    def test_halo_lambda_zero_byte_identical(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        a = tl.run_alignment(ref, cur, ev, spec, _cfg())
        b = tl.run_alignment(ref, cur, ev, spec,
                             _cfg(objective=obj.ObjectiveConfig(kind="ipa_halo", lam=0.0)))
        assert a.record.to_csv() == b.record.to_csv()

    def test_requires_frozen_reference(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        with pytest.raises(ValueError):
            tl.train(ref.with_adapter(4), ref.copy(role="policy"), cur.good, _cfg())

    def test_divergence_reports_step(self, tiny_world, monkeypatch):
        spec, ref, cur, ev = tiny_world
        calls = {"n": 0}
        real = obj.ipa_loss

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] == 5:
                raise NonFiniteError("boom", index=0)
            return real(*a, **k)

        monkeypatch.setattr(obj, "ipa_loss", flaky)
        with pytest.raises(DivergenceError) as exc:
            tl.train(ref.with_adapter(4), ref, cur.good, _cfg())
        rec = exc.value.record
        assert rec.status == "diverged" and len(rec.rows) == 5
        assert np.isnan(rec.rows[-1][1])
        assert "nan" in rec.to_csv().splitlines()[-1]

    def test_eval_every(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        res = tl.run_alignment(ref, cur, ev, spec, _cfg(steps=20, eval_every=10))
        assert [s for s, _ in res.record.eval_rows] == [0, 10, 20]
        assert res.record.eval_csv().splitlines()[0].startswith("step,alignment")

    def test_csv_columns(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        csv = tl.run_alignment(ref, cur, ev, spec, _cfg(steps=3)).record.to_csv().splitlines()
        assert csv[0] == ",".join(tl.RUN_COLUMNS) and len(csv) == 4


class TestEvaluate:
    def test_reference_has_zero_gap(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        rep = tl.evaluate(ref, ref, ev, spec)
        assert rep.delta_final == 0.0
        assert rep.retention == pytest.approx(rep.hand_err + rep.body_err)
        assert 0.0 <= rep.hand_quality <= 1.0

    def test_eval_sets_need_data(self, tiny_world):
        spec, _, cur, _ = tiny_world
        from ipalab.dataworld import PreferenceSet
        with pytest.raises(ValueError):
            tl.make_eval_sets(spec, PreferenceSet.empty(spec))


class TestSweeps:
    def test_beta_sweep_labels(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        runs = tl.sweep_beta(ref, cur, ev, spec, _cfg(steps=5), [1.0, 10.0])
        assert [r.label for r in runs] == ["beta=1", "beta=10"]

    def test_compare_skips_missing_pairs(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        from ipalab.dataworld import PreferenceSet
        no_pairs = replace(cur, winners=PreferenceSet.empty(spec), losers=PreferenceSet.empty(spec))
        cmp = tl.compare_objectives(ref, no_pairs, ev, spec, _cfg(steps=5),
                                    kinds=("ipa", "paired_dpo"))
        status = {r.label: r.status for r in cmp.rows}
        assert status == {"ipa": "ok", "paired_dpo": "skipped"}
        assert "paired_dpo,skipped" in cmp.to_csv()

    def test_parallel_matches_serial(self, tiny_world):
        spec, ref, cur, ev = tiny_world
        a = tl.sweep_lambda(ref, cur, ev, spec, _cfg(steps=5), [0.0, 10.0], jobs=1)
        b = tl.sweep_lambda(ref, cur, ev, spec, _cfg(steps=5), [0.0, 10.0], jobs=2)
        assert [r.record.to_csv() for r in a] == [r.record.to_csv() for r in b]
