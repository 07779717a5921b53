import numpy as np
import pytest

from robustfuse import autodiff as ad
from robustfuse.attacks import (SOURCE_ARCH, AttackBudget, feasible_image, generate_offline_attack_set,
                                load_attacked, parse_epsilon, pgd_attack, save_attacked, split_indices,
                                verify_attacked)
from robustfuse.data import SampleBatch, SceneSpec, generate_dataset
from robustfuse.fusion import ArchSpec, FusionRule
from robustfuse.model import Composite


def linear_loss(w_x, w_y):
    def fn(tape, xv, yv, z):
        return ad.mean(xv * tape.const(w_x)) + ad.mean(yv * tape.const(w_y))
    return fn


def rand_batch(seed, n=2, size=8):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 1, size, size)).astype(np.float32)
    y = rng.random((n, 1, size, size)).astype(np.float32)
    return SampleBatch(x, y, rng.integers(0, 4, (n, size, size)))


def test_parse_epsilon():
    assert parse_epsilon("4/255") == 4 / 255
    assert parse_epsilon(0.5) == 0.5
    assert AttackBudget("8/255").step_size == pytest.approx(2 / 255)
    with pytest.raises(ValueError):
        AttackBudget(-0.1)
    with pytest.raises(ValueError):
        AttackBudget(0.1, eta=0.0)


def test_budget_and_range_hold_exactly_over_many_attacks():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        b = rand_batch(seed)
        b.x[0, 0, 0, :3] = [0.0, 1.0, np.float32(1.0) - np.float32(1e-7)]
        eps = float(rng.choice([1 / 255, 2 / 255, 4 / 255, 8 / 255, 0.3]))
        budget = AttackBudget(eps, steps=int(rng.integers(1, 4)), seed=seed, random_start=bool(seed % 2))
        fn = linear_loss(rng.standard_normal(b.x.shape), rng.standard_normal(b.y.shape))
        r = pgd_attack(None, None, b, budget, loss_fn=fn)
        for adv, ref, d in ((r.x_adv, b.x, r.delta_ir), (r.y_adv, b.y, r.delta_vis)):
            exact = adv.astype(np.float64) - ref.astype(np.float64)
            assert np.abs(exact).max() <= eps
            np.testing.assert_array_equal(exact, d)
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            assert adv.dtype == np.float32


def test_linear_loss_reaches_the_analytic_maximizer():
    b = rand_batch(3)
    b = SampleBatch(np.full_like(b.x, 0.5), np.full_like(b.y, 0.5), b.z)
    rng = np.random.default_rng(0)
    wx, wy = rng.standard_normal(b.x.shape), rng.standard_normal(b.y.shape)
    eps = 4 / 255
    r = pgd_attack(None, None, b, AttackBudget(eps, steps=4), loss_fn=linear_loss(wx, wy))
    np.testing.assert_allclose(r.delta_ir, eps * np.sign(wx), atol=1e-7)
    np.testing.assert_allclose(r.delta_vis, eps * np.sign(wy), atol=1e-7)
    assert len(r.loss_trace) == 5
    assert all(b2 >= a for a, b2 in zip(r.loss_trace, r.loss_trace[1:]))


def test_zero_budget_is_bit_exact():
    b = rand_batch(4)
    r = pgd_attack(None, None, b, AttackBudget(0.0, steps=3), loss_fn=linear_loss(np.ones(b.x.shape), np.ones(b.y.shape)))
    assert r.x_adv.tobytes() == b.x.tobytes() and r.y_adv.tobytes() == b.y.tobytes()
    np.testing.assert_array_equal(r.delta_ir, 0.0)


def test_feasible_image_fixes_float32_rounding():
    x = np.array([0.1, 0.7, 0.33], np.float32)
    eps = 1 / 255
    cand = x.astype(np.float64) + np.array([eps, -eps, eps])
    xa = feasible_image(x, cand, eps)
    assert np.all(np.abs(xa.astype(np.float64) - x.astype(np.float64)) <= eps)
    assert np.all(np.abs(xa.astype(np.float64) - cand) < 1e-7)


def test_model_attack_increases_task_loss():
    model = Composite.from_arch(ArchSpec.uniform("3-C", FusionRule("AA"), 4), seg_width=4)
    store = model.init(0)
    data = generate_dataset(SceneSpec(seed=1, size=16), 4)
    r = pgd_attack(model, store, data.batch(np.arange(4)), AttackBudget("8/255", steps=3))
    assert len(r.loss_trace) == 4
    assert r.final_loss >= r.loss_trace[0]


@pytest.fixture(scope="module")
def source():
    arch = ArchSpec(SOURCE_ARCH.slots, SOURCE_ARCH.rule, 4)
    model = Composite.from_arch(arch, seg_width=4)
    return arch, model, model.init(0), generate_dataset(SceneSpec(seed=2, size=16), 12)


def test_offline_sets_layout_and_determinism(source, tmp_path):
    arch, model, store, data = source
    levels = [AttackBudget(e, steps=2) for e in ("1/255", "4/255")]
    sets = generate_offline_attack_set(model, store, data, levels, split_seed=5, source_arch=arch)
    assert [(s.level, s.split) for s in sets] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
    assert len(sets[0].data) == 9 and len(sets[1].data) == 3
    assert set(sets[0].indices) | set(sets[1].indices) == set(range(12))
    assert verify_attacked(sets, data)
    again = generate_offline_attack_set(model, store, data, levels, split_seed=5, source_arch=arch)
    assert [s.data.hash() for s in sets] == [s.data.hash() for s in again]
    # chunking fixes the seeds, so the same samples attacked alone in a smaller set agree
    half = generate_offline_attack_set(model, store, data.subset(np.arange(8)), levels[:1], 5, source_arch=arch)
    tr = {int(i): k for k, i in enumerate(sets[0].indices)}
    for k, i in enumerate(half[0].indices):
        if int(i) in tr:
            np.testing.assert_array_equal(half[0].data.x[k], sets[0].data.x[tr[int(i)]])
    path = save_attacked(sets[2], tmp_path)
    loaded = load_attacked(path)
    assert loaded.data.hash() == sets[2].data.hash()
    lb, sb = loaded.budget, sets[2].budget
    assert (lb.epsilon, lb.steps, lb.step_size) == (sb.epsilon, sb.steps, sb.step_size)
    assert loaded.provenance["source_arch"] == arch.to_json()


def test_offline_sets_reject_wrong_source(source):
    arch, model, store, data = source
    with pytest.raises(ValueError):
        generate_offline_attack_set(model, store, data, [AttackBudget(0.01)], 0,
                                    source_arch=ArchSpec.uniform("3-C", FusionRule("CC"), 4))
    with pytest.raises(ValueError):
        generate_offline_attack_set(model, store, data, [], 0, source_arch=arch)


def test_zero_budget_sets_equal_clean_data(source):
    arch, model, store, data = source
    sets = generate_offline_attack_set(model, store, data, [AttackBudget(0.0, steps=2)], 1, source_arch=arch)
    for s in sets:
        clean = data.subset(s.indices)
        assert s.data.x.tobytes() == clean.x.tobytes() and s.data.y.tobytes() == clean.y.tobytes()


def test_verify_attacked_catches_violations(source):
    arch, model, store, data = source
    sets = generate_offline_attack_set(model, store, data, [AttackBudget("1/255", steps=1)], 0, source_arch=arch)
    sets[0].data.x[0] += 0.1
    assert not verify_attacked(sets, data)


def test_split_indices():
    tr, va = split_indices(20, 3)
    assert len(tr) == 15 and len(va) == 5 and not set(tr) & set(va)
    assert np.array_equal(split_indices(20, 3)[0], tr)
