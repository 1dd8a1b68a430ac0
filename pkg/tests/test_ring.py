import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpgnet import detrand
from rpgnet.config import ConfigError, LayerSpec, ModelConfig, micro_resnet, tiny_net
from rpgnet.ring import (GeneratorBinding, IndexPlan, ParameterRing, RingGenerator,
                         assign_rings, build_index_plan, generate_kernel, init_ring,
                         scatter_gradient)


def _seed_with_signs(pattern):
    for seed in range(10000):
        if detrand.signs(seed, len(pattern)).tolist() == pattern:
            return seed
    raise AssertionError("no seed found")


def _ring(values, rid=0):
    v = np.asarray(values, dtype=np.float64)
    return ParameterRing(rid, v.size, v)


def _plan(indices, offsets, rid=0, n=None):
    idx = np.asarray(indices, dtype=np.int64)
    return IndexPlan(rid, idx.size, idx, offsets, 0, 0, n or int(idx.max()) + 1)


# -- index plans ---------------------------------------------------------------
def test_plan_counts_with_remainder():
    plan = build_index_plan(3, [4, 3], 1, 2)
    assert sorted(plan.counts().tolist()) == [2, 2, 3]
    assert plan.offsets == {0: 0, 1: 4}


def test_plan_counts_exact_multiple():
    plan = build_index_plan(4, [4, 4], 5, 6)
    assert plan.counts().tolist() == [2, 2, 2, 2]


def test_plan_single_layer_is_permutation():
    plan = build_index_plan(50, [50], 9, 10)
    assert sorted(plan.indices.tolist()) == list(range(50))


@pytest.mark.parametrize("n, sizes", [(0, [3]), (3, []), (3, [2, 0])])
def test_plan_domain_errors(n, sizes):
    with pytest.raises(ValueError):
        build_index_plan(n, sizes, 0, 0)


@given(st.integers(1, 60), st.lists(st.integers(1, 80), min_size=1, max_size=6),
       st.integers(0, 2**64 - 1))
@settings(max_examples=200, deadline=None)
def test_plan_even_count_invariant(n, sizes, seed):
    plan = build_index_plan(n, sizes, seed, seed + 1)
    m = sum(sizes)
    counts = plan.counts()
    lo = m // n
    assert set(counts.tolist()) <= {lo, lo + 1}
    assert int((counts == lo + 1).sum()) == m % n
    starts = sorted(plan.offsets.values())
    assert starts == list(np.cumsum([0] + sizes[:-1]))


def test_plan_deterministic():
    a = build_index_plan(17, [30, 12], 3, 4)
    b = build_index_plan(17, [30, 12], 3, 4)
    np.testing.assert_array_equal(a.indices, b.indices)


# -- gather ------------------------------------------------------------------
def test_identity_generation():
    ring = _ring([0.5, -1.0, 2.0, 3.5])
    plan = build_index_plan(4, [4], 1, 2)
    b = GeneratorBinding("l", 0, 0, 4, 0, 1.0, perm_on=False, sign_on=False)
    np.testing.assert_array_equal(generate_kernel(ring, b, plan), ring.values)


def test_tiling_with_all_positive_signs():
    seed = _seed_with_signs([1] * 6)
    ring = _ring([1.0, 2.0, 3.0, 4.0])
    plan = build_index_plan(4, [6, 2], 1, 2, ["a", "b"])
    b = GeneratorBinding("a", 0, 0, 6, seed, 1.0, perm_on=False, sign_on=True)
    np.testing.assert_array_equal(generate_kernel(ring, b, plan),
                                  [1, 2, 3, 4, 1, 2])
    # the second layer continues the wrap-around
    b2 = GeneratorBinding("b", 0, 6, 2, 0, 1.0, perm_on=False, sign_on=False)
    np.testing.assert_array_equal(generate_kernel(ring, b2, plan), [3, 4])


def test_hand_evaluated_kernel():
    seed = _seed_with_signs([1, -1, 1, -1])
    ring = _ring([1.0, 2.0, 3.0, 4.0])
    plan = _plan([2, 0, 3, 1], {"l": 0})
    b = GeneratorBinding("l", 0, 0, 4, seed, 1.0)
    np.testing.assert_array_equal(generate_kernel(ring, b, plan), [3, -1, 4, -2])


def test_generation_does_not_touch_ring():
    ring = _ring(np.arange(5.0))
    plan = build_index_plan(5, [7], 1, 2)
    generate_kernel(ring, GeneratorBinding(0, 0, 0, 7, 3, 0.7), plan)
    np.testing.assert_array_equal(ring.values, np.arange(5.0))


def test_inconsistent_binding_rejected():
    ring = _ring([1.0, 2.0])
    plan = build_index_plan(2, [3], 1, 2)
    with pytest.raises(ValueError):
        generate_kernel(ring, GeneratorBinding(0, 0, 1, 3, 0), plan)
    with pytest.raises(ValueError):
        generate_kernel(ring, GeneratorBinding(0, 1, 0, 3, 0), plan)


def test_binding_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        GeneratorBinding("l", 0, 0, 1, 0, 0.0)


# -- scatter -----------------------------------------------------------------
def test_scatter_one_hot_negative_sign():
    seed = _seed_with_signs([1, -1, 1])
    plan = _plan([2, 0, 1], {"l": 0})
    b = GeneratorBinding("l", 0, 0, 3, seed, 1.0)
    grad_w = np.zeros(3)
    scatter_gradient([0.0, 1.0, 0.0], b, plan, grad_w)
    np.testing.assert_array_equal(grad_w, [-1.0, 0.0, 0.0])


def test_scatter_superposes_layers():
    plan = _plan([1, 0, 1, 2], {"a": 0, "b": 2})
    a = GeneratorBinding("a", 0, 0, 2, 0, 1.0, sign_on=False)
    b = GeneratorBinding("b", 0, 2, 2, 0, 1.0, sign_on=False)
    grad_w = np.zeros(3)
    scatter_gradient([0.25, 0.0], a, plan, grad_w)
    scatter_gradient([4.0, 0.0], b, plan, grad_w)
    assert grad_w[1] == 4.25


def test_scatter_length_mismatch():
    plan = build_index_plan(3, [3], 0, 0)
    with pytest.raises(ValueError):
        scatter_gradient(np.ones(2), GeneratorBinding(0, 0, 0, 3, 0), plan, np.zeros(3))


@given(st.integers(0, 2**32), st.integers(1, 40), st.integers(1, 90),
       st.sampled_from([(True, True), (True, False), (False, True), (False, False)]))
@settings(max_examples=100, deadline=None)
def test_gather_scatter_adjoint(seed, n, ni, mode):
    rng = np.random.default_rng(seed)
    plan = build_index_plan(n, [ni, 5], seed, seed + 1)
    b = GeneratorBinding(0, 0, 0, ni, seed + 2, float(rng.uniform(0.1, 2)), *mode)
    a = rng.standard_normal(n)
    v = rng.standard_normal(ni)
    lhs = generate_kernel(_ring(a), b, plan) @ v
    rhs = a @ scatter_gradient(v, b, plan, np.zeros(n))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_generation_linear_in_ring():
    rng = np.random.default_rng(0)
    plan = build_index_plan(10, [25], 1, 2)
    b = GeneratorBinding(0, 0, 0, 25, 7, 0.5)
    w1, w2 = rng.standard_normal(10), rng.standard_normal(10)
    np.testing.assert_array_equal(
        generate_kernel(_ring(w1 + w2), b, plan),
        generate_kernel(_ring(w1), b, plan) + generate_kernel(_ring(w2), b, plan))


# -- init ----------------------------------------------------------------------
def test_init_ring_moments():
    ring = ParameterRing(0, 10**5, np.zeros(10**5))
    init_ring(ring, "normal", 77)
    assert abs(ring.values.mean()) < 0.02
    assert abs(ring.values.var() - 1) < 0.05


def test_generated_kernel_variance_matches_fan_in():
    layer = LayerSpec("c", "conv2d", 1, 4000, 3, generated=True)
    config = ModelConfig("one", (1, 4, 4), 2, [layer])
    rings, plans, bindings = assign_rings(config, ring_sizes=0.5, seed=4,
                                          dtype=np.float64)
    k = generate_kernel(rings[0], bindings["c"], plans[0])
    assert abs(k.var() / (2 / 9) - 1) < 0.10


def test_init_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        init_ring(ParameterRing(0, 2, np.zeros(2)), "uniform", 0)


# -- ring assignment ------------------------------------------------------------
def _eight_conv():
    layers = []
    for i in range(8):
        layers.append(LayerSpec(f"c{i}", "conv2d", 4, 4, 3, 1, 1,
                                generated=True, block=i // 2))
        layers.append(LayerSpec(f"bn{i}", "batchnorm", 4, 4, block=i // 2))
    return ModelConfig("eight", (4, 6, 6), 2, layers)


def test_global_grouping_eight_convs():
    rings, plans, bindings = assign_rings(_eight_conv(), "global", 100)
    assert len(rings) == 1 and len(bindings) == 8
    assert all(b.ring_id == 0 for b in bindings.values())


def test_block_grouping_tiny_net():
    config = tiny_net()
    rings, plans, bindings = assign_rings(config, "block", 0.5)
    assert len(rings) == 4
    for name, b in bindings.items():
        assert b.ring_id == config.layer(name).block


def test_batchnorm_never_bound():
    config = micro_resnet()
    _, _, bindings = assign_rings(config, "global", 0.1)
    assert not any(config.layer(n).kind == "batchnorm" for n in bindings)
    assert list(bindings) == [l.name for l in config.generated_layers]


def test_full_size_ring_uses_each_element_once():
    config = micro_resnet((3, 8, 8), widths=(4, 4, 4))
    rings, plans, _ = assign_rings(config, "global", config.dense_kernel_count)
    assert plans[0].counts().tolist() == [1] * rings[0].size


def test_head_generation_is_optional():
    config = micro_resnet(generate_head=False)
    _, _, bindings = assign_rings(config, "global", 0.1)
    assert "head" not in bindings


def test_custom_grouping_errors():
    config = _eight_conv()
    full = {f"c{i}": i % 2 for i in range(8)}
    rings, _, _ = assign_rings(config, full, 50)
    assert len(rings) == 2
    missing = dict(full)
    del missing["c3"]
    with pytest.raises(ConfigError):
        assign_rings(config, missing, 50)
    double = dict(full, c0=[0, 1])
    with pytest.raises(ConfigError):
        assign_rings(config, double, 50)


def test_batchnorm_cannot_be_generated():
    with pytest.raises(ConfigError):
        LayerSpec("bn", "batchnorm", 3, 3, generated=True)


def test_generator_bitwise_deterministic():
    config = micro_resnet((3, 8, 8), widths=(4, 6, 8))
    a = RingGenerator.build(config, ring_sizes=0.3, seed=12).kernels()
    b = RingGenerator.build(config, ring_sizes=0.3, seed=12).kernels()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()


def test_generator_matches_reference_functions():
    config = micro_resnet((3, 8, 8), widths=(4, 6, 8))
    gen = RingGenerator.build(config, grouping="block", ring_sizes=0.4, seed=3,
                              dtype=np.float64)
    rng = np.random.default_rng(1)
    grads = {n: rng.standard_normal(b.length) for n, b in gen.bindings.items()}
    expected = [np.zeros(r.size) for r in gen.rings]
    for name, b in gen.bindings.items():
        ring, plan = gen.rings[b.ring_id], gen.plans[b.ring_id]
        np.testing.assert_array_equal(gen.kernel(name), generate_kernel(ring, b, plan))
        scatter_gradient(grads[name], b, plan, expected[b.ring_id])
    for got, want in zip(gen.scatter(grads), expected):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
