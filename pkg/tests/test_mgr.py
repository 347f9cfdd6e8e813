import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgrgcl.errors import ShapeMismatch, StaleCache, TooManyParts
from mgrgcl.mgr import (
    ALL_PARTS,
    BRANCHES,
    backward,
    forward,
    forward_batch,
    global_max_pool,
    init_params,
    load_params,
    parts_for_variant,
    partition,
    save_params,
    stripe_bounds,
)

from oracles import central_difference, relative_error


def test_global_max_pool_examples():
    np.testing.assert_array_equal(global_max_pool(np.full((3, 2, 2), 2.0)), [2.0, 2.0, 2.0])
    assert global_max_pool(np.array([[[1, 3], [2, 0]]])).tolist() == [3.0]
    m = np.zeros((2, 3, 3))
    m[0, 1, 2] = 9
    assert global_max_pool(m)[0] == 9


def test_partition_examples():
    m = np.arange(2 * 6 * 6, dtype=float).reshape(2, 6, 6)
    assert [s.shape[1] for s in partition(m, "vertical", 3)] == [2, 2, 2]
    m5 = np.zeros((1, 5, 4))
    assert [s.shape[1] for s in partition(m5, "vertical", 2)] == [3, 2]
    halves = partition(m, "horizontal", 2)
    assert [s.shape for s in halves] == [(2, 6, 3), (2, 6, 3)]
    np.testing.assert_array_equal(np.concatenate(halves, axis=2), m)
    with pytest.raises(TooManyParts):
        partition(np.zeros((1, 2, 6)), "vertical", 3)


@given(st.integers(1, 40), st.integers(1, 40))
def test_stripes_disjoint_and_exhaustive(extent, n):
    if extent < n:
        with pytest.raises(TooManyParts):
            stripe_bounds(extent, n)
        return
    bounds = stripe_bounds(extent, n)
    covered = [i for a, b in bounds for i in range(a, b)]
    assert covered == list(range(extent))
    sizes = [b - a for a, b in bounds]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def _params(seed=0, c=4, classes=3, d_g=None, d_p=None, parts=ALL_PARTS):
    return init_params(c, classes, np.random.default_rng(seed), d_g, d_p, parts)


def test_forward_zero_map_gives_zero_parts():
    p = _params()
    desc = forward(np.zeros((4, 6, 6)), p)
    assert all(np.all(v == 0) for v in desc.local_set)
    assert len(desc.global_set) == 3 and len(desc.local_set) == 10


def test_forward_identity_adapter():
    p = _params(c=4, d_g=4)
    p.tensors["adapter.G.weight"] = np.eye(4)
    desc = forward(np.ones((4, 6, 6)), p)
    np.testing.assert_array_equal(desc.global_set[0], np.ones(4))


def test_forward_definition_and_mega_order():
    rng = np.random.default_rng(1)
    p = _params(c=5, d_g=6, d_p=3)
    fmap = rng.normal(size=(5, 6, 6))
    desc = forward(fmap, p)
    t = p.tensors
    g = global_max_pool(fmap)
    for i, b in enumerate(BRANCHES):
        np.testing.assert_allclose(desc.global_set[i], t[f"adapter.{b}.weight"] @ g + t[f"adapter.{b}.bias"])
    stripes = partition(fmap, "vertical", 2) + partition(fmap, "vertical", 3) \
        + partition(fmap, "horizontal", 2) + partition(fmap, "horizontal", 3)
    for j, (name, stripe) in enumerate(zip(ALL_PARTS, stripes)):
        pre = t[f"reducer.{name}.weight"] @ global_max_pool(stripe) + t[f"reducer.{name}.bias"]
        np.testing.assert_allclose(desc.local_set[j], np.maximum(pre, 0))
    assert desc.mega.shape == (3 * 6 + 10 * 3,)
    np.testing.assert_array_equal(desc.mega, np.concatenate(desc.global_set + desc.local_set))


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((3, 6, 6)), _params(c=4))


def test_forward_batch_matches_loop_and_permutes():
    rng = np.random.default_rng(2)
    p = _params(c=4)
    maps = rng.normal(size=(64, 4, 6, 6))
    desc, _ = forward_batch(maps, p)
    loop = np.stack([forward(m, p).mega for m in maps])
    np.testing.assert_allclose(desc.mega, loop, rtol=0, atol=1e-12)
    one, _ = forward_batch(maps[:1], p)
    np.testing.assert_allclose(one.mega[0], forward(maps[0], p).mega, atol=1e-12)
    perm = rng.permutation(64)
    pdesc, _ = forward_batch(maps[perm], p)
    np.testing.assert_allclose(pdesc.mega, desc.mega[perm], atol=1e-12)


def test_variant_dims():
    p = _params(c=8, parts=parts_for_variant("mgr_no_hv"))
    assert p.mega_dim == 3 * 8
    assert forward(np.ones((8, 6, 6)), p).mega.shape == (24,)
    p = _params(c=8, parts=parts_for_variant("mgr_no_h"))
    assert p.mega_dim == 3 * 8 + 5 * 8


def _upstream(desc, rng):
    return (
        [rng.normal(size=g.shape) for g in desc.globals],
        [rng.normal(size=q.shape) for q in desc.parts],
        [rng.normal(size=lg.shape) for lg in desc.logits],
    )


def _objective(desc, up):
    gg, gp, gl = up
    pairs = zip(desc.globals + desc.parts + desc.logits, gg + gp + gl)
    return sum(np.vdot(a, b) for a, b in pairs)


def _tie_free_instance(seed):
    """Random small instance whose ReLU inputs stay clear of zero."""
    rng = np.random.default_rng(seed)
    while True:
        c = int(rng.integers(2, 5))
        p = init_params(c, 3, rng, d_g=int(rng.integers(2, 5)), d_p=int(rng.integers(2, 5)))
        for k in p.tensors:
            if k.endswith(".bias"):
                p.tensors[k] = rng.normal(size=p.tensors[k].shape) * 0.5
        maps = rng.normal(size=(int(rng.integers(1, 5)), c, 6, 6))
        _, cache = forward_batch(maps, p)
        pre_ok = True
        for name, pooled in zip(p.part_names, cache.pooled_parts):
            pre = pooled @ p.tensors[f"reducer.{name}.weight"].T + p.tensors[f"reducer.{name}.bias"]
            pre_ok &= bool(np.min(np.abs(pre)) > 1e-3)
        if pre_ok:
            return rng, p, maps


def mgr_gradient_error(seed):
    rng, p, maps = _tie_free_instance(seed)
    desc, cache = forward_batch(maps, p)
    up = _upstream(desc, rng)
    grads = backward(cache, p, *up)
    worst = 0.0
    for name in list(p.tensors):
        original = p.tensors[name]

        def f(value, name=name):
            p.tensors[name] = value
            return _objective(forward_batch(maps, p)[0], up)
        fd = central_difference(f, original, 1e-5)
        p.tensors[name] = original
        worst = max(worst, relative_error(grads[name], fd))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    assert mgr_gradient_error(seed) < 1e-5


def test_backward_input_gradient_routes_to_argmax():
    rng, p, maps = _tie_free_instance(11)
    desc, cache = forward_batch(maps, p)
    up = _upstream(desc, rng)
    _, dmaps = backward(cache, p, *up, input_grad=True)
    fd = central_difference(lambda m: _objective(forward_batch(m, p)[0], up), maps, 1e-6)
    assert relative_error(dmaps, fd) < 1e-5


def test_backward_zero_upstream_and_bias_rule():
    rng, p, maps = _tie_free_instance(3)
    desc, cache = forward_batch(maps, p)
    zero = backward(cache, p)
    assert all(np.all(g == 0) for g in zero.values())
    gp = [rng.normal(size=q.shape) for q in desc.parts]
    grads = backward(cache, p, None, gp, None)
    for j, name in enumerate(p.part_names):
        np.testing.assert_allclose(grads[f"reducer.{name}.bias"], (gp[j] * cache.masks[j]).sum(axis=0))


def test_backward_max_pool_tie_goes_to_first_index():
    p = _params(c=1, d_g=1, d_p=1, classes=2)
    fmap = np.zeros((1, 1, 6, 6))
    fmap[0, 0, 1, 1] = fmap[0, 0, 4, 4] = 5.0
    _, cache = forward_batch(fmap, p)
    _, dmaps = backward(cache, p, [np.ones((1, 1)), None, None], None, None, input_grad=True)
    assert np.flatnonzero(dmaps) .tolist() == [1 * 6 + 1]


def test_stale_cache():
    p = _params(c=4)
    _, cache = forward_batch(np.ones((1, 4, 6, 6)), p)
    p.tensors["adapter.G.weight"] = np.zeros((5, 4))
    with pytest.raises(StaleCache):
        backward(cache, p)


def test_checkpoint_roundtrip(tmp_path):
    p = _params(c=4, parts=parts_for_variant("mgr_no_h"))
    path = tmp_path / "p.mgrp"
    save_params(path, p)
    assert path.read_bytes()[:4] == b"MGRP"
    back = load_params(path)
    assert back.part_names == p.part_names
    for k, v in p.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v.astype(np.float32))
    assert back.num_parameters() == p.num_parameters()
