"""Engine-level behavior: tape determinism, gradient correctness per primitive,
replay semantics, checkpoint round-trip."""

import numpy as np
import pytest

from stsmcd import autodiff as ad
from stsmcd import gradcheck


def test_silu_at_zero():
    assert ad.silu(ad.Tensor([0.0])).data[0] == 0.0


def test_layer_norm_constant_vector_is_zero():
    x = ad.Tensor(np.full((1, 8), 3.7))
    out = ad.layer_norm(x, ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8)))
    assert np.allclose(out.data, 0.0)


def test_softmax_symmetry():
    out = ad.softmax(ad.Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_identity_backward():
    x = ad.param([3.0])
    with ad.Graph() as g:
        y = ad.scale(x, 1.0)
    g.backward(y, np.ones(1))
    assert np.allclose(x.grad, [1.0])


def test_sum_of_squares_gradient():
    x = ad.param([1.0, 2.0])
    with ad.Graph() as g:
        y = ad.reduce_sum(ad.mul(x, x))
    g.backward(y)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_zeroing():
    x = ad.param([1.0, 2.0])
    with ad.Graph() as g:
        y = ad.reduce_sum(ad.mul(x, x))
    g.backward(y)
    g.backward(y)
    assert np.allclose(x.grad, [4.0, 8.0])


def test_backward_seed_not_in_graph_errors():
    x = ad.param([1.0])
    with ad.Graph() as g:
        ad.scale(x, 2.0)
    stray = ad.Tensor([1.0])
    with pytest.raises(ad.GraphError):
        g.backward(stray)


def test_cotangent_shape_mismatch_errors():
    x = ad.param([1.0, 2.0])
    with ad.Graph() as g:
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.ShapeMismatch):
        g.backward(y, np.ones(3))


def test_shape_mismatch_names_op():
    x = ad.Tensor(np.ones((2, 3)))
    w = ad.Tensor(np.ones((4, 2)))
    with pytest.raises(ad.ShapeMismatch, match="linear"):
        ad.linear(x, w)


def test_nonfinite_forward_raises_numeric_fault():
    x = ad.Tensor([1e308])
    with ad.Graph():
        with pytest.raises(ad.NumericFault, match="node 0"):
            ad.exp(ad.scale(x, 2.0))  # exp overflows on the second node
            ad.exp(x)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = ad.param(rng.normal(size=(5, 4)))
        w = ad.param(rng.normal(size=(4, 3)))
        with ad.Graph() as g:
            y = ad.reduce_sum(ad.silu(ad.linear(x, w)))
        g.backward(y)
        return y.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_graph_run_rebinds_named_inputs():
    x = ad.Tensor([1.0, 2.0], name="x")
    with ad.Graph() as g:
        y = ad.reduce_sum(ad.mul(x, x))
        y.name = "y"
    out = g.run({"x": np.array([3.0, 4.0])})
    assert out["y"].data == pytest.approx(25.0)


def test_graph_run_unknown_input_errors():
    x = ad.Tensor([1.0], name="x")
    with ad.Graph() as g:
        ad.scale(x, 1.0)
    with pytest.raises(ad.GraphError):
        g.run({"bogus": np.ones(1)})


def test_upsample_then_average_pool_roundtrip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 2))
    up = ad.upsample_nearest(ad.Tensor(x), 2).data
    pooled = up.reshape(3, 2, 5, 2, 2).mean(axis=(1, 3))
    assert np.array_equal(pooled, x)


def test_argmax_blocks_backward():
    x = ad.param([[1.0, 3.0]])
    with ad.Graph() as g:
        y = ad.reduce_sum(ad.argmax(x, axis=-1))
    with pytest.raises(ad.NonDifferentiableError):
        g.backward(y)


def test_grad_check_skips_argmax_graph_with_warning():
    x = ad.param([[1.0, 3.0]])
    with ad.Graph() as g:
        y = ad.reduce_sum(ad.argmax(x, axis=-1))
        y.name = "y"
    with pytest.warns(UserWarning, match="non-differentiable"):
        report = ad.grad_check(g, y, [x])
    assert report.skipped


def test_grad_check_requires_scalar_output():
    x = ad.param([[1.0, 3.0]])
    with ad.Graph() as g:
        y = ad.mul(x, x)
    with pytest.raises(ad.GraphError, match="scalar"):
        ad.grad_check(g, y, [x])


def test_linear_graph_passes_fd_at_1e4():
    rng = np.random.default_rng(5)
    x = ad.param(rng.normal(size=(6, 3)))
    w = ad.param(rng.normal(size=(3, 4)))
    b = ad.param(rng.normal(size=4))
    with ad.Graph() as g:
        y = ad.reduce_mean(ad.mul(ad.linear(x, w, b), ad.linear(x, w, b)))
        y.name = "y"
    report = ad.grad_check(g, y, [x, w, b], step=1e-5, tol=1e-4, samples=64, rng=rng)
    assert report.passed, report


def test_selective_scan_graph_passes_fd():
    rng = np.random.default_rng(6)
    L, D, N = 8, 2, 2
    u = ad.param(rng.normal(size=(L, 1, D)))
    delta = ad.param(rng.uniform(0.05, 0.6, size=(L, 1, D)))
    bb = ad.param(rng.normal(size=(L, 1, N)))
    cc = ad.param(rng.normal(size=(L, 1, N)))
    aa = ad.param(-np.abs(rng.normal(size=(1, D, N))))
    with ad.Graph() as g:
        y = ad.reduce_sum(ad.selective_scan(u, delta, bb, cc, aa))
        y.name = "y"
    report = ad.grad_check(g, y, [u, delta, bb, cc, aa], step=1e-4, tol=1e-3, rng=rng)
    assert report.passed, report


@pytest.mark.parametrize("check", gradcheck.all_checks("primitives"), ids=lambda c: c.name)
def test_every_primitive_matches_finite_differences(check):
    rng = np.random.default_rng(1234)
    graph, out, leaves = check.build(rng)
    report = ad.grad_check(
        graph, out, leaves, step=check.step, tol=check.tol, samples=check.samples, rng=rng
    )
    assert report.passed, f"{check.name}: {report}"


def test_corrupted_backward_rule_is_caught():
    # negative control: doubling a backward output must trip the checker
    original = ad.OPS["silu"]
    ad.OPS["silu"] = ad.OpDef(
        original.forward, lambda n, g: tuple(2.0 * gi for gi in original.backward(n, g))
    )
    try:
        rng = np.random.default_rng(2)
        x = ad.param(rng.normal(size=(4, 4)))
        with ad.Graph() as g:
            y = ad.reduce_sum(ad.silu(x))
            y.name = "y"
        report = ad.grad_check(g, y, [x], step=1e-5, tol=1e-4, rng=rng)
        assert not report.passed
    finally:
        ad.OPS["silu"] = original


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    named = {
        "enc.w": ad.param(rng.normal(size=(3, 4))),
        "head.b": ad.param(rng.normal(size=7)),
    }
    path = tmp_path / "model.cmck"
    ad.save_checkpoint(path, named)
    loaded = ad.load_checkpoint(path)
    assert set(loaded) == set(named)
    for key in named:
        assert np.array_equal(loaded[key], named[key].data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.cmck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ad.CheckpointFormatError):
        ad.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    named = {"w": ad.Tensor(np.ones((4, 4)))}
    path = tmp_path / "t.cmck"
    ad.save_checkpoint(path, named)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ad.CheckpointFormatError, match="truncated"):
        ad.load_checkpoint(path)
