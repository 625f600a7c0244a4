import numpy as np
import pytest

import latentlab.tensor as lt
from latentlab.gradcheck import grad_check
from latentlab.tensor import EmptyMaskError, Tensor


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal(lt.matmul(a, b).data, b.data)


def test_matmul_dot():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert lt.matmul(a, b).data[0, 0] == 11.0


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        lt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_finite_difference():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((4, 2)))

    err = grad_check(lambda a: lt.tsum(lt.matmul(a, b)), Tensor(a0))
    assert err <= 1e-6


def test_softmax_uniform():
    p = lt.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(p.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_softmax_stabilized_no_overflow():
    p = lt.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(p.data))
    assert p.data[0] > 1.0 - 1e-12
    assert p.data[1] < 1e-12


def test_softmax_scalar_oracle():
    # frozen from an independent 40-digit evaluation of exp/sum
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    p = lt.softmax(Tensor([1.0, 2.0, 3.0]))
    assert np.allclose(p.data, expected, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 7, 11)) * 30)
    p = lt.softmax(x)
    assert np.all(p.data >= 0.0)
    assert np.all(p.data <= 1.0)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-9)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = lt.cross_entropy_masked(logits, [0, 1, 3], [True, True, True])
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_all_masked_is_error():
    with pytest.raises(EmptyMaskError):
        lt.cross_entropy_masked(Tensor(np.zeros((2, 4))), [0, 0], [False, False])


def test_cross_entropy_one_masked_matches_single_position_oracle():
    logits = Tensor(np.array([[0.5, -0.3, 1.2, 0.0], [9.0, -2.0, 3.3, 0.1]]))
    loss = lt.cross_entropy_masked(logits, [2, 0], [True, False])
    # frozen single-position NLL from a 40-digit scalar evaluation
    assert abs(loss.item() - 0.7035477446231474) < 1e-14


def test_cross_entropy_invariant_to_masked_logits():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((4, 6))
    targets = [1, 2, 3, 4]
    mask = [True, False, True, False]

    def run(arr):
        logits = Tensor(arr, requires_grad=True)
        loss = lt.cross_entropy_masked(logits, targets, mask)
        lt.backward(loss)
        return loss.item(), logits.grad

    v1, g1 = run(base)
    noisy = base.copy()
    noisy[1] = rng.standard_normal(6) * 100
    noisy[3] = rng.standard_normal(6) * 100
    v2, g2 = run(noisy)
    assert v1 == v2
    assert np.array_equal(g1[[0, 2]], g2[[0, 2]])
    assert np.array_equal(g2[[1, 3]], np.zeros((2, 6)))


def test_embedding_lookup_basis_rows():
    table = Tensor(np.eye(5))
    out = lt.embedding_lookup(table, [3, 0])
    assert np.array_equal(out.data, np.eye(5)[[3, 0]])


def test_embedding_lookup_out_of_range():
    with pytest.raises(IndexError):
        lt.embedding_lookup(Tensor(np.eye(3)), [5])


def test_embedding_lookup_scatter_grad():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    out = lt.embedding_lookup(table, [1, 1, 3])
    lt.backward(lt.tsum(out))
    expected = np.zeros((4, 2))
    expected[1] = 2.0
    expected[3] = 1.0
    assert np.array_equal(table.grad, expected)


def test_concat_rows_appends_exact_row():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((4, 6)))
    v = Tensor(rng.standard_normal((1, 6)))
    out = lt.concat_rows(a, v)
    assert out.shape == (5, 6)
    assert np.array_equal(out.data[-1], v.data[0])
    assert np.array_equal(out.data[:4], a.data)


def test_rms_norm_zero_row_stays_zero():
    gain = Tensor(np.ones(4))
    out = lt.rms_norm(Tensor(np.zeros((2, 4))), gain)
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        lt.backward(Tensor(np.zeros(3), requires_grad=True))


def test_sum_grad_is_ones():
    x = Tensor(np.random.default_rng(4).standard_normal((3, 3)), requires_grad=True)
    lt.backward(lt.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 3)))


def test_grad_accumulates_across_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = lt.add(lt.mul(x, x), x)  # x^2 + x -> grad 2x + 1 = 5
    lt.backward(lt.tsum(y))
    assert np.allclose(x.grad, [5.0])


def test_no_grad_skips_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with lt.no_grad():
        y = lt.mul(x, x)
    assert not y.requires_grad
    assert y._backward is None


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    h = lt.matmul(x, w)
    loss = lt.tsum(lt.mul(lt.softmax(h), lt.add(h, x @ w)))
    order = lt.tape(loss)
    seen = set()
    for node in order:
        for parent in node._parents:
            if parent.requires_grad:
                assert id(parent) in seen, "input appears after its consumer"
        seen.add(id(node))
    assert order[-1] is loss

    # after backward(), every reachable requires_grad tensor has a grad
    lt.backward(loss)
    for node in order:
        assert node.grad is not None or not node.requires_grad


@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_match_finite_differences(seed):
    """Every registered primitive: reverse-mode vs central differences."""
    rng = np.random.default_rng(seed)
    d = 6
    x0 = Tensor(rng.standard_normal((3, d)))
    w = Tensor(rng.standard_normal((d, 4)))
    gain = Tensor(rng.standard_normal(d) * 0.5 + 1.0)
    bias = Tensor(rng.standard_normal(d) * 0.1)
    other = Tensor(rng.standard_normal((3, d)))
    targets = rng.integers(0, 4, size=3)
    mask = np.array([True, True, False])

    cases = {
        "add": lambda x: lt.tsum(lt.mul(lt.add(x, other), other)),
        "mul": lambda x: lt.tsum(lt.mul(lt.mul(x, other), other)),
        "scale": lambda x: lt.tsum(lt.scale(x, -1.7)),
        "matmul": lambda x: lt.tsum(lt.mul(lt.matmul(x, w), lt.matmul(x, w))),
        "softmax": lambda x: lt.tsum(lt.mul(lt.softmax(x), other)),
        "rms_norm": lambda x: lt.tsum(lt.mul(lt.rms_norm(x, gain), other)),
        "layer_norm": lambda x: lt.tsum(lt.mul(lt.layer_norm(x, gain, bias), other)),
        "gelu": lambda x: lt.tsum(lt.mul(lt.gelu(x), other)),
        "embedding": lambda x: lt.tsum(
            lt.mul(lt.embedding_lookup(x, [0, 2, 2]), other)
        ),
        "concat_slice": lambda x: lt.tsum(
            lt.mul(lt.slice_rows(lt.concat_rows(x, other), 1, 4), other)
        ),
        "cross_entropy": lambda x: lt.cross_entropy_masked(
            lt.matmul(x, w), targets, mask
        ),
        "mean": lambda x: lt.tmean(lt.mul(x, x)),
    }
    for name, f in cases.items():
        err = grad_check(f, x0, eps=1e-4)
        assert err <= 1e-5, f"{name} grad error {err}"


def test_gradcheck_param_gradients():
    """Gain/bias/weight-side gradients, checked through their own tensors."""
    rng = np.random.default_rng(99)
    x = Tensor(rng.standard_normal((3, 6)))
    w0 = rng.standard_normal((6, 4))
    gain0 = rng.standard_normal(6) * 0.3 + 1.0
    bias0 = rng.standard_normal(6) * 0.1

    assert grad_check(lambda w: lt.tsum(lt.matmul(x, w)), Tensor(w0)) <= 1e-5
    assert (
        grad_check(lambda g: lt.tsum(lt.rms_norm(x, g)), Tensor(gain0)) <= 1e-5
    )
    assert (
        grad_check(
            lambda b: lt.tsum(lt.layer_norm(x, Tensor(gain0), b)), Tensor(bias0)
        )
        <= 1e-5
    )


def test_batched_matmul_grad():
    rng = np.random.default_rng(5)
    a0 = rng.standard_normal((2, 3, 4))
    b = Tensor(rng.standard_normal((4, 5)))
    bb = Tensor(rng.standard_normal((2, 4, 5)))
    assert grad_check(lambda a: lt.tsum(lt.matmul(a, b)), Tensor(a0)) <= 1e-5
    assert grad_check(lambda a: lt.tsum(lt.matmul(a, bb)), Tensor(a0)) <= 1e-5
    # shared-weight gradient reduces over the batch
    a = Tensor(a0)
    assert (
        grad_check(lambda w: lt.tsum(lt.matmul(a, w)), Tensor(b.data.copy())) <= 1e-5
    )
