import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mupad import tensor as T
from mupad.tensor import AdamW, Ema, Tensor, TensorError

from conftest import central_diff, max_rel_error


# -- matmul -----------------------------------------------------------------------

def test_matmul_identity():
    out = Tensor(np.eye(2)) @ Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_scalar_case():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = (Tensor(a) @ Tensor(b)).data
    assert np.allclose(got, want, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(TensorError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- softmax / layer_norm / gelu / conv2d ------------------------------------------

def test_softmax_symmetry():
    assert np.allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_stability():
    out = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    assert out[0] > 1 - 1e-12 and out[1] < 1e-12


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    want = np.exp(x) / np.exp(x).sum()
    assert np.allclose(T.softmax_lastdim(Tensor(x)).data, want, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(row, seed):
    rows = np.array([row, list(np.random.default_rng(seed).normal(size=len(row)))])
    out = T.softmax_lastdim(Tensor(rows)).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_constant_row():
    x = Tensor([1.0, 1.0, 1.0])
    out = T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_zero_mean(rng):
    x = Tensor(rng.standard_normal((5, 8)))
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.all(np.abs(out.data.mean(axis=-1)) < 1e-10)


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_conv2d_delta_reproduces_kernel(rng):
    kernel = rng.standard_normal((1, 1, 3, 3))
    img = np.zeros((1, 7, 7))
    img[0, 3, 3] = 1.0
    out = T.conv2d(Tensor(img), Tensor(kernel), stride=1, pad=1).data
    assert np.allclose(out[0, 2:5, 2:5], kernel[0, 0], atol=1e-12)


def test_conv2d_matches_direct_oracle(rng):
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    kf = k[:, :, ::-1, ::-1]
    want = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                want[o, i, j] = (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * kf[o]).sum()
    assert np.allclose(out, want, atol=1e-12)


# -- backward ------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.square(x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TensorError):
        (x + x).backward()


def test_three_layer_perceptron_gradcheck(rng):
    sizes = [(4, 8), (8,), (8, 8), (8,), (8, 2), (2,)]
    params = [Tensor(0.5 * rng.standard_normal(s), requires_grad=True) for s in sizes]
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 2))

    def forward():
        h = Tensor(x)
        for w, b in zip(params[0::2], params[1::2]):
            h = T.gelu(h @ w + b)
        return T.mse(h, Tensor(y))

    loss = forward()
    loss.backward()
    numeric = central_diff(lambda: forward().data.item(), [p.data for p in params])
    for p, n in zip(params, numeric):
        assert max_rel_error(p.grad, n) < 1e-3


def _op_cases(seed):
    """One seeded random case per differentiable op; returns (loss_fn, leaves)."""
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    m = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    return {
        "add": (lambda: T.tsum(T.square(a + b)), [a, b]),
        "sub": (lambda: T.tsum(T.square(a - b)), [a, b]),
        "mul": (lambda: T.tsum(T.square(a * b)), [a, b]),
        "neg": (lambda: T.tsum(T.square(-a)), [a]),
        "matmul": (lambda: T.tsum(T.square(a @ m)), [a, m]),
        "broadcast_add": (lambda: T.tsum(T.square(a + g)), [a, g]),
        "softmax": (lambda: T.tsum(T.square(T.softmax_lastdim(a))), [a]),
        "layer_norm": (lambda: T.tsum(T.square(T.layer_norm(a, g, g))), [a, g]),
        "gelu": (lambda: T.tsum(T.square(T.gelu(a))), [a]),
        "conv2d": (lambda: T.tsum(T.square(T.conv2d(c, k, stride=1, pad=1))), [c, k]),
        "mean": (lambda: T.square(T.tmean(a) + T.tmean(b)).sum(), [a, b]),
        "reshape_permute": (lambda: T.tsum(T.square(T.permute(T.reshape(a, (3, 2, 2)), (1, 0, 2)))), [a]),
        "take_rows": (lambda: T.tsum(T.square(T.take_rows(a, [0, 2, 2]))), [a]),
        "concat": (lambda: T.tsum(T.square(T.concat_rows([a, b]))), [a, b]),
        "transpose": (lambda: T.tsum(T.square(T.transpose_last2(a) @ b)), [a, b]),
    }


def test_every_op_gradcheck_100_seeded_cases():
    """Spec invariant: analytic vs central differences < 1e-3 over 100 cases."""
    case_count = 0
    seed = 0
    while case_count < 100:
        for name, (loss_fn, leaves) in _op_cases(seed).items():
            for p in leaves:
                p.grad = None
            loss_fn().backward()
            numeric = central_diff(lambda: loss_fn().data.item(), [p.data for p in leaves])
            for p, n in zip(leaves, numeric):
                err = max_rel_error(p.grad, n)
                assert err < 1e-3, f"{name} (seed {seed}): rel error {err}"
            case_count += 1
            if case_count >= 100:
                break
        seed += 1


def test_ops_deterministic(rng):
    x = rng.standard_normal((4, 4))
    r1 = T.softmax_lastdim(Tensor(x)).data
    r2 = T.softmax_lastdim(Tensor(x)).data
    assert np.array_equal(r1, r2)
    l1 = T.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    l2 = T.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.array_equal(l1, l2)


def test_nan_guard_fails_fast():
    with np.errstate(over="ignore"):
        with pytest.raises(TensorError):
            Tensor([1e308]) * Tensor([1e308])
    with pytest.raises(TensorError):
        Tensor([np.inf])


# -- AdamW ---------------------------------------------------------------------------

def _one_param(value):
    p = Tensor(np.array(value), requires_grad=True)
    return {"w": p}, p


def test_adamw_zero_grad_zero_decay_is_identity():
    params, p = _one_param([1.0, -2.0])
    p.grad = np.zeros(2)
    AdamW(params, lr=0.1, weight_decay=0.0).step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_pure_decay():
    params, p = _one_param([1.0, -2.0])
    p.grad = np.zeros(2)
    AdamW(params, lr=0.1, weight_decay=0.1).step()
    assert np.allclose(p.data, [0.99, -1.98], atol=1e-15)


def test_adamw_single_step_from_zero():
    params, p = _one_param([0.0])
    p.grad = np.ones(1)
    AdamW(params, lr=1e-4).step()
    assert np.allclose(p.data, [-1e-4 / (1.0 + 1e-8)], atol=1e-18)


def test_adamw_without_decay_matches_adam_reference(rng):
    """AdamW(wd=0) must equal the textbook Adam update exactly."""
    theta = rng.standard_normal(5)
    params, p = _one_param(theta.copy())
    opt = AdamW(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    ref, m, v = theta.copy(), np.zeros(5), np.zeros(5)
    for step in range(1, 6):
        g = rng.standard_normal(5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-3 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        assert np.array_equal(p.data, ref)


def test_adamw_rejects_non_finite_grad():
    params, p = _one_param([0.0])
    p.grad = np.array([np.nan])
    with pytest.raises(TensorError):
        AdamW(params).step()


# -- EMA ---------------------------------------------------------------------------

def test_ema_default_decay():
    params, _ = _one_param([1.0])
    assert Ema(params).decay == 0.9999


def test_ema_single_update():
    params, p = _one_param([0.0])
    ema = Ema(params, decay=0.9)
    p.data = np.array([1.0])
    ema.update(params)
    assert np.allclose(ema.shadow["w"], [0.1])


def test_ema_geometric_convergence():
    params, p = _one_param([0.0])
    ema = Ema(params, decay=0.9)
    p.data = np.array([1.0])
    for n in range(1, 30):
        ema.update(params)
        assert np.allclose(ema.shadow["w"], [1.0 - 0.9 ** n], atol=1e-12)


def test_ema_rejects_bad_decay():
    params, _ = _one_param([1.0])
    with pytest.raises(TensorError):
        Ema(params, decay=1.0)
    with pytest.raises(TensorError):
        Ema(params, decay=0.0)
