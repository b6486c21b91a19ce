import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camtraj import autodiff as ad
from camtraj.autodiff import AdamWState, Tensor
from camtraj.errors import CamtrajError, InvalidInputError, ShapeError
from camtraj.rng import make_rng


def fd_grad(f, arrays, h=1e-6):
    """Central differences of scalar f(*arrays) w.r.t. each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def check_grad(build, shapes, seed=0, tol=1e-6, positive=False):
    """build(*tensors) -> scalar Tensor. Compares tape gradients to central differences."""
    rng = make_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]

    def f(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*ts)
    grads = tape.backward(loss, ts)
    num = fd_grad(f, arrays)
    for t, n in zip(ts, num):
        err = np.abs(grads[t] - n) / (np.abs(n) + 1e-8)
        assert np.max(np.minimum(err, np.abs(grads[t] - n))) < tol


# a fixed random "readout" turns any tensor op into a scalar loss with dense gradients
def readout(x, seed=1):
    w = make_rng(seed).normal(size=x.shape)
    return ad.sum(ad.mul(x, w))


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: readout(ad.add(a, b)), [(3, 4), (4,)]),
    ("sub", lambda a, b: readout(ad.sub(a, b)), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: readout(ad.mul(a, b)), [(2, 3, 4), (4,)]),
    ("scale", lambda a: readout(ad.scale(a, -2.5)), [(5,)]),
    ("matmul2d", lambda a, b: readout(ad.matmul(a, b)), [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: readout(ad.matmul(a, b)), [(2, 3, 4), (2, 4, 5)]),
    ("matmul_broadcast", lambda a, b: readout(ad.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    ("linear", lambda x, w, b: readout(ad.linear(x, w, b)), [(2, 3, 4), (4, 5), (5,)]),
    ("transpose", lambda a: readout(ad.transpose(a, (1, 0, 2))), [(2, 3, 4)]),
    ("reshape", lambda a: readout(ad.reshape(a, (6, 2))), [(3, 4)]),
    ("concat", lambda a, b: readout(ad.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
    ("sum_axis", lambda a: readout(ad.sum(a, axis=1)), [(3, 4)]),
    ("mean", lambda a: readout(ad.mean(a, axis=0, keepdims=True)), [(3, 4)]),
    ("softmax", lambda a: readout(ad.softmax(a, axis=-1)), [(3, 5)]),
    ("softmax_axis0", lambda a: readout(ad.softmax(a, axis=0)), [(3, 5)]),
    ("log_softmax", lambda a: readout(ad.log_softmax(a, axis=1)), [(3, 5)]),
    ("gelu", lambda a: readout(ad.gelu(a)), [(4, 6)]),
    ("layer_norm", lambda x, w, b: readout(ad.layer_norm(x, 1e-5, w, b)), [(3, 6), (6,), (6,)]),
    ("masked_mean", lambda a: readout(ad.masked_mean(a, np.array([[1, 0, 1, 1], [0, 1, 0, 0]], bool), axis=1)),
     [(2, 4, 3)]),
    ("l2_normalize", lambda a: readout(ad.l2_normalize(a)), [(3, 5)]),
])
def test_primitive_gradients(name, build, shapes):
    check_grad(build, shapes)


def test_embedding_lookup_gradient():
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    check_grad(lambda tab: readout(ad.embedding_lookup(tab, idx)), [(4, 3)])


def test_dropout_gradient_uses_same_mask():
    x = Tensor(make_rng(0).normal(size=(50,)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.dropout(x, 0.3, make_rng(5), train=True)
        loss = ad.sum(y)
    g = tape.backward(loss, [x])[x]
    kept = y.data != 0
    np.testing.assert_allclose(g[kept], 1 / 0.7)
    assert np.all(g[~kept] == 0)


# --- forward examples ------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.full(5, 3.0))).data, 0.2)


@given(st.integers(0, 10 ** 6))
def test_softmax_rows_sum_to_one(seed):
    x = make_rng(seed).normal(scale=20, size=(4, 7))
    np.testing.assert_allclose(ad.softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, atol=1e-6)


@given(st.integers(0, 10 ** 6))
def test_l2_normalize_unit(seed):
    x = make_rng(seed).normal(size=(4, 7)) + 0.1
    np.testing.assert_allclose(np.linalg.norm(ad.l2_normalize(Tensor(x)).data, axis=1), 1.0, atol=1e-6)


def test_masked_mean_single_position():
    x = make_rng(0).normal(size=(1, 4, 3))
    mask = np.array([[False, False, True, False]])
    np.testing.assert_array_equal(ad.masked_mean(Tensor(x), mask, axis=1).data[0], x[0, 2])


def test_masked_mean_empty_rejected():
    with pytest.raises(InvalidInputError):
        ad.masked_mean(Tensor(np.ones((1, 3, 2))), np.zeros((1, 3), bool), axis=1)


def test_masked_mean_mask_shape():
    with pytest.raises(ShapeError):
        ad.masked_mean(Tensor(np.ones((1, 3, 2))), np.ones((1, 2), bool), axis=1)


def test_gelu_zero():
    assert ad.gelu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ad.gelu(Tensor(x)).data, ref, atol=1e-12)


def test_layer_norm_constant_vector():
    np.testing.assert_array_equal(ad.layer_norm(Tensor(np.full((2, 8), 3.5))).data, 0.0)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_bad_p(p):
    with pytest.raises(InvalidInputError):
        ad.dropout(Tensor(np.ones(3)), p, make_rng(0), True)


def test_dropout_identity_cases():
    x = Tensor(make_rng(0).normal(size=(10,)))
    assert ad.dropout(x, 0.5, make_rng(0), train=False).data is x.data
    np.testing.assert_array_equal(ad.dropout(x, 0.0, make_rng(0), train=True).data, x.data)


def test_dropout_deterministic():
    x = Tensor(np.ones(100))
    a = ad.dropout(x, 0.5, make_rng(3), True).data
    b = ad.dropout(x, 0.5, make_rng(3), True).data
    np.testing.assert_array_equal(a, b)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- backward --------------------------------------------------------------


def test_sum_gradient_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x)
    np.testing.assert_array_equal(tape.backward(loss, [x])[x], np.ones((2, 3)))


def test_square_norm_gradient():
    x = Tensor(make_rng(1).normal(size=5), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    np.testing.assert_allclose(tape.backward(loss, [x])[x], 2 * x.data)


def test_unreachable_param_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(4), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x)
    g = tape.backward(loss, {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], np.zeros(4))


def test_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(InvalidInputError):
        tape.backward(y, [x])


def test_shared_input_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.add(ad.mul(x, x), x))
    np.testing.assert_allclose(tape.backward(loss, [x])[x], 2 * x.data + 1)


def test_no_recording_outside_tape():
    tape = ad.Tape()
    ad.add(Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2)))
    assert len(tape) == 0


def test_check_finite():
    ad.set_check_finite(True)
    try:
        with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
            ad.scale(Tensor(np.array([1e308])), 10.0)
    finally:
        ad.set_check_finite(False)


# --- AdamW -----------------------------------------------------------------


def test_adamw_zero_grad_no_decay():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    ad.adamw_step(p, {"w": np.zeros(2)}, AdamWState(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_decoupled_decay():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    st_ = AdamWState(lr=0.1, weight_decay=0.5)
    ad.adamw_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.05))


def test_adamw_first_step_is_minus_lr():
    p = {"w": Tensor(np.array([0.0]))}
    ad.adamw_step(p, {"w": np.array([1.0])}, AdamWState(weight_decay=0.0))
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    np.testing.assert_allclose(p["w"].data, [-1e-4 / (1 + 1e-8)], rtol=1e-12)


def test_adamw_defaults():
    s = AdamWState()
    assert (s.lr, s.weight_decay, s.beta1, s.beta2, s.eps, s.step) == (1e-4, 1e-3, 0.9, 0.999, 1e-8, 0)


def test_adamw_step_overflow():
    with pytest.raises(CamtrajError):
        ad.adamw_step({}, {}, AdamWState(step=ad.INT64_MAX))


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = make_rng(4)
    w0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    p = {"w": Tensor(w0.copy())}
    s = AdamWState(lr=1e-2, weight_decay=0.1)
    tw = torch.tensor(w0.copy(), requires_grad=True)
    opt = torch.optim.AdamW([tw], lr=1e-2, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        ad.adamw_step(p, {"w": g}, s)
        tw.grad = torch.tensor(g)
        opt.step()
    np.testing.assert_allclose(p["w"].data, tw.detach().numpy(), rtol=1e-10, atol=1e-12)
    assert s.m["w"].shape == w0.shape and s.step == 5


@settings(max_examples=20)
@given(st.integers(0, 10 ** 6))
def test_forward_backward_deterministic(seed):
    def run():
        rng = make_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        with ad.Tape() as tape:
            h = ad.dropout(ad.gelu(ad.linear(x, w)), 0.2, rng, True)
            loss = ad.sum(ad.softmax(h))
        g = tape.backward(loss, [x, w])
        return loss.data, g[x], g[w]

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)
