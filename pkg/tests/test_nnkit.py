import math

import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from dinr import nnkit
from dinr.nnkit import tensor as T
from dinr.nnkit.layers import (ConvSpec, MlpSpec, conv2d, forward_convnet, forward_mlp,
                               init_convnet, init_siren, timestep_embedding)


# ---------------------------------------------------------------- scalar-loop oracles

def mlp_oracle(params, x, arch):
    """Plain-python MLP: lists of floats, math.sin, no numpy arithmetic."""
    h = [float(v) for v in x]
    n = len(arch.widths) - 1
    for i in range(n):
        w = params.array(f"l{i}.w").tolist()
        b = params.array(f"l{i}.b").tolist()
        out = []
        for j in range(len(b)):
            acc = b[j]
            for k in range(len(h)):
                acc += h[k] * w[k][j]
            out.append(acc)
        if i < n - 1:
            if arch.activation == "sine":
                out = [math.sin(arch.w0 * v) for v in out]
            elif arch.activation == "relu":
                out = [max(v, 0.0) for v in out]
        h = out
    return h


def conv_oracle(x, w, b):
    c, hgt, wid = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((co, hgt, wid))
    for o in range(co):
        for r in range(hgt):
            for q in range(wid):
                acc = b[o]
                for ci in range(c):
                    for i in range(k):
                        for j in range(k):
                            rr, qq = r + i - p, q + j - p
                            if 0 <= rr < hgt and 0 <= qq < wid:
                                acc += w[o, ci, i, j] * x[ci, rr, qq]
                out[o, r, q] = acc
    return out


def convnet_oracle(params, x, arch, emb):
    h = x
    n = len(arch.channels) - 1
    for i in range(n):
        h = conv_oracle(h, params.array(f"c{i}.w"), params.array(f"c{i}.b"))
        if i < n - 1:
            h = np.maximum(h, 0.0)
        if i == 0:
            proj = [sum(emb[k] * params.array("temb.w")[k, j] for k in range(len(emb)))
                    for j in range(h.shape[0])]
            h = h + np.array(proj)[:, None, None]
    return h


# ---------------------------------------------------------------- forward_mlp

def test_mlp_zero_weights_give_zero():
    arch = MlpSpec((3, 5, 2), "identity")
    p = nnkit.ParamSet(arch.layout())
    out = forward_mlp(p, np.random.default_rng(0).normal(size=(7, 3)), arch)
    assert np.all(out.data == 0)


def test_mlp_affine_by_hand():
    arch = MlpSpec((1, 1), "identity")
    p = nnkit.ParamSet(arch.layout())
    p.array("l0.w")[...] = [[2.0]]
    p.array("l0.b")[...] = [1.0]
    assert forward_mlp(p, np.array([[3.0]]), arch).data.tolist() == [[7.0]]


def test_mlp_sine_matches_scalar_oracle():
    arch = MlpSpec((2, 8, 1), "sine", 30.0)
    p = init_siren(arch, np.random.default_rng(42))
    x = np.array([[0.5, -0.5]])
    got = forward_mlp(p, x, arch).data[0]
    assert np.max(np.abs(got - np.array(mlp_oracle(p, x[0], arch)))) < 1e-12


def test_mlp_input_width_checked():
    arch = MlpSpec((2, 3, 1))
    p = init_siren(arch, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward_mlp(p, np.zeros((4, 3)), arch)


def test_mlp_non_finite_raises():
    arch = MlpSpec((1, 1), "identity")
    p = nnkit.ParamSet(arch.layout())
    p.array("l0.w")[...] = np.inf
    with pytest.raises(nnkit.NonFiniteError):
        forward_mlp(p, np.array([[1.0]]), arch)


@pytest.mark.parametrize("seed", range(5))
def test_identity_mlp_is_linear(seed):
    rng = np.random.default_rng(seed)
    arch = MlpSpec((3, 6, 4, 2), "identity")
    p = init_siren(arch, rng)
    for i in range(3):
        p.array(f"l{i}.b")[...] = 0
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    a, b = 1.7, -0.3
    lhs = forward_mlp(p, a * x + b * y, arch).data
    rhs = a * forward_mlp(p, x, arch).data + b * forward_mlp(p, y, arch).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_siren_init_bounds():
    arch = MlpSpec((4, 64, 64, 1), "sine", 30.0)
    p = init_siren(arch, np.random.default_rng(0))
    assert np.abs(p.array("l0.w")).max() <= 1 / 4
    assert np.abs(p.array("l1.w")).max() <= math.sqrt(6 / 64) / 30


# ---------------------------------------------------------------- backward

def test_linear_grad_is_input():
    x = np.array([1.0, -2.0, 3.5])
    p = nnkit.ParamSet([("w", (3,))])
    p.array("w")[...] = [0.3, 0.1, -0.7]
    loss = T.sum(T.mul(p["w"], x))
    nnkit.backward(loss)
    assert np.array_equal(p.grads, x)


def test_sine_mse_grad_matches_central_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 3))
    target = rng.normal(size=(6, 1))
    p = nnkit.ParamSet([("w", (3, 1))])
    p.values[...] = rng.normal(size=3)

    def loss_value():
        return float(np.mean((np.sin(x @ p.array("w")) - target) ** 2))

    p.zero_grad()
    nnkit.backward(T.mse(T.sin(T.matmul(x, p["w"])), target))
    fd = central_diff(loss_value, p.values)
    assert max_rel_err(p.grads, fd) < 1e-6


def test_constant_loss_gives_zero_grads():
    p = nnkit.ParamSet([("w", (4,))])
    p.values[...] = 1.0
    loss = T.sum(T.Tensor(np.ones(3)))
    nnkit.backward(loss)
    assert np.all(p.grads == 0)


def test_backward_twice_is_an_error():
    p = nnkit.ParamSet([("w", (2,))])
    loss = T.sum(T.mul(p["w"], np.ones(2)))
    nnkit.backward(loss)
    with pytest.raises(nnkit.GraphError):
        nnkit.backward(loss)


def test_non_scalar_loss_rejected():
    p = nnkit.ParamSet([("w", (2,))])
    with pytest.raises(nnkit.GraphError):
        nnkit.backward(T.mul(p["w"], np.ones(2)))


def test_graph_reverse_topological_order():
    p = nnkit.ParamSet([("w", (2,))])
    a = T.mul(p["w"], 2.0)
    b = T.sin(a)
    c = T.sum(b)
    g = nnkit.ComputeGraph(c)
    order = [n for n in g.nodes if not n.is_leaf]
    assert order == [a, b, c]


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_sine_mlp(seed):
    rng = np.random.default_rng(seed)
    arch = MlpSpec((3, 5, 4, 1), "sine", 30.0)
    p = init_siren(arch, rng)
    x = rng.uniform(-1, 1, size=(4, 3))
    t = rng.normal(size=(4, 1))

    def loss_value():
        return float(np.mean((forward_mlp(p, x, arch).data - t) ** 2))

    p.zero_grad()
    nnkit.backward(T.mse(forward_mlp(p, x, arch), t))
    assert max_rel_err(p.grads, central_diff(loss_value, p.values)) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_convnet(seed):
    rng = np.random.default_rng(seed)
    arch = ConvSpec((1, 3, 2, 1), kernel=3, emb_dim=4)
    p = init_convnet(arch, rng)
    p.values[...] += 0.05 * rng.normal(size=p.values.shape)
    x = rng.normal(size=(2, 1, 5, 6))
    emb = timestep_embedding([3, 40], 4)
    t = rng.normal(size=(2, 1, 5, 6))

    def loss_value():
        return float(np.mean((forward_convnet(p, x, arch, emb).data - t) ** 2))

    p.zero_grad()
    nnkit.backward(T.mse(forward_convnet(p, x, arch, emb), t))
    assert max_rel_err(p.grads, central_diff(loss_value, p.values)) < 1e-5


def test_conv_input_gradient():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 3, 3, 3))
    xv = rng.normal(size=(1, 3, 4, 5))
    x = T.Tensor(xv.copy(), requires_grad=True)
    out = conv2d(x, w)
    nnkit.backward(T.sum(T.square(out)))

    def loss_value():
        return float(np.sum(conv2d(T.Tensor(xv), w).data ** 2))

    assert max_rel_err(x.grad, central_diff(loss_value, xv)) < 1e-6


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_leaves_params():
    p = nnkit.ParamSet([("w", (5,))])
    p.values[...] = np.arange(5.0)
    st = nnkit.AdamState.for_params(p)
    for _ in range(3):
        nnkit.adam_step(p, st, 0.1)
    assert np.array_equal(p.values, np.arange(5.0))
    assert st.step == 3


def test_adam_single_step_by_hand():
    p = nnkit.ParamSet([("w", (1,))])
    p.values[0] = 0.0
    p.grads[0] = 1.0
    st = nnkit.AdamState.for_params(p)
    nnkit.adam_step(p, st, 0.1)
    m = (1 - 0.9) * 1.0
    v = (1 - 0.999) * 1.0
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    expected = 0.0 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
    assert abs(p.values[0] - expected) < 1e-12
    assert abs(p.values[0] + 0.1) < 1e-6


def test_adam_symmetry():
    p = nnkit.ParamSet([("a", (1,)), ("b", (1,))])
    p.values[...] = 0.4
    st = nnkit.AdamState.for_params(p)
    rng = np.random.default_rng(0)
    for _ in range(25):
        g = rng.normal()
        p.grads[...] = g
        nnkit.adam_step(p, st, 0.01)
    assert p.values[0] == p.values[1]


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_adam_rejects_nonpositive_lr(lr):
    p = nnkit.ParamSet([("w", (1,))])
    with pytest.raises(ValueError):
        nnkit.adam_step(p, nnkit.AdamState.for_params(p), lr)


# ---------------------------------------------------------------- convnet

def test_convnet_identity_kernel():
    arch = ConvSpec((1, 1), kernel=1, emb_dim=4)
    p = nnkit.ParamSet(arch.layout())
    p.array("c0.w")[...] = 1.0
    x = np.random.default_rng(0).normal(size=(1, 6, 6))
    out = forward_convnet(p, x, arch, np.zeros(4))
    assert np.array_equal(out.data, x)


def test_convnet_ones_kernel_on_one_hot():
    arch = ConvSpec((1, 1), kernel=3, emb_dim=2)
    p = nnkit.ParamSet(arch.layout())
    p.array("c0.w")[...] = 1.0
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = forward_convnet(p, x, arch, np.zeros(2)).data[0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out, expected)


def test_convnet_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    arch = ConvSpec((1, 4, 3, 1), kernel=3, emb_dim=4)
    p = init_convnet(arch, rng)
    p.values[...] += 0.1 * rng.normal(size=p.values.shape)
    x = rng.normal(size=(1, 6, 5))
    emb = timestep_embedding(17, 4)
    got = forward_convnet(p, x, arch, emb).data
    assert np.max(np.abs(got - convnet_oracle(p, x, arch, emb))) < 1e-10


def test_convnet_errors():
    arch = ConvSpec((1, 2, 1), kernel=5, emb_dim=2)
    p = init_convnet(arch, np.random.default_rng(0))
    with pytest.raises(ValueError, match="larger"):
        forward_convnet(p, np.zeros((1, 3, 3)), arch, np.zeros(2))
    with pytest.raises(ValueError, match="channel"):
        forward_convnet(p, np.zeros((2, 8, 8)), arch, np.zeros(2))


def test_determinism_forward_backward():
    def run():
        arch = MlpSpec((4, 16, 1), "sine")
        p = init_siren(arch, np.random.default_rng(11))
        x = np.random.default_rng(12).uniform(-1, 1, size=(32, 4))
        nnkit.backward(T.mse(forward_mlp(p, x, arch), np.zeros((32, 1))))
        return p.grads.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- ParamSet

def test_paramset_offsets_partition():
    p = nnkit.ParamSet([("a", (2, 3)), ("b", (4,)), ("c", ())])
    spans = sorted((s.offset, s.offset + s.size) for s in p.layout)
    assert spans[0][0] == 0 and spans[-1][1] == len(p)
    assert all(x[1] == y[0] for x, y in zip(spans, spans[1:]))
    assert p.values.shape == p.grads.shape


def test_paramset_serialization_roundtrip(tmp_path):
    arch = MlpSpec((4, 8, 1))
    p = init_siren(arch, np.random.default_rng(0), dtype=np.float32)
    sched = np.linspace(0.99, 0.1, 5)
    nnkit.save(tmp_path / "w.bin", p, {"arch": arch.to_dict()}, sched)
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:8] == b"DINRW001"
    q, meta, s = nnkit.load(tmp_path / "w.bin", dtype=np.float32)
    assert np.array_equal(q.values, p.values)
    assert q.same_layout(p)
    assert MlpSpec.from_dict(meta["arch"]) == arch
    assert np.array_equal(s, sched)


def test_paramset_rejects_bad_magic():
    with pytest.raises(ValueError):
        nnkit.loads(b"NOTMAGIC" + b"\0" * 16)
