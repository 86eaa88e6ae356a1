import numpy as np

from swnoise.nets import Adam, DriftNet, sinusoidal_embedding


def test_fresh_net_is_zero_drift():
    net = DriftNet(d=4, hidden=8, n_steps=10, seed=0)
    x = np.random.default_rng(1).standard_normal((5, 4))
    assert not net(3, x).any()


def test_output_shape_and_step_broadcast():
    net = DriftNet(d=3, hidden=8, n_steps=10, seed=0)
    x = np.random.default_rng(2).standard_normal((7, 3))
    assert net(0, x).shape == (7, 3)
    ks = np.arange(7) % 10
    assert net(ks, x).shape == (7, 3)


def test_step_index_changes_output():
    net = DriftNet(d=2, hidden=16, n_steps=10, seed=3)
    rng = np.random.default_rng(4)
    for key in net.params:
        net.params[key] = rng.standard_normal(net.params[key].shape) * 0.3
    x = rng.standard_normal((4, 2))
    assert not np.allclose(net(1, x), net(7, x))


def test_pack_unpack_roundtrip():
    net = DriftNet(d=3, hidden=5, n_steps=6, seed=5)
    rng = np.random.default_rng(6)
    for key in net.params:
        net.params[key] = rng.standard_normal(net.params[key].shape)
    flat = net.pack()
    dup = DriftNet(d=3, hidden=5, n_steps=6, seed=0)
    dup.unpack(flat)
    x = rng.standard_normal((4, 3))
    assert np.array_equal(net(2, x), dup(2, x))


def test_embedding_table_shape():
    table = sinusoidal_embedding(12, 16)
    assert table.shape == (13, 16)
    assert np.isfinite(table).all()
    assert not np.allclose(table[0], table[5])


def test_backward_matches_finite_differences():
    # scalar functional sum(c * out): every parameter of every layer
    rng = np.random.default_rng(7)
    net = DriftNet(d=2, hidden=3, n_steps=4, seed=8)
    for key in net.params:
        net.params[key] = rng.standard_normal(net.params[key].shape) * 0.5
    x = rng.standard_normal((6, 2))
    ks = np.array([0, 1, 2, 3, 1, 2])
    c = rng.standard_normal((6, 2))

    out, cache = net.forward(ks, x)
    grads = net.backward(cache, c)
    flat = net.pack()
    analytic = np.concatenate(
        [grads[k].ravel() for k in ("w1", "b1", "w2", "b2", "w3", "b3")]
    )
    h = 1e-6
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        net.unpack(up)
        fu = float((net(ks, x) * c).sum())
        net.unpack(dn)
        fd = float((net(ks, x) * c).sum())
        numeric[i] = (fu - fd) / (2 * h)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() < 1e-4


def test_adam_reduces_quadratic_loss():
    # fit the zero function from a random start
    rng = np.random.default_rng(9)
    net = DriftNet(d=2, hidden=4, n_steps=3, seed=10)
    for key in net.params:
        net.params[key] = rng.standard_normal(net.params[key].shape) * 0.5
    opt = Adam(net, lr=1e-2)
    x = rng.standard_normal((32, 2))

    def loss_and_grads():
        out, cache = net.forward(0, x)
        grads = net.backward(cache, (2.0 / out.size) * out)
        return float((out**2).mean()), grads

    first, _ = loss_and_grads()
    for _ in range(200):
        _, grads = loss_and_grads()
        opt.step(grads)
    last, _ = loss_and_grads()
    assert last < 0.05 * first
