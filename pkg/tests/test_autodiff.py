import math

import numpy as np
import pytest

from lmdst import autodiff as ad


def make_param(store, name, shape, rng):
    p = store.new(name, shape, 1.0)
    p.value = rng.normal(size=shape)
    return p


def test_softmax_uniform_logits():
    out = ad.softmax(ad.Node(np.zeros(3)), axis=0)
    np.testing.assert_allclose(out.value, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(scale=5.0, size=(rng.integers(1, 6), rng.integers(1, 9)))
        p = ad.softmax(ad.Node(x), axis=1).value
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_empty_axis_errors():
    with pytest.raises(ad.ShapeError):
        ad.softmax(ad.Node(np.zeros((2, 0))), axis=1)


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.Node(np.zeros(1))).value[0] == 0.5


def test_shape_error_names_both_shapes():
    a = ad.Node(np.zeros((2, 3)))
    b = ad.Node(np.zeros((4, 5)))
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(a, b)
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_forward_passes_bit_identical():
    rng = np.random.default_rng(11)
    x = ad.Node(rng.normal(size=(4, 5)))
    w = ad.Node(rng.normal(size=(5, 3)))

    def run():
        return ad.softmax(ad.tanh(ad.matmul(x, w)), axis=1).value.copy()

    first, second = run(), run()
    assert (first == second).all()


# ---------------------------------------------------------------------------
# finite differences over every primitive (>= 100 random shape/seed cases)
# ---------------------------------------------------------------------------

def _fd_case(build_loss, params, seed, tol=1e-4):
    err = ad.grad_check(build_loss, params, eps=1e-5, seed=seed)
    assert err < tol, f"finite-difference mismatch: {err}"


@pytest.mark.parametrize("seed", range(12))
def test_fd_add_sub_mul(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, size=2))
    store = ad.ParameterStore(seed)
    a = make_param(store, "a", shape, rng)
    b = make_param(store, "b", shape, rng)
    c = make_param(store, "c", (1, shape[1]), rng)  # broadcast operand

    def loss():
        return ad.sum_all(ad.elementwise_mul(ad.add(a.node, c.node), ad.sub(a.node, b.node)))

    _fd_case(loss, [a, b, c], seed)


@pytest.mark.parametrize("seed", range(12))
def test_fd_matmul(seed):
    rng = np.random.default_rng(100 + seed)
    m, k, n = rng.integers(1, 6, size=3)
    store = ad.ParameterStore(seed)
    a = make_param(store, "a", (m, k), rng)
    b = make_param(store, "b", (k, n), rng)

    def loss():
        return ad.sum_all(ad.matmul(a.node, b.node))

    err = ad.grad_check(loss, [a, b], eps=1e-5, seed=seed)
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(12))
def test_fd_activations_softmax(seed):
    rng = np.random.default_rng(200 + seed)
    shape = (int(rng.integers(1, 5)), int(rng.integers(2, 7)))
    store = ad.ParameterStore(seed)
    a = make_param(store, "a", shape, rng)

    def loss():
        s = ad.softmax(ad.sigmoid(a.node), axis=1)
        return ad.sum_all(ad.elementwise_mul(s, ad.tanh(a.node)))

    _fd_case(loss, [a], seed)


@pytest.mark.parametrize("seed", range(10))
def test_fd_concat_transpose_slice(seed):
    rng = np.random.default_rng(300 + seed)
    store = ad.ParameterStore(seed)
    a = make_param(store, "a", (3, 4), rng)
    b = make_param(store, "b", (3, 2), rng)

    def loss():
        cat = ad.concat(a.node, b.node, axis=1)
        t = ad.transpose(cat)
        part = ad.slice_rows(t, 1, 4)
        return ad.sum_all(ad.elementwise_mul(part, part))

    _fd_case(loss, [a, b], seed)


@pytest.mark.parametrize("seed", range(10))
def test_fd_embedding_lookup(seed):
    rng = np.random.default_rng(400 + seed)
    store = ad.ParameterStore(seed)
    table = make_param(store, "table", (7, 4), rng)
    idx = rng.integers(0, 7, size=9)  # repeated rows accumulate

    def loss():
        emb = ad.embedding_lookup(table.node, idx)
        return ad.sum_all(ad.elementwise_mul(emb, emb))

    _fd_case(loss, [table], seed)


@pytest.mark.parametrize("seed", range(10))
def test_fd_cross_entropy(seed):
    rng = np.random.default_rng(500 + seed)
    store = ad.ParameterStore(seed)
    logits = make_param(store, "logits", (6,), rng)
    t = int(rng.integers(0, 6))

    def loss():
        return ad.cross_entropy(logits.node, t)

    _fd_case(loss, [logits], seed)


@pytest.mark.parametrize("seed", range(10))
def test_fd_cross_entropy_rows_and_nll(seed):
    rng = np.random.default_rng(600 + seed)
    store = ad.ParameterStore(seed)
    logits = make_param(store, "logits", (5, 7), rng)
    targets = rng.integers(0, 7, size=5)
    mask = rng.integers(0, 2, size=5).astype(float)

    def loss():
        ce = ad.cross_entropy_rows(logits.node, targets, mask)
        probs = ad.softmax(logits.node, axis=1)
        return ad.add(ce, ad.nll_rows(probs, targets, mask))

    _fd_case(loss, [logits], seed)


@pytest.mark.parametrize("seed", range(10))
def test_fd_scatter_pad_tile(seed):
    rng = np.random.default_rng(700 + seed)
    store = ad.ParameterStore(seed)
    w = make_param(store, "w", (3, 6), rng)
    v = make_param(store, "v", (1, 4), rng)
    ids = rng.integers(0, 5, size=6)

    def loss():
        sc = ad.scatter_cols(ad.softmax(w.node, axis=1), ids, 5)
        tiled = ad.tile_rows(v.node, 3)
        padded = ad.pad_cols(tiled, 1)
        return ad.sum_all(ad.elementwise_mul(sc, padded))

    _fd_case(loss, [w, v], seed)


@pytest.mark.parametrize("seed", range(8))
def test_fd_gru_cell_and_sequence(seed):
    rng = np.random.default_rng(800 + seed)
    d_in, d_h, t_len = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
    store = ad.ParameterStore(seed)
    cell = ad.GruCell(store, "gru", d_in, d_h)
    xs = make_param(store, "xs", (t_len, d_in), rng)

    def loss():
        h = cell.sequence(xs.node, reverse=bool(seed % 2))
        return ad.sum_all(ad.elementwise_mul(h, h))

    _fd_case(loss, store.parameters(), seed)


# ---------------------------------------------------------------------------
# GRU semantics
# ---------------------------------------------------------------------------

def _zero_cell(d_in, d_h):
    store = ad.ParameterStore(0)
    cell = ad.GruCell(store, "g", d_in, d_h)
    for p in store.parameters():
        p.value = np.zeros_like(p.value)
    return cell


def test_gru_zero_weights_halves_state():
    cell = _zero_cell(3, 4)
    h_prev = np.array([[1.0, -2.0, 0.5, 3.0]])
    out = cell.step(ad.Node(np.ones((1, 3))), ad.Node(h_prev))
    np.testing.assert_allclose(out.value, 0.5 * h_prev, atol=1e-15)


def test_gru_zero_input_zero_weights():
    cell = _zero_cell(2, 3)
    h_prev = np.array([[0.2, -0.4, 1.0]])
    out = cell.step(ad.Node(np.zeros((1, 2))), ad.Node(h_prev))
    np.testing.assert_allclose(out.value, 0.5 * h_prev, atol=1e-15)


def scalar_gru_step(x, h, w_zr, u_zr, b_zr, w_h, u_h, b_h):
    """Independent plain-python recomputation of one GRU step."""
    d = h.shape[0]
    z = [0.0] * d
    r = [0.0] * d
    for j in range(d):
        az = b_zr[j] + sum(x[i] * w_zr[i][j] for i in range(len(x)))
        az += sum(h[i] * u_zr[i][j] for i in range(d))
        ar = b_zr[d + j] + sum(x[i] * w_zr[i][d + j] for i in range(len(x)))
        ar += sum(h[i] * u_zr[i][d + j] for i in range(d))
        z[j] = 1.0 / (1.0 + math.exp(-az))
        r[j] = 1.0 / (1.0 + math.exp(-ar))
    out = [0.0] * d
    for j in range(d):
        ac = b_h[j] + sum(x[i] * w_h[i][j] for i in range(len(x)))
        ac += sum(r[i] * h[i] * u_h[i][j] for i in range(d))
        c = math.tanh(ac)
        out[j] = (1.0 - z[j]) * h[j] + z[j] * c
    return np.array(out)


def test_gru_matches_scalar_oracle():
    rng = np.random.default_rng(17)
    store = ad.ParameterStore(17)
    cell = ad.GruCell(store, "g", 3, 4)
    x = rng.normal(size=3)
    h = rng.normal(size=4)
    got = cell.step(ad.Node(x[None, :]), ad.Node(h[None, :])).value[0]
    want = scalar_gru_step(
        x.tolist(), h, cell.w_zr.value.tolist(), cell.u_zr.value.tolist(),
        cell.b_zr.value.tolist(), cell.w_h.value.tolist(), cell.u_h.value.tolist(),
        cell.b_h.value.tolist())
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_gru_sequence_matches_stepwise_composition():
    rng = np.random.default_rng(23)
    store = ad.ParameterStore(23)
    cell = ad.GruCell(store, "g", 3, 5)
    xs = rng.normal(size=(6, 3))

    fused = cell.sequence(ad.Node(xs)).value
    h = ad.Node(np.zeros((1, 5)))
    stepped = []
    for t in range(6):
        h = cell.step(ad.Node(xs[t:t + 1]), h)
        stepped.append(h.value[0])
    np.testing.assert_allclose(fused, np.array(stepped), rtol=0, atol=1e-12)

    rev = cell.sequence(ad.Node(xs), reverse=True).value
    h = ad.Node(np.zeros((1, 5)))
    stepped_rev = [None] * 6
    for t in range(5, -1, -1):
        h = cell.step(ad.Node(xs[t:t + 1]), h)
        stepped_rev[t] = h.value[0]
    np.testing.assert_allclose(rev, np.array(stepped_rev), rtol=0, atol=1e-12)


def test_gru_sequence_gradients_match_composed_path():
    rng = np.random.default_rng(29)
    store = ad.ParameterStore(29)
    cell = ad.GruCell(store, "g", 2, 3)
    xs = store.new("xs", (5, 2), 1.0)
    xs.value = rng.normal(size=(5, 2))

    store.zero_grad()
    loss = ad.sum_all(ad.elementwise_mul(cell.sequence(xs.node), cell.sequence(xs.node)))
    ad.backward(loss)
    fused_grads = {p.name: p.grad.copy() for p in store.parameters()}

    store.zero_grad()
    h = ad.Node(np.zeros((1, 3)))
    rows = []
    for t in range(5):
        h = cell.step(ad.row(xs.node, t), h)
        rows.append(h)
    acc = None
    for r in rows:
        sq = ad.sum_all(ad.elementwise_mul(r, r))
        acc = sq if acc is None else ad.add(acc, sq)
    ad.backward(acc)
    for p in store.parameters():
        np.testing.assert_allclose(p.grad, fused_grads[p.name], rtol=0, atol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
def test_gru_sequence_batch_matches_per_example(reverse):
    """Stacked multi-sequence runs must equal one-sequence runs, values and
    gradients both (the batching is a pure performance measure)."""
    rng = np.random.default_rng(31)
    store = ad.ParameterStore(31)
    cell = ad.GruCell(store, "g", 3, 4)
    lengths = [5, 1, 3, 5]
    xs_parts = [rng.normal(size=(n, 3)) for n in lengths]
    stacked = store.new("xs", (sum(lengths), 3), 1.0)
    stacked.value = np.concatenate(xs_parts)

    store.zero_grad()
    out = ad.gru_sequence_batch(cell, stacked.node, lengths, reverse=reverse)
    ad.backward(ad.sum_all(ad.elementwise_mul(out, out)))
    batched_grads = {p.name: p.grad.copy() for p in store.parameters()}
    batched_out = out.value.copy()

    store.zero_grad()
    offset = 0
    total = None
    singles = []
    for part in xs_parts:
        h = ad.gru_sequence(cell, ad.slice_rows(stacked.node, offset, offset + len(part)),
                            reverse=reverse)
        singles.append(h.value.copy())
        sq = ad.sum_all(ad.elementwise_mul(h, h))
        total = sq if total is None else ad.add(total, sq)
        offset += len(part)
    ad.backward(total)

    np.testing.assert_allclose(batched_out, np.concatenate(singles), atol=1e-12)
    for p in store.parameters():
        np.testing.assert_allclose(batched_grads[p.name], p.grad, atol=1e-11)


@pytest.mark.parametrize("seed", range(6))
def test_fd_gru_sequence_batch(seed):
    rng = np.random.default_rng(900 + seed)
    lengths = [int(n) for n in rng.integers(1, 5, size=int(rng.integers(1, 4)))]
    d_in, d_h = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    store = ad.ParameterStore(seed)
    cell = ad.GruCell(store, "g", d_in, d_h)
    xs = make_param(store, "xs", (sum(lengths), d_in), rng)

    def loss():
        h = ad.gru_sequence_batch(cell, xs.node, lengths, reverse=bool(seed % 2))
        return ad.sum_all(ad.elementwise_mul(h, h))

    _fd_case(loss, store.parameters(), seed)


def test_gru_sequence_batch_rejects_bad_lengths():
    store = ad.ParameterStore(0)
    cell = ad.GruCell(store, "g", 2, 2)
    xs = ad.Node(np.zeros((4, 2)))
    with pytest.raises(ad.ShapeError):
        ad.gru_sequence_batch(cell, xs, [2, 3])
    with pytest.raises(ad.ShapeError):
        ad.gru_sequence_batch(cell, xs, [4, 0])


# ---------------------------------------------------------------------------
# backward contracts
# ---------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    store = ad.ParameterStore(0)
    x = make_param(store, "x", (3, 4), np.random.default_rng(0))
    loss = ad.sum_all(x.node)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    assert float(loss.grad) == 1.0


def test_unused_parameter_gets_zero_gradient():
    store = ad.ParameterStore(0)
    rng = np.random.default_rng(1)
    x = make_param(store, "x", (2, 2), rng)
    unused = make_param(store, "unused", (3,), rng)
    ad.backward(ad.sum_all(x.node))
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_twice_errors():
    store = ad.ParameterStore(0)
    x = make_param(store, "x", (2,), np.random.default_rng(2))
    loss = ad.sum_all(x.node)
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_backward_rejects_non_scalar():
    x = ad.Node(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.add(x, x))


def test_backward_reports_nonfinite_op():
    store = ad.ParameterStore(0)
    x = store.new("x", (2,), 1.0)
    x.value = np.array([1e308, 1e308])
    with np.errstate(over="ignore"):
        loss = ad.sum_all(ad.elementwise_mul(x.node, x.node))  # inf
    with pytest.raises(ad.GraphError) as exc:
        ad.backward(loss)
    assert "mul" in str(exc.value)


def test_gradients_accumulate_across_graphs():
    store = ad.ParameterStore(0)
    x = make_param(store, "x", (3,), np.random.default_rng(3))
    ad.backward(ad.sum_all(x.node))
    ad.backward(ad.sum_all(x.node))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_no_grad_builds_detached_nodes():
    store = ad.ParameterStore(0)
    x = make_param(store, "x", (2, 2), np.random.default_rng(4))
    with ad.no_grad():
        out = ad.sum_all(ad.elementwise_mul(x.node, x.node))
    assert not out.requires_grad and out._backward is None


# ---------------------------------------------------------------------------
# parameters and checkpointing
# ---------------------------------------------------------------------------

def test_dtype_build_switch():
    assert ad.default_dtype() == np.dtype("float64")  # tests run in 64-bit
    try:
        ad.set_default_dtype("float32")
        node = ad.Node([1.0, 2.0])
        assert node.value.dtype == np.dtype("float32")
        out = ad.sigmoid(node)
        assert out.value.dtype == np.dtype("float32")
    finally:
        ad.set_default_dtype("float64")
    with pytest.raises(ValueError):
        ad.set_default_dtype("float16")


def test_parameter_names_unique():
    store = ad.ParameterStore(0)
    store.new("w", (2,), 0.1)
    with pytest.raises(ValueError):
        store.new("w", (2,), 0.1)


def test_parameter_init_bound_and_seeding():
    a = ad.ParameterStore(5).new("w", (50, 50), 0.25)
    b = ad.ParameterStore(5).new("w", (50, 50), 0.25)
    assert (a.value == b.value).all()
    assert abs(a.value).max() <= 0.25
    assert abs(a.value).max() > 0.2  # actually spread over the interval


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = ad.ParameterStore(7)
    rng = np.random.default_rng(7)
    for i in range(4):
        make_param(store, f"layer{i}.w", (5, 3), rng)
    path = tmp_path / "ckpt.npz"
    meta = {"hidden": 3, "note": "fixture"}
    ad.save_checkpoint(path, store.state_dict(), meta)
    arrays, got_meta = ad.load_checkpoint(path)
    assert got_meta == meta
    for name, p in zip(store.names(), store.parameters()):
        assert (arrays[name] == p.value).all()

    fresh = ad.ParameterStore(99)
    for i in range(4):
        fresh.new(f"layer{i}.w", (5, 3), 1.0)
    fresh.load_state_dict(arrays)
    for name in fresh.names():
        assert (fresh[name].value == store[name].value).all()


def test_checkpoint_shape_mismatch_errors(tmp_path):
    store = ad.ParameterStore(0)
    store.new("w", (2, 2), 0.1)
    path = tmp_path / "ckpt.npz"
    ad.save_checkpoint(path, store.state_dict(), {})
    arrays, _ = ad.load_checkpoint(path)

    other = ad.ParameterStore(0)
    other.new("w", (3, 2), 0.1)
    with pytest.raises(ad.CheckpointError):
        other.load_state_dict(arrays)

    third = ad.ParameterStore(0)
    third.new("v", (2, 2), 0.1)
    with pytest.raises(ad.CheckpointError):
        third.load_state_dict(arrays)
