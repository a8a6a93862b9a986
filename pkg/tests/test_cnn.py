import copy
import itertools

import numpy as np
import pytest

from spela.cnn import (Adam, CnnTrainConfig, ConvSpec, GroupAssignment, SpelaCNN, block_step,
                       build_block, cnn_evaluate, cnn_train, conv_forward, conv_pre,
                       kernel_loss_and_grads, kernel_step, make_group_assignments, max_pool2,
                       prelu, tally_scores)
from spela.datasets import LabeledDataset
from spela.linalg import leaky_relu, make_rng, normalize_rows
from spela.losses import LossKind, loss_and_grad

from oracles import all_predictions, brute_tally, central_diff, naive_conv, rel_err


@pytest.mark.parametrize("C,O,H,k,s,p", [(3, 4, 8, 3, 1, 1), (2, 3, 7, 5, 1, 2),
                                         (1, 2, 9, 3, 2, 0), (3, 2, 6, 2, 2, 1)])
def test_conv_matches_naive(rng, C, O, H, k, s, p):
    spec = ConvSpec(C, O, k, s, p)
    X = rng.normal(size=(2, C, H, H))
    K = rng.normal(size=(O, C, k, k))
    b = rng.normal(size=O)
    Y = conv_forward(spec, X, K, b)
    assert Y.shape[2:] == spec.out_hw(H, H)
    np.testing.assert_allclose(Y, naive_conv(X, K, b, s, p), rtol=0, atol=1e-10)


def test_conv_output_size_and_single_image(rng):
    spec = ConvSpec(3, 2)
    assert spec.out_hw(32, 32) == (32, 32)
    X = rng.normal(size=(3, 32, 32))
    K = rng.normal(size=(2, 3, 5, 5))
    Y = conv_forward(spec, X, K, np.zeros(2))
    assert Y.shape == (2, 32, 32)
    np.testing.assert_allclose(Y, conv_forward(spec, X[None], K, np.zeros(2))[0])
    with pytest.raises(ValueError):
        conv_forward(spec, rng.normal(size=(1, 2, 8, 8)), K, np.zeros(2))


def test_conv_is_linear(rng):
    spec = ConvSpec(2, 3, 3, 1, 1)
    K = rng.normal(size=(3, 2, 3, 3))
    z = np.zeros(3)
    X1, X2 = rng.normal(size=(2, 1, 2, 6, 6))
    np.testing.assert_allclose(conv_forward(spec, 2 * X1 - 3 * X2, K, z),
                               2 * conv_forward(spec, X1, K, z) - 3 * conv_forward(spec, X2, K, z),
                               atol=1e-12)


def test_prelu_and_pool():
    Y = np.array([[[[-2.0, 1.0], [3.0, -4.0]]]])
    np.testing.assert_array_equal(prelu(Y, np.array([0.25])), [[[[-0.5, 1.0], [3.0, -1.0]]]])
    X = np.arange(25.0).reshape(1, 1, 5, 5)
    np.testing.assert_array_equal(max_pool2(X), [[[[6.0, 8.0], [16.0, 18.0]]]])


def test_tally_worked_example():
    a = GroupAssignment(0, ((0, 1, 2), (3, 4, 5), (6, 7, 8)))
    np.testing.assert_array_equal(tally_scores([1], [a], 9), [0, 0, 0, 1, 1, 1, 0, 0, 0])


def test_tally_exhaustive_small():
    groups = [((0, 1), (2, 3)), ((0,), (1, 2), (3,)), ((0, 2), (1, 3))]
    assignments = [GroupAssignment(j, g) for j, g in enumerate(groups)]
    preds = list(all_predictions([len(g) for g in groups]))
    batch = tally_scores(np.array(preds), assignments, 4)
    for p, s in zip(preds, batch):
        np.testing.assert_array_equal(s, brute_tally(p, groups, 4))


def test_tally_random_large(rng):
    assignments = make_group_assignments(32, 10, rng)
    groups = [a.groups for a in assignments]
    for _ in range(200):
        p = [int(rng.integers(0, a.n_groups)) for a in assignments]
        np.testing.assert_array_equal(tally_scores(p, assignments, 10), brute_tally(p, groups, 10))


def test_tally_consensus_class_wins(rng):
    assignments = make_group_assignments(16, 10, rng)
    p = [a.group_of(7) for a in assignments]
    s = tally_scores(p, assignments, 10)
    assert s[7] == 16 and np.argmax(s) == 7
    with pytest.raises(ValueError):
        tally_scores(p[:-1], assignments, 10)


def test_group_assignments_are_partitions(rng):
    for n_classes, m_max in itertools.product((2, 3, 9, 10, 100), (2, 5)):
        for a in make_group_assignments(20, n_classes, rng, m_max):
            members = sorted(c for g in a.groups for c in g)
            assert members == list(range(n_classes))
            sizes = [len(g) for g in a.groups]
            assert max(sizes) - min(sizes) <= 1
            assert 2 <= a.n_groups <= min(n_classes, m_max)
    nine = make_group_assignments(5, 9, rng, m=3)
    assert all(sorted(map(len, a.groups)) == [3, 3, 3] for a in nine)
    with pytest.raises(ValueError):
        make_group_assignments(1, 1, rng)
    with pytest.raises(ValueError):
        GroupAssignment(0, ((0,), (1,))).group_of(2)


def test_blocks_share_assignments(cache_dir):
    net = SpelaCNN.build((1, 8, 8), 6, channels=(4, 6), kernel_size=3, padding=1, head_dim=4,
                         cache_dir=cache_dir)
    a1, a2 = net.blocks[0].assignments, net.blocks[1].assignments
    assert a1 == a2[:4]
    assert net.blocks[0].pool and not net.blocks[1].pool
    assert net.blocks[1].in_hw == (4, 4)


def _block(cache_dir, seed=0, kind=LossKind.COSINE_LOG, C=2, n_k=3, hw=(5, 5), n_classes=5):
    r = make_rng(seed)
    spec = ConvSpec(C, n_k, 3, 1, 1)
    blk = build_block(spec, hw, make_group_assignments(n_k, n_classes, r), n_classes, r,
                      head_dim=4, loss_kind=kind, cache_dir=cache_dir)
    blk.b[:] = 0.1 * r.normal(size=n_k)
    blk.head_b[:] = 0.1 * r.normal(size=blk.head_b.shape)
    return blk, r


@pytest.mark.parametrize("kind", [LossKind.COSINE_LOG, LossKind.CROSS_ENTROPY_HEAD])
def test_kernel_gradients_match_finite_differences(kind, cache_dir):
    worst = 0.0
    for seed in range(50):
        blk, r = _block(cache_dir, seed, kind)
        X = r.normal(size=(3, 2, 5, 5))
        y = r.integers(0, 5, 3)
        j = int(seed % blk.n_kernels)
        E = blk.group_E[j]
        t = blk.group_of[j][y]

        def loss():
            Y = conv_forward(blk.spec, X, blk.K, blk.b)[:, j].reshape(3, -1)
            O = np.where(Y > 0, Y, blk.a[j] * Y)
            H = leaky_relu(normalize_rows(O) @ blk.head_W[j].T + blk.head_b[j], blk.head_slope)
            return loss_and_grad(H, t, E, kind)[0].mean()

        Y, cols = conv_pre(X, blk.K, blk.b, blk.spec)
        _, _, g = kernel_loss_and_grads(blk, j, cols, Y[:, j].reshape(3, -1), y)
        pairs = [(g["dK"].reshape(blk.K.shape[1:]), blk.K[j]), (g["dW"], blk.head_W[j]),
                 (g["dhb"], blk.head_b[j])]
        for analytic, param in pairs:
            worst = max(worst, rel_err(analytic, central_diff(loss, param)))
        for analytic, vec in ((g["db"], blk.b), (g["da"], blk.a)):
            fd = central_diff(loss, vec)[j]
            worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8))
    assert worst < 1e-5


def test_zero_lr_kernel_step_is_a_no_op(cache_dir):
    blk, r = _block(cache_dir)
    before = copy.deepcopy((blk.K, blk.b, blk.a, blk.head_W, blk.head_b))
    kernel_step(blk, 1, r.normal(size=(4, 2, 5, 5)), r.integers(0, 5, 4), lr=0.0)
    for x, y in zip(before, (blk.K, blk.b, blk.a, blk.head_W, blk.head_b)):
        np.testing.assert_array_equal(x, y)


def test_kernel_step_touches_only_its_kernel(cache_dir):
    blk, r = _block(cache_dir)
    before = copy.deepcopy((blk.K, blk.head_W))
    kernel_step(blk, 1, r.normal(size=(4, 2, 5, 5)), r.integers(0, 5, 4))
    for old, new in zip(before, (blk.K, blk.head_W)):
        assert not np.array_equal(old[1], new[1])
        np.testing.assert_array_equal(old[[0, 2]], new[[0, 2]])


def test_sequential_kernels_match_vectorized_block(cache_dir):
    a, r = _block(cache_dir, seed=4)
    b = copy.deepcopy(a)
    for _ in range(3):
        X = r.normal(size=(6, 2, 5, 5))
        y = r.integers(0, 5, 6)
        preds, _, _ = block_step(a, X, y)
        seq = np.stack([kernel_step(b, j, X, y)[0] for j in range(b.n_kernels)], axis=1)
        np.testing.assert_array_equal(preds, seq)
    for name in ("K", "b", "a", "head_W", "head_b"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=0, atol=1e-14)


def test_adam_matches_reference():
    p = {"w": np.array([[1.0, -2.0]])}
    opt = Adam(p, lr=0.1)
    g = np.array([[0.5, -1.0]])
    m = v = 0.0
    w = p["w"].copy()
    for t in range(1, 4):
        opt.step(p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-14)


def _image_data(n=60, k=3, seed=0):
    r = make_rng(seed)
    y = np.arange(n) % k
    X = np.zeros((n, 1, 8, 8))
    for i, c in enumerate(y):
        X[i, 0, :, 2 * c:2 * c + 3] = 1.0
    X += 0.1 * r.normal(size=X.shape)
    return LabeledDataset(X.reshape(n, -1), y, k, image_shape=(1, 8, 8))


def test_second_block_training_leaves_first_block_frozen(cache_dir):
    data = _image_data()
    net = SpelaCNN.build((1, 8, 8), 3, channels=(4, 4), kernel_size=3, padding=1, head_dim=4,
                         cache_dir=cache_dir)
    snapshots = []
    m = cnn_train(net, data, CnnTrainConfig(epochs=(2, 2), batch_size=10), data,
                  callback=lambda e, n, _: snapshots.append(n.blocks[0].K.copy()))
    np.testing.assert_array_equal(snapshots[1], snapshots[3])
    assert not np.array_equal(snapshots[0], snapshots[1])
    assert sorted({r["layer"] for r in m.records}) == [1, 2]
    accs = cnn_evaluate(net, data)
    assert accs[0][0] > 0.6
    pred, S = net.predict(data.images()[:5], exit_block=1)
    assert S.shape == (5, 3) and np.array_equal(pred, np.argmax(S, axis=1))
    with pytest.raises(ValueError):
        net.predict(data.images()[:5], exit_block=3)
    with pytest.raises(ValueError):
        cnn_train(net, data, CnnTrainConfig(epochs=(1,)))


def test_cnn_training_is_deterministic(cache_dir):
    data = _image_data()
    runs = []
    for _ in range(2):
        net = SpelaCNN.build((1, 8, 8), 3, channels=(3,), kernel_size=3, padding=1, head_dim=4,
                             cache_dir=cache_dir)
        runs.append(cnn_train(net, data, CnnTrainConfig(epochs=(2,), batch_size=16)).to_csv())
    assert runs[0] == runs[1]
