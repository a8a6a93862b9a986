"""Acceptance criteria 1 to 11.

Each test prints one PASS/FAIL line (collected again in the terminal
summary). Accuracy criteria are stated for full MNIST; when only the
5000-digit fallback sample is available they still run and report, but a
miss is recorded as an expected failure because the stated dataset is
absent.
"""

import copy
import os

import numpy as np
import pytest

from spela.bp import BpNetwork, bp_train
from spela.cnn import (ConvSpec, GroupAssignment, build_block, conv_forward, conv_pre,
                       kernel_loss_and_grads, make_group_assignments, tally_scores)
from spela.datasets import LabeledDataset, load_cifar, load_idx_dir
from spela.embeddings import SimulationConfig, energy, generate_random, generate_symmetric
from spela.config import load_preset
from spela.experiments import run_once
from spela.linalg import leaky_relu, make_rng, matvec, normalize_rows
from spela.losses import LossKind, loss_and_grad
from spela.mlp import (SpelaNetwork, TrainConfig, evaluate, head_logits, layer_forward,
                       local_update, train)
from spela.profiler import CostLedger, attach

from oracles import (all_predictions, brute_tally, central_diff, naive_conv,
                     naive_cosine_scores, naive_matvec, rel_err)

FULL_MNIST_TRAIN = 60000
SPELA_B = dict(lr0=2.5, decay_amount=0.1, decay_every=10, decay_mode="subtract",
               batch_size=50, epochs=200)


def _fallback(mnist):
    return len(mnist[0]) < FULL_MNIST_TRAIN


def _settle(ok, mnist, what):
    if not ok and _fallback(mnist):
        pytest.xfail(f"{what} missed on the {len(mnist[0])}-sample fallback; "
                     "the criterion is stated for full MNIST")
    assert ok


@pytest.fixture(scope="session")
def spela_run(mnist, tmp_path_factory):
    """Memoized SPELA_B training: (sizes, overrides) -> per-layer final test accuracy."""
    cache = tmp_path_factory.mktemp("acceptance_embeddings")
    memo = {}

    def run(sizes, seed=0, **overrides):
        key = (tuple(sizes), seed, tuple(sorted(overrides.items())))
        if key not in memo:
            loss = overrides.pop("loss_kind", LossKind.COSINE_LOG)
            net = SpelaNetwork.build(list(sizes), 10, loss, seed=seed, cache_dir=cache)
            cfg = TrainConfig(**{**SPELA_B, "seed": seed, "loss_kind": loss,
                                 "eval_every": 10 ** 6, **overrides})
            train(net, mnist[0], cfg)
            memo[key] = [acc for acc, _, _ in evaluate(net, mnist[1])]
        return memo[key]
    return run


def _steps_scale(mnist):
    """Epoch multiplier that gives the fallback as many SGD steps as full MNIST."""
    return max(1, round(FULL_MNIST_TRAIN / len(mnist[0])))


# -- quantitative ------------------------------------------------------------

def test_criterion_01_one_epoch(spela_run, mnist, verdict):
    s = _steps_scale(mnist)
    accs = spela_run((784, 1024, 10), epochs=s, decay_every=10 * s)
    ok = accs[-1] >= 0.70
    verdict(1, ok, f"output accuracy after {s} epoch(s) of {len(mnist[0])} samples: "
                   f"{100 * accs[-1]:.2f}% (need >= 70%)")
    _settle(ok, mnist, "one-epoch accuracy")


@pytest.mark.long
def test_criterion_02_two_hundred_epochs(spela_run, mnist, verdict):
    s = _steps_scale(mnist)
    runs = np.array([spela_run((784, 1024, 10), seed=k, epochs=200 * s, decay_every=10 * s)
                     for k in range(5)])
    hidden, out = 100 * runs.mean(axis=0)
    ok = 93.0 <= out <= 96.0 and 90.5 <= hidden <= 92.0
    verdict(2, ok, f"5-seed mean output {out:.2f}% (need 93-96), hidden {hidden:.2f}% "
                   f"(need 90.5-92); per seed output {np.round(100 * runs[:, 1], 2).tolist()}")
    _settle(ok, mnist, "200-epoch accuracy band")


def test_criterion_03_loss_ablation(spela_run, mnist, verdict):
    acc = {k: 100 * spela_run((784, 1024, 10), loss_kind=k)[0] for k in
           (LossKind.COSINE_LOG, LossKind.EUCLIDEAN, LossKind.NORMALIZED_EUCLIDEAN,
            LossKind.ANGULAR_LOG)}
    cos = acc[LossKind.COSINE_LOG]
    checks = {"cosine >= euclidean + 10": cos >= acc[LossKind.EUCLIDEAN] + 10,
              "|normalized euclidean - cosine| <= 2":
                  abs(acc[LossKind.NORMALIZED_EUCLIDEAN] - cos) <= 2,
              "|angular - cosine| <= 1": abs(acc[LossKind.ANGULAR_LOG] - cos) <= 1}
    ok = all(checks.values())
    verdict(3, ok, "one-layer " + ", ".join(f"{k.value} {v:.2f}%" for k, v in acc.items())
            + "; failed: " + (", ".join(k for k, v in checks.items() if not v) or "none"))
    _settle(ok, mnist, "loss ablation")


def test_criterion_04_binarized(spela_run, mnist, verdict):
    acc = 100 * spela_run((784, 1024, 10), binarize_weights=True)[0]
    ok = acc >= 88.0
    verdict(4, ok, f"binarized one-layer accuracy {acc:.2f}% (need >= 88%)")
    _settle(ok, mnist, "binarized accuracy")


def _profile(alg, depth, cache_dir):
    r = make_rng(0)
    data = LabeledDataset(r.random((100, 784)), np.arange(100) % 10, 10)
    sizes = [784] + [1024] * depth + [10]
    cfg = TrainConfig(epochs=1, batch_size=50, lr0=0.1)
    if alg == "spela":
        net, fit = SpelaNetwork.build(sizes, 10, cache_dir=cache_dir), train
    else:
        net, fit = BpNetwork.build(sizes), bp_train
    with attach(CostLedger()) as ledger:
        fit(net, data, cfg)
    return ledger


def test_criterion_05_profiler(cache_dir, verdict):
    sp = [_profile("spela", d, cache_dir) for d in range(1, 10)]
    bp = [_profile("bp", d, cache_dir) for d in range(1, 10)]
    sp_peak = [l.peak_stored_activation_scalars for l in sp]
    bp_peak = [l.peak_stored_activation_scalars for l in bp]
    spread = max(sp_peak) / min(sp_peak) - 1
    ratio = sp[-1].per_sample()["update_maccs"] / bp[-1].per_sample()["update_maccs"]
    ok = spread < 0.01 and all(b > a for a, b in zip(bp_peak, bp_peak[1:])) and 0.50 <= ratio <= 0.56
    verdict(5, ok, f"SPELA peak spread {100 * spread:.2f}%, BP relative peak "
                   f"{[round(b / bp_peak[0], 2) for b in bp_peak]}, update ratio {ratio:.4f}")
    assert ok


def test_criterion_06_depth_and_output_size(spela_run, mnist, verdict):
    shallow = spela_run((784, 1024, 10))
    deep = spela_run((784, 1024, 1024, 1024, 1024, 10))
    # the depth comparison reads the last hidden layer, whose one-hidden-layer
    # value is the reference row the sweep is anchored to
    gain = 100 * (deep[-2] - shallow[-2])
    out = {o: 100 * spela_run((784, 1034 - o, o))[-1] for o in (5, 10, 50, 100, 1000)}
    peak_ok = (out[50] > max(out[5], out[10], out[1000])
               and out[50] >= max(out.values()) - 1.0)
    checks = {"depth gain >= 4": gain >= 4.0, "size 5 <= 60%": out[5] <= 60.0,
              "size 50 peak": peak_ok}
    ok = all(checks.values())
    verdict(6, ok, f"last hidden 1 layer {100 * shallow[-2]:.2f}% vs 4 layers "
                   f"{100 * deep[-2]:.2f}% (gain {gain:.2f}); output by size "
            + ", ".join(f"{o}: {v:.2f}%" for o, v in out.items())
            + "; failed: " + (", ".join(k for k, v in checks.items() if not v) or "none"))
    _settle(ok, mnist, "depth/output-size shape")


def _cnn_data(kind):
    root = os.environ.get("SPELA_DATA_DIR")
    if not root:
        return None
    try:
        if kind == "svhn":
            d = os.path.join(root, "svhn")
            return load_idx_dir(d, "train"), load_idx_dir(d, "test")
        d = os.path.join(root, "cifar10")
        return load_cifar(d, "C10", "train"), load_cifar(d, "C10", "test")
    except (FileNotFoundError, ValueError):
        return None


@pytest.mark.long
def test_criterion_07_cnn(verdict):
    lines, ok = [], True
    for kind, preset, need in (("svhn", "cnn_ch_b_svhn", 0.74), ("cifar10", "cnn_b_cifar10", 0.53)):
        data = _cnn_data(kind)
        if data is None:
            ok = False
            lines.append(f"{kind}: data not found under $SPELA_DATA_DIR")
            continue
        res = run_once(load_preset(preset), 0, data=data)
        acc = res.metrics.final("test", 2)
        ok &= acc >= need
        lines.append(f"{kind}: {100 * acc:.2f}% (need >= {100 * need:.0f}%)")
    verdict(7, ok, "; ".join(lines))
    assert ok


# -- property based --------------------------------------------------------

def test_criterion_08_gradients(cache_dir, verdict):
    worst = {}
    for kind in LossKind:
        w = 0.0
        for seed in range(50):
            r = make_rng(seed)
            net = SpelaNetwork.build([5, 6], 4, kind, seed=seed, cache_dir=cache_dir)
            layer = net.layers[0]
            X, y = r.normal(size=(3, 5)), r.integers(0, 4, 3)
            E = layer.embeddings.vectors
            f = lambda: loss_and_grad(leaky_relu(normalize_rows(X) @ layer.W.T + layer.b,  # noqa: E731
                                                 layer.slope), y, E, kind)[0].mean()
            fd = central_diff(f, layer.W)
            W0 = layer.W.copy()
            _, cache = layer_forward(layer, X, training=True)
            local_update(layer, cache, y, 1.0, kind)
            w = max(w, rel_err(W0 - layer.W, fd))
        worst[f"mlp {kind.value}"] = w
    w = 0.0
    for seed in range(50):
        r = make_rng(seed)
        net = BpNetwork.build([5, 4, 3], seed=seed)
        X, y = r.normal(size=(3, 5)), r.integers(0, 3, 3)

        def ce():
            z = net.forward(X)
            z = z - z.max(axis=1, keepdims=True)
            return -(z[np.arange(3), y] - np.log(np.exp(z).sum(axis=1))).mean()
        net.forward(X, training=True)
        gW, _, _ = net.backward(y)
        w = max(w, max(rel_err(gW[k], central_diff(ce, net.weights[k])) for k in range(2)))
    worst["bp"] = w
    for kind in (LossKind.COSINE_LOG, LossKind.CROSS_ENTROPY_HEAD):
        w = 0.0
        for seed in range(50):
            r = make_rng(seed)
            spec = ConvSpec(2, 2, 3, 1, 1)
            blk = build_block(spec, (4, 4), make_group_assignments(2, 4, r), 4, r, head_dim=4,
                              loss_kind=kind, cache_dir=cache_dir)
            X, y = r.normal(size=(3, 2, 4, 4)), r.integers(0, 4, 3)
            j = seed % 2

            def kl():
                Y = conv_forward(spec, X, blk.K, blk.b)[:, j].reshape(3, -1)
                O = np.where(Y > 0, Y, blk.a[j] * Y)
                H = leaky_relu(normalize_rows(O) @ blk.head_W[j].T + blk.head_b[j], 0.001)
                return loss_and_grad(H, blk.group_of[j][y], blk.group_E[j], kind)[0].mean()
            Y, cols = conv_pre(X, blk.K, blk.b, spec)
            _, _, g = kernel_loss_and_grads(blk, j, cols, Y[:, j].reshape(3, -1), y)
            w = max(w, rel_err(g["dK"].reshape(2, 3, 3), central_diff(kl, blk.K[j])),
                    rel_err(g["dW"], central_diff(kl, blk.head_W[j])))
        worst[f"cnn {kind.value}"] = w
    ok = max(worst.values()) < 1e-5
    verdict(8, ok, "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_09_embedding_geometry(verdict):
    checks = {}
    e2 = generate_symmetric(2, 5).vectors
    checks["n=2 antipodal"] = abs(e2[0] @ e2[1] + 1) < 1e-6
    e3 = generate_symmetric(3, 2).vectors
    c3 = e3 @ e3.T
    checks["n=3 dim=2 cos -0.5"] = np.all(np.abs(c3[np.triu_indices(3, 1)] + 0.5) <= 1e-3)
    simplex = True
    for n, dim in ((4, 3), (5, 4), (6, 8), (10, 10), (10, 50)):
        v = generate_symmetric(n, dim).vectors
        simplex &= bool(np.all(np.abs((v @ v.T)[np.triu_indices(n, 1)] + 1 / (n - 1)) <= 1e-2))
    checks["simplex cosines"] = simplex
    e = generate_symmetric(8, 3, SimulationConfig(rng_seed=3), record=True)
    checks["monotone descent"] = bool(np.all(np.diff(e.energy_trace) <= 0))
    rnd = generate_random(8, 3, "rand_normal", make_rng(3))
    checks["symmetric < random"] = energy(e) < energy(rnd)
    ok = all(checks.values())
    verdict(9, ok, ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


def test_criterion_10_oracles(cache_dir, verdict):
    r = make_rng(10)
    errs = {}
    errs["matvec"] = max(np.max(np.abs(matvec(W, x) - naive_matvec(W, x)))
                         for W, x in ((r.normal(size=(m, n)), r.normal(size=n))
                                      for m, n in r.integers(1, 12, (20, 2))))
    conv = 0.0
    for _ in range(5):
        C, O = (int(v) for v in r.integers(1, 4, 2))
        X, K, b = r.normal(size=(2, C, 8, 8)), r.normal(size=(O, C, 3, 3)), r.normal(size=O)
        conv = max(conv, np.max(np.abs(conv_forward(ConvSpec(C, O, 3, 1, 1), X, K, b)
                                       - naive_conv(X, K, b, 1, 1))))
    errs["conv_forward"] = conv
    groups = [((0, 1), (2, 3)), ((0,), (1, 2), (3,)), ((0, 2), (1, 3))]
    asg = [GroupAssignment(j, g) for j, g in enumerate(groups)]
    errs["tally_scores"] = max(int(np.max(np.abs(tally_scores(p, asg, 4) - brute_tally(p, groups, 4))))
                               for p in all_predictions([2, 3, 2]))
    net = SpelaNetwork.build([4, 6], 5, cache_dir=cache_dir)
    e = net.layers[0].embeddings
    errs["head_logits"] = max(np.max(np.abs(head_logits(h, e) - naive_cosine_scores(h, e.vectors)))
                              for h in r.normal(size=(20, 6)))
    ok = errs["tally_scores"] == 0 and max(errs.values()) <= 1e-10
    verdict(10, ok, "max deviation " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


def test_criterion_11_locality(mnist, cache_dir, verdict):
    data = mnist[0].take(np.arange(200))
    net = SpelaNetwork.build([784, 64, 32, 10], 10, cache_dir=cache_dir)
    emb = [l.embeddings.vectors.tobytes() for l in net.layers]
    with attach(CostLedger()) as ledger:
        train(net, data, TrainConfig(epochs=2, batch_size=50))
    emb_ok = emb == [l.embeddings.vectors.tobytes() for l in net.layers]
    calls_ok = ledger.forward_calls == {k: 2 * len(data) for k in range(3)}
    local_ok = True
    X = data.flat()[:50].astype(np.float64)
    H, _ = layer_forward(net.layers[0], X)
    for k in (1, 2):
        before = copy.deepcopy([(l.W, l.b) for l in net.layers])
        _, cache = layer_forward(net.layers[k], H if k == 1 else layer_forward(net.layers[1], H)[0],
                                 training=True)
        local_update(net.layers[k], cache, data.labels[:50], 1.0)
        for i, (W, b) in enumerate(before):
            same = np.array_equal(W, net.layers[i].W) and np.array_equal(b, net.layers[i].b)
            local_ok &= same == (i != k)
    ok = emb_ok and calls_ok and local_ok
    verdict(11, ok, f"embeddings unchanged: {emb_ok}, one forward per layer per sample: "
                    f"{calls_ok}, updates stay in their layer: {local_ok}")
    assert ok
