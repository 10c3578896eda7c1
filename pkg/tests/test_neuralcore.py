import numpy as np
import pytest

from corrforge.neuralcore import (
    INFER,
    SGD,
    TRAIN,
    ArchError,
    AvgPool2,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GradientReversal,
    LayerError,
    Softplus,
    Tensor,
    adversarial_step,
    bce_loss,
    build,
    check_layer,
    contrastive_loss,
    domain_head_arch,
    embed,
    init_params,
    layer_backward,
    layer_forward,
    load_weights,
    probe_gradients,
    save_weights,
    sgd_step,
    siamese_arch,
    siamese_step,
)


def _randomize(layer, rng):
    for k, v in layer.params.items():
        layer.params[k] = rng.normal(size=v.shape)
    return layer


def test_softplus_values():
    sp = Softplus()
    assert sp.forward(np.array([0.0]))[0] == pytest.approx(np.log(2), abs=1e-15)
    big = sp.forward(np.array([1000.0, -1000.0]))
    assert big[0] == 1000.0 and 0 <= big[1] < 1e-300


def test_avgpool_constant_and_floor():
    x = np.full((2, 3, 7, 5), 2.5)
    y = AvgPool2().forward(x)
    assert y.shape == (2, 3, 3, 2)
    assert np.all(y == 2.5)


@pytest.mark.parametrize("make,shape,mode", [
    (lambda: Conv2D(3, 4, 3), (2, 3, 5, 5), TRAIN),
    (lambda: AvgPool2(), (2, 3, 5, 5), TRAIN),
    (lambda: BatchNorm(3), (4, 3, 5, 5), TRAIN),
    (lambda: BatchNorm(3), (4, 3, 5, 5), INFER),
    (lambda: BatchNorm(5), (6, 5), TRAIN),
    (lambda: Softplus(), (2, 3, 5, 5), TRAIN),
    (lambda: Flatten(), (2, 3, 5, 5), TRAIN),
    (lambda: Dense(25, 4), (3, 25), TRAIN),
    (lambda: Dropout(0.0), (2, 5, 5), TRAIN),
])
def test_layer_gradients(make, shape, mode):
    rng = np.random.default_rng(0)
    layer = _randomize(make(), rng)
    if isinstance(layer, BatchNorm):
        layer.state["running_mean"] = rng.normal(size=layer.channels)
        layer.state["running_var"] = rng.uniform(0.5, 2.0, size=layer.channels)
    errs = check_layer(layer, rng.normal(size=shape), h=1e-5, mode=mode)
    assert errs and max(errs.values()) < 1e-6, errs


def test_first_conv_skips_input_gradient():
    rng = np.random.default_rng(1)
    layer = _randomize(Conv2D(2, 3, 3, needs_input_grad=False), rng)
    y = layer.forward(rng.normal(size=(2, 2, 6, 6)))
    assert layer.backward(np.ones_like(y)) is None
    assert layer.grads["weight"].shape == (3, 2, 3, 3)


def test_backward_without_forward_and_shape_errors():
    with pytest.raises(LayerError, match="without a matching forward"):
        Dense(3, 2).backward(np.zeros((1, 2)))
    with pytest.raises(LayerError):
        Dense(3, 2).forward(np.zeros((1, 4)))
    with pytest.raises(LayerError):
        Conv2D(2, 3, 3).forward(np.zeros((1, 3, 8, 8)))
    net = init_params(siamese_arch(5), 0)
    with pytest.raises(LayerError):
        net.forward(np.zeros((1, 2, 32, 32)))


def test_tensor_wrappers():
    rng = np.random.default_rng(2)
    layer = _randomize(Dense(4, 3), rng)
    x = Tensor(rng.normal(size=(2, 4)))
    y = layer_forward(layer, x)
    dx, grads = layer_backward(layer, Tensor(np.ones(y.shape)))
    np.testing.assert_allclose(dx.values, np.ones((2, 3)) @ layer.params["weight"].T)
    assert set(grads) == {"weight", "bias"}
    with pytest.raises(LayerError):
        Tensor(np.zeros(3), grad=np.zeros(4))


def test_contrastive_loss_examples():
    assert contrastive_loss(0.0, 1, 1.0)[0] == 0.0
    assert contrastive_loss(1.0, 0, 1.0)[0] == 0.0
    assert contrastive_loss(0.5, 0, 1.0)[0] == pytest.approx(0.125)
    with pytest.raises(ValueError):
        contrastive_loss(-0.1, 1)
    for d in (0.3, 0.7, 1.4):
        for lab in (0, 1):
            _, g = contrastive_loss(d, lab, 1.0)
            num = (contrastive_loss(d + 1e-6, lab)[0] - contrastive_loss(d - 1e-6, lab)[0]) / 2e-6
            assert g == pytest.approx(num, abs=1e-8)


def test_bce_loss_examples():
    for y in (0, 1):
        assert bce_loss(0.0, y)[0] == pytest.approx(np.log(2), abs=1e-15)
    loss, _ = bce_loss(20.0, 0)
    assert loss == pytest.approx(20.0, abs=1e-8) and np.isfinite(bce_loss(1e4, 0)[0])
    for z in (-3.0, 0.0, 3.0):
        for y in (0, 1):
            _, g = bce_loss(z, y)
            h = 1e-5
            num = (bce_loss(z + h, y)[0] - bce_loss(z - h, y)[0]) / (2 * h)
            assert abs(g - num) / max(abs(g), 1e-12) < 1e-8


def test_gradient_reversal():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    g = rng.normal(size=(4, 6))
    grl = GradientReversal(0.01)
    y = grl.forward(x)
    assert np.array_equal(y, x)
    assert np.array_equal(grl.backward(g), -0.01 * g)
    a, b = GradientReversal(0.3), GradientReversal(0.3)
    b.forward(a.forward(x))
    np.testing.assert_allclose(a.backward(b.backward(g)), 0.09 * g, rtol=1e-15)


def test_init_statistics_and_determinism():
    net = init_params(siamese_arch(10), seed=4)
    w = np.concatenate([p.ravel() for n, p in net.named_params() if n.endswith("weight")])
    assert w.size >= 10**5
    assert abs(w.mean()) < 0.002 and abs(w.std() - 0.05) < 0.002
    assert all(np.all(p == 0) for n, p in net.named_params() if n.endswith("bias"))
    again = init_params(siamese_arch(10), seed=4)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(net.named_params(), again.named_params()))
    head = init_params(domain_head_arch(10), seed=4)
    dense = [l for l in head.layers if isinstance(l, Dense)]
    assert [d.params["weight"].shape for d in dense] == [(10, 500), (500, 1000), (1000, 1)]
    for d in dense:
        fi, fo = d.params["weight"].shape
        assert np.abs(d.params["weight"]).max() <= np.sqrt(6 / (fi + fo))
        assert np.all(d.params["bias"] == 0)


def test_invalid_arch():
    with pytest.raises(ArchError):
        build({"input": [2, 64, 64], "layers": [{"kind": "pool3"}]})
    with pytest.raises(ArchError):
        build({"input": [2, 8, 8], "layers": [{"kind": "conv", "out": 4, "k": 9}]})
    with pytest.raises(ArchError):
        build({"input": [2, 8, 8], "layers": [{"kind": "dense", "out": 4}]})
    with pytest.raises(ArchError):
        init_params({**siamese_arch(3), "init": "uniform"}, 0)


def test_sgd_examples():
    p = {"w": np.array([1.0, -2.0])}
    out = sgd_step(p, {"w": np.zeros(2)}, 0.1, 0.9, {})
    assert np.array_equal(out["w"], p["w"])
    x, vel = {"x": np.array(5.0)}, {}
    for step in range(200):
        x = sgd_step(x, {"x": x["x"]}, 0.1, 0.0, vel)
        if abs(x["x"]) < 1e-6:
            break
    assert abs(x["x"]) < 1e-6 and step < 200
    # momentum against the hand-unrolled recurrence x_{k+1} = x_k + mu (x_k - x_{k-1}) - lr * g(x_k)
    a, lr, mu = 0.7, 0.05, 0.9
    x, vel = {"x": np.array(3.0)}, {}
    prev, cur = 3.0, 3.0 - lr * a * 3.0
    x = sgd_step(x, {"x": a * x["x"]}, lr, mu, vel)
    assert float(x["x"]) == pytest.approx(cur, abs=1e-14)
    for _ in range(30):
        x = sgd_step(x, {"x": a * x["x"]}, lr, mu, vel)
        prev, cur = cur, cur + mu * (cur - prev) - lr * a * cur
        assert float(x["x"]) == pytest.approx(cur, abs=1e-12)


def _small_pair_batch(seed=0, n=4):
    rng = np.random.default_rng(seed)
    xa = rng.normal(size=(n, 2, 64, 64)) * 0.5
    xb = xa + rng.normal(size=xa.shape) * 0.3
    labels = np.array([1, 0] * (n // 2))
    return xa, xb, labels


def test_end_to_end_gradient_check():
    trunk = init_params(siamese_arch(10), seed=5)
    xa, xb, labels = _small_pair_batch()

    def loss_and_grads():
        loss, _ = siamese_step(trunk, xa, xb, labels, margin=1.0)
        return loss, trunk.grads()

    errs = probe_gradients(loss_and_grads, trunk.params(), 50, h=1e-4, seed=1)
    assert errs.max() < 1e-4, errs


def test_twin_symmetry():
    trunk = init_params(siamese_arch(5), seed=6)
    xa, xb, labels = _small_pair_batch(1)
    l1, _ = siamese_step(trunk, xa, xb, labels)
    g1 = trunk.grads()
    l2, _ = siamese_step(trunk, xb, xa, labels)
    g2 = trunk.grads()
    assert l1 == pytest.approx(l2, rel=1e-12)
    # conv biases feeding batchnorm have an exactly zero gradient, so compare at the network's scale
    scale = max(np.abs(g).max() for g in g1.values())
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=0, atol=1e-9 * scale)


def _domain_trunk_grads(lam):
    trunk = init_params(siamese_arch(5), seed=7)
    head = init_params(domain_head_arch(5, lam=lam), seed=8)
    xa, xb, labels = _small_pair_batch(2)
    target = np.random.default_rng(9).normal(size=(4, 2, 64, 64))
    # domain loss only: no source pairs, source patches passed as targets' counterparts
    adversarial_step(trunk, head, xa[:0], xb[:0], labels[:0], np.concatenate([xa, target]))
    return trunk.grads()


def test_reversal_scales_trunk_gradient():
    lam = 0.01
    with_rev = _domain_trunk_grads(lam)
    plain = _domain_trunk_grads(-1.0)  # reversal by -1 is the identity on gradients
    scale = max(np.abs(g).max() for g in plain.values())
    for k in with_rev:
        np.testing.assert_allclose(with_rev[k], -lam * plain[k], rtol=0, atol=1e-9 * lam * scale)


def test_lambda_zero_matches_plain_siamese():
    xa, xb, labels = _small_pair_batch(3)
    target = np.random.default_rng(4).normal(size=(4, 2, 64, 64))
    t1 = init_params(siamese_arch(5), seed=10)
    t2 = init_params(siamese_arch(5), seed=10)
    head = init_params(domain_head_arch(5, lam=0.0), seed=11)
    siamese_step(t1, xa, xb, labels)
    # the plain step must see the same batchnorm batch, so the target patches ride along with zero loss weight
    adversarial_step(t2, head, xa, xb, labels, target)
    g2 = t2.grads()
    n = len(xa)
    t3 = init_params(siamese_arch(5), seed=10)
    from corrforge.neuralcore import contrastive_batch
    out = t3.forward(np.concatenate([xa, xb, target]), TRAIN)
    _, ga, gb, _ = contrastive_batch(out[:n], out[n:2 * n], labels)
    t3.backward(np.concatenate([ga, gb, np.zeros((len(target), 5))]))
    for k, v in t3.grads().items():
        np.testing.assert_allclose(g2[k], v, rtol=0, atol=1e-12)


def test_inference_determinism_and_weight_file(tmp_path):
    trunk = init_params(siamese_arch(10), seed=12)
    head = init_params(domain_head_arch(10), seed=13)
    x = np.random.default_rng(5).normal(size=(8, 2, 64, 64))
    trunk.forward(x, TRAIN)  # move running statistics off their defaults
    a, b = embed(trunk, x), embed(trunk, x)
    assert np.array_equal(a, b)
    mean = np.random.default_rng(6).normal(size=(2, 64, 64))
    save_weights(tmp_path / "w.bin", trunk, head=head, mean_patch=mean, extra={"rho_max": 2.5})
    wf = load_weights(tmp_path / "w.bin")
    assert wf.n_features == 10 and wf.extra["rho_max"] == 2.5
    assert np.array_equal(wf.mean_patch, mean)
    assert np.array_equal(embed(wf.trunk, x), a)
    for (n1, p1), (n2, p2) in zip(head.named_params(), wf.head.named_params()):
        assert n1 == n2 and np.array_equal(p1, p2)
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == b"CFNN"
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ArchError):
        load_weights(tmp_path / "bad.bin")


def test_sgd_optimizer_updates_network():
    trunk = init_params(siamese_arch(5), seed=14)
    xa, xb, labels = _small_pair_batch(4, n=8)
    opt = SGD(learning_rate=0.05, momentum=0.9)
    first, _ = siamese_step(trunk, xa, xb, labels)
    for _ in range(10):
        siamese_step(trunk, xa, xb, labels)
        opt.step(trunk)
    last, _ = siamese_step(trunk, xa, xb, labels)
    assert last < first
