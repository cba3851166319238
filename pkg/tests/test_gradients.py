"""Finite-difference verification of every analytic gradient path.

The network is piecewise linear (ReLU, max-pool), so central differences are
exact wherever no kink is crossed. Layer checks use probes constructed away
from kinks; full-network checks accept a probe only when FD(h) and FD(h/2)
agree, which certifies the probe segment is linear."""

import numpy as np
import pytest

from equitrack.distill import (
    GroupTransform,
    TrainConfig,
    _loss_and_grads,
    training_weights,
)
from equitrack.nn import (
    ArchDescriptor,
    ConvNet,
    conv_backward,
    conv_forward,
    decode_positions,
    maxpool_backward,
    maxpool_forward,
    sigmoid,
    sigmoid_grad,
)

H = 1e-3
REL = 1e-4


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / denom


class TestSigmoid:
    def test_grad_matches_fd(self):
        xs = np.linspace(-4, 4, 17)
        y = sigmoid(xs)
        fd = (sigmoid(xs + H) - sigmoid(xs - H)) / (2 * H)
        np.testing.assert_allclose(sigmoid_grad(y), fd, rtol=1e-5)


class TestConvLayer:
    @pytest.mark.parametrize("kshape", [(3, 3, 2, 4), (1, 1, 3, 5)])
    def test_weight_bias_input_gradients(self, kshape):
        rng = np.random.default_rng(0)
        kh, kw, cin, cout = kshape
        x = rng.normal(size=(2, 16, 16, cin))
        w = rng.normal(size=kshape) * 0.3
        b = rng.normal(size=cout) * 0.1
        coeff = rng.normal(size=(2, 16, 16, cout))

        def loss(wv, bv, xv):
            out, _ = conv_forward(xv, wv, bv)
            return float((out * coeff).sum())

        out, cols = conv_forward(x, w, b)
        dx, dw, db = conv_backward(coeff, cols, x.shape, w)

        for arr, grad, which in ((w, dw, "w"), (b, db, "b"), (x, dx, "x")):
            flat = arr.ravel()
            idxs = rng.choice(flat.size, size=min(20, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + H
                lp = loss(w, b, x)
                flat[i] = orig - H
                lm = loss(w, b, x)
                flat[i] = orig
                fd = (lp - lm) / (2 * H)
                assert rel_err(grad.ravel()[i], fd) < REL, which


class TestMaxPool:
    def test_gradient_routes_to_argmax(self):
        rng = np.random.default_rng(1)
        # well-separated values: no argmax flip within +-h
        x = rng.permutation(16 * 16 * 2).reshape(1, 16, 16, 2).astype(float)
        coeff = rng.normal(size=(1, 8, 8, 2))
        out, arg = maxpool_forward(x)
        dx = maxpool_backward(coeff, arg, x.shape)

        def loss(xv):
            o, _ = maxpool_forward(xv)
            return float((o * coeff).sum())

        flat = x.ravel()
        for i in rng.choice(flat.size, size=30, replace=False):
            orig = flat[i]
            flat[i] = orig + H
            lp = loss(x)
            flat[i] = orig - H
            lm = loss(x)
            flat[i] = orig
            assert rel_err(dx.ravel()[i], (lp - lm) / (2 * H)) < REL

    def test_tie_routes_first_row_major(self):
        x = np.full((1, 2, 2, 1), 3.0)
        out, arg = maxpool_forward(x)
        assert arg[0, 0, 0, 0] == 0
        dx = maxpool_backward(np.ones((1, 1, 1, 1)), arg, x.shape)
        np.testing.assert_array_equal(dx[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


class TestFullNetwork:
    @pytest.mark.parametrize("channels", ["xy", "xyzs"])
    def test_weight_gradients_on_kink_free_probes(self, channels):
        rng = np.random.default_rng(2)
        desc = ArchDescriptor(channels=channels, normalize="center")
        model = ConvNet(desc, seed=3, dtype=np.float64)
        x = rng.normal(size=(1, 16, 16, 1))
        coeff = rng.normal(size=(1, 8, 8, desc.out_channels))

        bundle, cache = model.forward(x, want_cache=True)
        grads = model.backward(cache, coeff)

        def loss():
            b, _ = model.forward(x)
            return float((b.raw * coeff).sum())

        checked = 0
        for li in (0, 2, 5, 11):
            w = model.weights[li][0]
            flat = w.ravel()
            for i in rng.choice(flat.size, size=8, replace=False):
                orig = flat[i]
                fds = []
                for h in (H, H / 2):
                    flat[i] = orig + h
                    lp = loss()
                    flat[i] = orig - h
                    lm = loss()
                    fds.append((lp - lm) / (2 * h))
                flat[i] = orig
                if rel_err(fds[0], fds[1]) > 1e-6:
                    continue  # probe crosses a ReLU/pool kink
                checked += 1
                assert rel_err(grads[li][0].ravel()[i], fds[0]) < REL
        assert checked >= 12

    def test_bias_gradients(self):
        rng = np.random.default_rng(4)
        model = ConvNet(ArchDescriptor(normalize="none"), seed=5, dtype=np.float64)
        x = rng.normal(size=(1, 16, 16, 1))
        coeff = rng.normal(size=(1, 8, 8, 3))
        bundle, cache = model.forward(x, want_cache=True)
        grads = model.backward(cache, coeff)

        def loss():
            b, _ = model.forward(x)
            return float((b.raw * coeff).sum())

        checked = 0
        for li in (1, 11):
            bias = model.weights[li][1]
            for i in rng.choice(bias.size, size=3, replace=False):
                orig = bias[i]
                fds = []
                for h in (H, H / 2):
                    bias[i] = orig + h
                    lp = loss()
                    bias[i] = orig - h
                    lm = loss()
                    fds.append((lp - lm) / (2 * h))
                bias[i] = orig
                if rel_err(fds[0], fds[1]) > 1e-6:
                    continue
                checked += 1
                assert rel_err(grads[li][1][i], fds[0]) < REL
        assert checked >= 4

    def test_zero_dout_gives_zero_grads(self):
        model = ConvNet(seed=0, dtype=np.float64)
        x = np.random.default_rng(0).normal(size=(1, 16, 16, 1))
        bundle, cache = model.forward(x, want_cache=True)
        grads = model.backward(cache, np.zeros_like(bundle.raw))
        for dw, db in grads:
            assert not dw.any() and not db.any()

    def test_stale_cache_rejected(self):
        model = ConvNet(seed=0)
        with pytest.raises(ValueError, match="cache"):
            model.backward({"layers": []}, np.zeros((1, 8, 8, 3)))


class TestLossHead:
    """FD check of the combined loss gradient on the raw output maps,
    dropout off (dropout zeroes analytic entries that FD cannot see)."""

    def build(self, channels="xy", b=3, hm=4, n=8, seed=6):
        rng = np.random.default_rng(seed)
        desc = ArchDescriptor(channels=channels)
        raw = rng.normal(size=(b, hm, hm, desc.out_channels))
        cfg = TrainConfig(dropout_rate=0.0, seed=0)
        transforms = [
            GroupTransform(
                tx=rng.uniform(-2, 2), ty=rng.uniform(-2, 2),
                theta=rng.uniform(0, 2 * np.pi), mirror=bool(rng.random() < 0.5),
                dz=rng.uniform(-1, 1) if desc.has_z else 0.0,
                log_s=rng.uniform(-0.5, 0.5),
            )
            for _ in range(b)
        ]
        return desc, raw, cfg, transforms, (n, n)

    def loss_of(self, raw, desc, cfg, transforms, input_shape):
        bundle = decode_positions(raw, input_shape, desc.channels)
        _, wcache = training_weights(
            bundle.rho, np.random.default_rng(0), 0.0, cfg.eps
        )
        l_d, l_c, dout = _loss_and_grads(bundle, wcache, transforms, desc, cfg)
        return cfg.lambda_disagree * l_d + cfg.lambda_consist * l_c, dout

    @pytest.mark.parametrize("channels", ["xy", "xyzs"])
    def test_dout_matches_fd(self, channels):
        desc, raw, cfg, transforms, ishape = self.build(channels)
        _, dout = self.loss_of(raw, desc, cfg, transforms, ishape)
        rng = np.random.default_rng(7)
        flat = raw.ravel()
        h = 1e-5
        checked = 0
        for i in rng.choice(flat.size, size=60, replace=False):
            orig = flat[i]
            fds = []
            for hh in (h, h / 2):
                flat[i] = orig + hh
                lp, _ = self.loss_of(raw, desc, cfg, transforms, ishape)
                flat[i] = orig - hh
                lm, _ = self.loss_of(raw, desc, cfg, transforms, ishape)
                fds.append((lp - lm) / (2 * hh))
            flat[i] = orig
            if abs(fds[0] - fds[1]) > 1e-7 * max(1.0, abs(fds[0])):
                continue  # probe crosses an L1 sign kink
            checked += 1
            assert dout.ravel()[i] == pytest.approx(fds[0], rel=1e-4, abs=1e-8)
        assert checked >= 30
