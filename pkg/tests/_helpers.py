"""Shared test utilities: finite-difference checks and small seeded datasets."""

import numpy as np

from dynsubnet import data, nn, noise

H = 1e-3


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _loss(model, x, y, weights=None):
    logits, _ = nn.forward(model, x, train=True, weights=weights, update_stats=False)
    return nn.cross_entropy(logits, y)[0]


def numeric_grad(f, arr, h=H):
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def model_grad_errors(model, x, y, names, h=H):
    """Relative error of analytic vs central-difference gradients for ``names`` (and ``"input"``)."""
    logits, tape = nn.forward(model, x, train=True, update_stats=False)
    _, d = nn.cross_entropy(logits, y)
    grads = nn.backward(model, tape, d, input_grad=True)
    errs = {}
    for name in names:
        target = x if name == "input" else model.weights[name]
        errs[name] = rel_err(grads[name], numeric_grad(lambda: _loss(model, x, y), target, h))
    return errs


def noise_grad_error(model, params, x, y, eta):
    """Relative error of the beta gradient with eta frozen."""
    _, _, bg = noise.noisy_loss_and_grads(model, params, (x, y), eta)
    errs = []
    for layer, beta in params.beta.items():
        num = numeric_grad(lambda: _loss(model, x, y, noise.perturbed_weights(model, params, eta)), beta)
        errs.append(rel_err(bg[layer], num))
    return max(errs)


def conv_instance(rng):
    """Random small conv layer followed by a linear readout; returns ``(spec, input shape)``."""
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 3))
    size = int(rng.integers(max(k, 3), 6))
    pad = int(rng.integers(0, k))
    ho = (size + 2 * pad - k) // stride + 1
    spec = [
        {"kind": "conv2d", "in": cin, "out": cout, "kernel": k, "stride": stride, "padding": pad},
        {"kind": "flatten"},
        {"kind": "linear", "in": cout * ho * ho, "out": 3},
    ]
    return spec, (cin, size, size)


def float64_model(spec, shape, seed, classes=3):
    m = nn.build_model(spec, classes, seed=seed, input_shape=shape, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    for name in m.param_names():
        m.weights[name] = m.weights[name] + 0.1 * rng.standard_normal(m.weights[name].shape)
    return m


def batch(rng, shape, n=3, classes=3):
    return rng.standard_normal((n, *shape)), rng.integers(0, classes, n)


def splits(classes=4, samples=400, size=8, separation=1.0, seed=0, val=200, test=200):
    return data.load_dataset({"kind": "synthetic", "classes": classes, "samples": samples, "size": size,
                              "separation": separation, "val": val, "test": test}, seed=seed)
