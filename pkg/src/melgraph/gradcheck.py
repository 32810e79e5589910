"""Finite-difference verification of every autodiff primitive and of a whole model."""

import numpy as np

from . import autodiff as ad

TOLERANCE = 1e-4
STEPS = (1e-4, 1e-5, 1e-6)


def _t(rng, *shape, positive=False):
    a = rng.standard_normal(shape)
    if positive:
        a = np.abs(a) + 0.5
    return ad.Tensor(a, requires_grad=True)


def _weighted(out, w):
    # a random linear read-out keeps every output element in play
    return ad.tsum(ad.mul(out, ad.Tensor(w)))


def primitive_cases(rng):
    """name -> (function of the inputs returning a Tensor, list of input Tensors)."""
    x, y = _t(rng, 3, 4), _t(rng, 4)
    run_mean = rng.standard_normal(3) * 0.1
    cases = {
        "add": (lambda a, b: ad.add(a, b), [x, y]),
        "sub": (lambda a, b: ad.sub(a, b), [_t(rng, 2, 3), _t(rng, 2, 1)]),
        "mul": (lambda a, b: ad.mul(a, b), [_t(rng, 3, 4), _t(rng, 3, 1)]),
        "div_scalar": (lambda a: a / 2.5, [_t(rng, 3, 4)]),
        "neg": (lambda a: -a, [_t(rng, 5)]),
        "scale": (lambda a: ad.scale(a, 0.37), [_t(rng, 2, 3)]),
        "relu": (lambda a: ad.relu(a), [_t(rng, 4, 5)]),
        "gelu": (lambda a: ad.gelu(a), [_t(rng, 4, 5)]),
        "sum": (lambda a: ad.tsum(a, axis=1, keepdims=True), [_t(rng, 3, 4)]),
        "mean": (lambda a: ad.mean(a, axis=0), [_t(rng, 3, 4)]),
        "reshape": (lambda a: ad.reshape(a, (4, 3)), [_t(rng, 3, 4)]),
        "permute": (lambda a: ad.permute(a, (2, 0, 1)), [_t(rng, 2, 3, 4)]),
        "swap_last": (lambda a: ad.swap_last(a), [_t(rng, 2, 3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=-1), [_t(rng, 2, 3), _t(rng, 2, 2)]),
        "getitem": (lambda a: ad.getitem(a, (slice(None), [0, 2, 2])), [_t(rng, 3, 4)]),
        "matmul": (lambda a, b: ad.matmul(a, b), [_t(rng, 2, 3, 4), _t(rng, 2, 4, 5)]),
        "linear": (lambda a, w, b: ad.linear(a, w, b), [_t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)]),
        "conv2d_s1": (lambda a, w, b: ad.conv2d(a, w, b, stride=1, pad=1),
                      [_t(rng, 2, 2, 6, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)]),
        "conv2d_s2": (lambda a, w: ad.conv2d(a, w, None, stride=2, pad=1),
                      [_t(rng, 2, 1, 8, 6), _t(rng, 2, 1, 3, 3)]),
        "batchnorm": (lambda a, g, b: ad.batchnorm(a, g, b, np.zeros(3), np.ones(3), training=True),
                      [_t(rng, 4, 3, 2, 2), _t(rng, 3), _t(rng, 3)]),
        "batchnorm_eval": (lambda a, g, b: ad.batchnorm(a, g, b, run_mean, np.full(3, 1.3), training=False),
                           [_t(rng, 4, 3), _t(rng, 3), _t(rng, 3)]),
        "layernorm": (lambda a, g, b: ad.layernorm(a, g, b), [_t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6)]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [_t(rng, 3, 5)]),
        "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [_t(rng, 3, 5)]),
        "adaptive_avg_pool": (lambda a: ad.adaptive_avg_pool(a), [_t(rng, 2, 3, 4, 2)]),
    }
    labels = np.array([0, 2, 1, 2])
    cases["cross_entropy"] = (lambda a: ad.cross_entropy(a, labels), [_t(rng, 4, 3)])
    nbrs = np.array([[[1, 2], [0, 3], [3, 1], [2, 0]], [[3, 2], [2, 0], [1, 0], [0, 1]]])
    cases["neighbor_max_diff"] = (lambda a: ad.neighbor_max_diff(a, nbrs), [_t(rng, 2, 4, 3)])
    return cases


def check_primitives(seed=0, steps=STEPS):
    rng = np.random.default_rng(seed)
    results = {}
    for name, (fn, inputs) in primitive_cases(rng).items():
        with ad.no_grad():
            shape = fn(*inputs).shape
        w = rng.standard_normal(shape)
        results[name] = ad.grad_check(lambda *xs, fn=fn, w=w: _weighted(fn(*xs), w), inputs, eps=steps)
    return results


def randomize(model, rng):
    """Move every parameter and buffer away from its initial value.

    Initial attention projections are tiny, which leaves query/key
    gradients near the rounding floor of a finite difference; random
    values of unit-order scale make every gradient measurable.
    """
    for name, p in model.params.items():
        if name.endswith(("gamma",)):
            p.data = rng.uniform(0.5, 1.5, p.shape)
        elif p.ndim == 1 or name == "pos_embed":
            p.data = rng.normal(0.0, 0.2, p.shape)
        else:
            fan_in = p.shape[0] if p.ndim == 2 else int(np.prod(p.shape[1:]))
            p.data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), p.shape)
    for name in model.buffers:
        shape = model.buffers[name].shape
        model.buffers[name] = rng.uniform(0.5, 1.5, shape) if name.endswith("var") else rng.normal(0, 0.1, shape)


def check_model(dim=32, depth=2, heads=4, n_classes=4, seed=0, max_coords=3, steps=STEPS):
    """Per-parameter worst relative error of the full model under cross-entropy.

    Runs in double precision and inference mode (batch norm as a fixed affine
    map; its batch-statistics path is covered by the primitive check).  KNN
    neighbour lists are computed once and then held fixed, so the checked
    function is the smooth piece the tape differentiates.
    """
    from .gtransformer import GTransformer, ModelConfig

    rng = np.random.default_rng(seed)
    cfg = ModelConfig.scaled(dim=dim, depth=depth, heads=heads, n_classes=n_classes)
    model = GTransformer(cfg, seed=seed, dtype=np.float64)
    randomize(model, rng)
    x = rng.standard_normal((1,) + cfg.input_shape)
    y = np.array([int(rng.integers(n_classes))])
    capture = {}
    with ad.no_grad():
        model.forward(x, capture=capture)
    graphs = {l: capture[f"graph{l}"] for l in range(1, depth + 1) if f"graph{l}" in capture}

    def loss(*_):
        return ad.cross_entropy(model.forward(x, graphs=graphs), y)

    return {name: ad.grad_check(loss, [p], eps=steps, max_coords=max_coords, rng=rng)
            for name, p in model.params.items()}


def run_gradcheck(dim=32, depth=2, heads=4, seed=0, max_coords=3, tolerance=TOLERANCE):
    prim = check_primitives(seed)
    model = check_model(dim, depth, heads, seed=seed, max_coords=max_coords)
    worst = max(max(prim.values()), max(model.values()))
    return {"primitives": prim, "model": model, "max_rel_error": worst,
            "tolerance": tolerance, "passed": bool(worst < tolerance),
            "config": {"dim": dim, "depth": depth, "heads": heads, "seed": seed, "max_coords": max_coords}}
