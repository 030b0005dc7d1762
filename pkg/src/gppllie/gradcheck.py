"""f64 finite-difference verification of every differentiable op and of the
full noise-prediction network. Backs the ``gradcheck`` CLI command."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

OP_TOLERANCE = 1e-4
NET_TOLERANCE = 1e-3


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)


def _scalarize(op, x: Tensor, rng: np.random.Generator):
    """Wrap op into a fixed scalar-valued f: sum(op(x) * W) with W frozen."""
    with T.no_grad():
        probe = op(x)
    w = Tensor(rng.normal(size=probe.shape), dtype=np.float64)

    def f(v: Tensor) -> Tensor:
        return T.tsum(T.mul(op(v), w))

    return f


def _op_cases(rng: np.random.Generator):
    """One (name, op, x) probe per differentiable op, with fresh random shapes."""
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    b = _rand(rng, (m, k))
    b_pos = _rand(rng, (n, m), 0.5, 2.0)
    kern = _rand(rng, (2, 3, 3, 3), -0.5, 0.5)
    table = _rand(rng, (6, 4))
    idx = rng.integers(0, 6, size=3)

    return [
        ("add", lambda x: T.add(x, b), _rand(rng, (n, m, k))),
        ("sub", lambda x: T.sub(x, b), _rand(rng, (n, m, k))),
        ("mul", lambda x: T.mul(x, b), _rand(rng, (n, m, k))),
        ("div", lambda x: T.div(x, b_pos), _rand(rng, (n, m))),
        ("exp", T.exp, _rand(rng, (n, m))),
        ("tanh", T.tanh, _rand(rng, (n, m))),
        ("gelu", T.gelu, _rand(rng, (n, m))),
        ("sqrt", T.sqrt, _rand(rng, (n, m), 0.5, 2.0)),
        ("matmul", lambda x: T.matmul(x, b), _rand(rng, (n, m))),
        ("conv2d", lambda x: T.conv2d(x, kern, stride=1, pad=1), _rand(rng, (3, 5, 5))),
        ("softmax", lambda x: T.softmax(x, -1), _rand(rng, (n, m))),
        ("layer_norm_normalize", T.layer_norm_normalize, _rand(rng, (n, m))),
        ("bilinear_resize", lambda x: T.bilinear_resize(x, 5, 7), _rand(rng, (2, 3, 4))),
        ("concat", lambda x: T.concat([x, b], 0), _rand(rng, (n, k))),
        ("slice", lambda x: T.slice_axis(x, 1, 1, m), _rand(rng, (n, m))),
        ("sum", lambda x: T.tsum(x, axis=1), _rand(rng, (n, m, k))),
        ("mean", lambda x: T.mean(x, axis=-1), _rand(rng, (n, m))),
        ("variance", lambda x: T.variance(x, axis=-1), _rand(rng, (n, m))),
        ("transpose", lambda x: T.transpose(x, (1, 2, 0)), _rand(rng, (n, m, k))),
        ("reshape", lambda x: T.reshape(x, (m, n)), _rand(rng, (n, m))),
        ("broadcast_to", lambda x: T.broadcast_to(x, (k, n, m)), _rand(rng, (n, m))),
        ("l2_normalize", lambda x: T.l2_normalize(x, -1), _rand(rng, (n, m), 0.3, 1.5)),
        ("embedding_lookup", lambda x: T.embedding_lookup(x, idx), table),
    ]


def check_ops(seeds: int = 20, base_seed: int = 0) -> dict[str, float]:
    """Max finite-difference error per op over ``seeds`` randomized shapes."""
    worst: dict[str, float] = {}
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        for name, op, x in _op_cases(rng):
            err = T.finite_diff_check(_scalarize(op, x, rng), x)
            if err > worst.get(name, 0.0):
                worst[name] = err
    return worst


def check_network(seed: int = 0, max_coords_per_tensor: int = 4) -> float:
    """Finite-difference check of the full noise-prediction network in f64 at
    the small reference configuration (d=4, w=16, B=2, N=16): all coordinates
    of the latent input plus a sampled subset of every parameter tensor."""
    from .network import GppConfig, eps_forward, init_params
    from .priors import PerceptualPrior

    rng = np.random.default_rng(seed)
    cfg = GppConfig(d=4, w=16, blocks=2, heads=4, ffn_mult=2, grid=2, max_t=50)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    # zero-initialized tensors have no local curvature worth probing; nudge them
    for name, p in params.items():
        if not np.any(p.data):
            p.data = p.data + rng.normal(scale=0.05, size=p.shape)

    prior = PerceptualPrior.from_scores(
        {"contrast": 0.52, "visibility": 0.45, "sharpness": 0.55},
        np.clip(rng.uniform(0.42, 0.58, size=(3, cfg.grid, cfg.grid)), 0.42, 0.58),
        grid=cfg.grid, provider_id="gradcheck", prompt_version="none")
    z_t = Tensor(rng.normal(size=(cfg.d, 4, 4)), dtype=np.float64)
    z_ll = Tensor(rng.normal(size=(cfg.d, 4, 4)), dtype=np.float64)
    scal = Tensor(rng.normal(size=(cfg.d, 4, 4)), dtype=np.float64)
    t_step = 7

    def run(z, ps):
        out = eps_forward(z, t_step, z_ll, prior, ps, cfg)
        return T.tsum(T.mul(out, scal))

    worst = T.finite_diff_check(lambda z: run(z, params), z_t)

    for name in params:
        base = params[name]
        count = min(max_coords_per_tensor, base.size)
        coords = rng.choice(base.size, size=count, replace=False)

        def f(p: Tensor, name=name) -> Tensor:
            trial = dict(params)
            trial[name] = p
            return run(z_t, trial)

        err = T.finite_diff_check(f, base, coords=[int(c) for c in coords])
        worst = max(worst, err)
    return worst
