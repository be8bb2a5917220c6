"""Finite-difference verification of every differentiable op and of the full episode loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import sample_episode, synthetic_dataset
from .model import (
    MODULATED_BLOCKS,
    FiLMGenerator,
    cosine_u,
    film_apply,
    film_generate,
    init_network,
    matching_probabilities,
)
from .tensor import RunningStats, Tensor
from .training import episode_loss

TOLERANCE = {64: 1e-4, 32: 1e-2}
DEFAULT_EPS = 1e-5
SAMPLES_PER_PARAM = 6


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<32} max rel err {self.error:.3e} (tol {self.tolerance:.0e})"


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(out * Tensor(weights.astype(out.dtype)))


def op_cases(rng: np.random.Generator, dtype) -> list[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    """(name, scalar function of x, x) triples on random tensors with extents <= 6."""

    def r(*shape, scale=1.0):
        return (rng.normal(0.0, scale, size=shape)).astype(dtype)

    def param(*shape, scale=1.0):
        return Tensor(r(*shape, scale=scale), requires_grad=True)

    cases = []

    x = param(2, 6, 6, 3)
    k = param(3, 3, 3, 4, scale=0.3)
    bias = param(4)
    w = r(2, 6, 6, 4)
    cases.append(("conv2d/input", lambda t: _weighted_sum(T.conv2d(t, k, bias), w), x))
    cases.append(("conv2d/kernels", lambda t: _weighted_sum(T.conv2d(x, t, bias), w), k))
    cases.append(("conv2d/bias", lambda t: _weighted_sum(T.conv2d(x, k, t), w), bias))

    xb = param(3, 4, 4, 5)
    gamma, beta = param(5), param(5)
    wb = r(3, 4, 4, 5)
    cases.append(("batch_norm/input", lambda t: _weighted_sum(T.batch_norm(t, gamma, beta, "batch"), wb), xb))
    cases.append(("batch_norm/gamma", lambda t: _weighted_sum(T.batch_norm(xb, t, beta, "batch"), wb), gamma))
    cases.append(("batch_norm/beta", lambda t: _weighted_sum(T.batch_norm(xb, gamma, t, "batch"), wb), beta))
    stats = RunningStats(r(5), np.abs(r(5)) + 0.5, updates=1)
    cases.append(
        ("batch_norm_eval/input", lambda t: _weighted_sum(T.batch_norm(t, gamma, beta, "eval", stats), wb), param(3, 4, 4, 5))
    )

    v = param(4, 6)
    wv = r(4, 6)
    cases.append(("relu", lambda t: _weighted_sum(T.relu(t), wv), v))
    cases.append(("softmax", lambda t: _weighted_sum(T.softmax(t), wv), param(4, 6)))
    cases.append(("abs", lambda t: _weighted_sum(T.tabs(t), wv), param(4, 6)))
    cases.append(("log/clip_min", lambda t: _weighted_sum(T.log(T.clip_min(t, 1e-12)), wv), Tensor(np.abs(r(4, 6)) + 0.5)))
    cases.append(("sqrt", lambda t: _weighted_sum(T.sqrt(t), wv), Tensor(np.abs(r(4, 6)) + 0.5)))
    denom = Tensor(np.abs(r(4, 6)) + 0.5)
    cases.append(("div", lambda t: _weighted_sum(t / denom, wv), param(4, 6)))
    w_take = r(6, 6)
    cases.append(("take", lambda t: _weighted_sum(T.take(t, [0, 2, 2, 1, 3, 0]), w_take), param(4, 6)))

    w_pool, w_trunc, w_gap = r(2, 3, 3, 3), r(2, 2, 2, 3), r(2, 3)
    cases.append(("max_pool_2x2", lambda t: _weighted_sum(T.max_pool_2x2(t), w_pool), param(2, 6, 6, 3)))
    cases.append(
        ("max_pool_2x2/truncate", lambda t: _weighted_sum(T.max_pool_2x2(t, truncate=True), w_trunc), param(2, 5, 5, 3))
    )
    cases.append(("global_avg_pool", lambda t: _weighted_sum(T.global_avg_pool(t), w_gap), param(2, 4, 4, 3)))

    a2, w_cat = param(3, 4), r(3, 6)
    cases.append(("concat_channels", lambda t: _weighted_sum(T.concat_channels(t, a2), w_cat), param(3, 2)))

    xa, wa, ba = param(3, 5), param(5, 4), param(4)
    wo = r(3, 4)
    cases.append(("affine/input", lambda t: _weighted_sum(T.affine(t, wa, ba), wo), xa))
    cases.append(("affine/weight", lambda t: _weighted_sum(T.affine(xa, t, ba), wo), wa))
    cases.append(("affine/bias", lambda t: _weighted_sum(T.affine(xa, wa, t), wo), ba))

    # FiLM pieces at C=3
    xf = param(2, 4, 4, 3)
    gz, bz, g0, b0 = param(2, 3), param(2, 3), param(3), param(3)
    wf = r(2, 4, 4, 3)
    cases.append(("film_apply/x", lambda t: _weighted_sum(film_apply(t, gz, bz, g0, b0), wf), xf))
    cases.append(("film_apply/gamma0", lambda t: _weighted_sum(film_apply(xf, gz, bz, t, b0), wf), g0))
    cases.append(("film_apply/beta_z", lambda t: _weighted_sum(film_apply(xf, gz, t, g0, b0), wf), bz))

    gen = FiLMGenerator(param(6, 6, scale=0.5), param(6), param(3), param(3))
    other = Tensor(np.abs(r(2, 4, 4, 3)))
    wg = r(2, 3)

    def gen_loss(t):
        gamma_z, beta_z = film_generate(gen, t, other)
        return _weighted_sum(gamma_z, wg) + _weighted_sum(beta_z, wg)

    cases.append(("film_generate/x_self", gen_loss, Tensor(np.abs(r(2, 4, 4, 3)) + 0.1)))

    x_gen = Tensor(np.abs(r(2, 4, 4, 3)))

    def gen_w_loss(t):
        g = FiLMGenerator(t, gen.b, gen.gamma0, gen.beta0)
        gamma_z, beta_z = film_generate(g, x_gen, other)
        return _weighted_sum(gamma_z, wg) + _weighted_sum(beta_z, wg)

    cases.append(("film_generate/W", gen_w_loss, gen.W))

    s, q = param(6), param(6)
    cases.append(("cosine_u/query", lambda t: cosine_u(t, s), param(6)))
    cases.append(("cosine_u/support", lambda t: cosine_u(q, t), param(6)))
    labels, w_match = [0, 1, 0, 2, 1], r(4, 3)
    cases.append(
        ("matching_probabilities", lambda t: _weighted_sum(matching_probabilities(t, labels, way=3), w_match), param(4, 5))
    )
    return cases


def run_op_checks(precision: int = 64, seed: int = 0, eps: float = DEFAULT_EPS) -> list[CheckResult]:
    dtype = np.float64 if precision == 64 else np.float32
    rng = np.random.default_rng(seed)
    tol = TOLERANCE[precision]
    return [
        CheckResult(f"op:{name}", T.grad_check(fn, x, eps=eps, oracle_dtype=np.float64), tol)
        for name, fn, x in op_cases(rng, dtype)
    ]


def run_model_checks(
    precision: int = 64,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
    samples: int = SAMPLES_PER_PARAM,
    resolution: int = 16,
) -> list[CheckResult]:
    """Episode loss gradients for sampled slices of every conv kernel and generator parameter.

    Post-multipliers are drawn at random instead of zero so that gradients
    reach W and b.
    """
    dtype = np.float64 if precision == 64 else np.float32
    rng = np.random.default_rng(seed)
    split = synthetic_dataset(4, 4, resolution, "separable", seed=seed)
    episode = sample_episode(split, 2, 1, 1, rng)
    net = init_network("crossmod", seed=seed, dtype=dtype)
    for gen in net.generators.values():
        gen.gamma0.data = rng.normal(0.0, 0.5, gen.channels).astype(dtype)
        gen.beta0.data = rng.normal(0.0, 0.5, gen.channels).astype(dtype)
    params = net.named_parameters()
    names = [f"block{i}.kernels" for i in range(1, 5)]
    names += [f"gen{b}.{p}" for b in MODULATED_BLOCKS for p in ("W", "b", "gamma0", "beta0")]
    tol = TOLERANCE[precision]

    def loss_fn(_):
        return episode_loss(net, episode, 0.001, bn_mode="train")

    results = []
    for name in names:
        p = params[name]
        idx = rng.choice(p.size, size=min(samples, p.size), replace=False)
        results.append(CheckResult(f"model:{name}", T.grad_check(loss_fn, p, eps=eps, indices=idx, oracle_dtype=np.float64), tol))
    return results


def run_suite(precision: int = 64, seed: int = 0, eps: float = DEFAULT_EPS) -> list[CheckResult]:
    return run_op_checks(precision, seed, eps) + run_model_checks(precision, seed, eps)
