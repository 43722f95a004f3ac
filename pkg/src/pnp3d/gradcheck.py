"""Central finite-difference checks of the analytic backward pass."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import COMBINE_RULES, POOLING, REGULARIZATION, PnpConfig, PnpParams, neighbors_for, pnp3d_backward, pnp3d_forward
from .numerics import Tape

STEP = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(1, max|n|)."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(numeric)))))


def variant_grid(base: PnpConfig) -> list[PnpConfig]:
    """All combine rules x regularization ops x pooling modes (36 configurations)."""
    return [
        base.with_(combine=c, regularization=r, pooling=p)
        for c, r, p in itertools.product(COMBINE_RULES, REGULARIZATION, POOLING)
    ]


def variant_name(cfg: PnpConfig) -> str:
    return f"{cfg.pooling}/{cfg.regularization}/{cfg.combine}"


@dataclass
class BlockCheck:
    config: PnpConfig
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def finite(self) -> bool:
        return all(np.isfinite(v) for v in self.errors.values())


def _random_bn_stats(params: PnpParams, rng: np.random.Generator) -> None:
    for p in (params.theta, params.phi, params.psi):
        c = p.bn.channels
        p.bn.gamma = rng.uniform(0.5, 1.5, c)
        p.bn.beta = rng.uniform(-0.5, 0.5, c)
        p.bn.running_mean = rng.uniform(-0.5, 0.5, c)
        p.bn.running_var = rng.uniform(0.5, 2.0, c)


def check_block(config: PnpConfig, n: int = 12, seed: int = 0, training: bool = False,
                h: float = STEP) -> BlockCheck:
    """Compare analytic gradients of <R, block(P, F)> against central differences.

    In training mode the running statistics drift during probing; they are
    irrelevant to the output, so the check is still exact.
    """
    rng = np.random.default_rng(seed)
    params = PnpParams.init(config, rng)
    _random_bn_stats(params, rng)
    params.set_training(training)
    coords = rng.uniform(-1, 1, size=(n, 3))
    feats = rng.uniform(-2, 2, size=(n, config.channels))
    probe = rng.normal(size=(n, config.channels))
    idx = neighbors_for(coords, config)

    tape = Tape()
    pnp3d_forward(coords, feats, params, config, tape=tape, idx=idx)
    analytic = pnp3d_backward(tape, probe)

    def loss() -> float:
        return float(np.sum(probe * pnp3d_forward(coords, feats, params, config, idx=idx)))

    errors = {"features": rel_error(analytic["features"], numeric_grad(loss, feats, h))}
    for name, tensor in params.trainable().items():
        errors[name] = rel_error(analytic[name], numeric_grad(loss, tensor, h))
    return BlockCheck(config, errors)


def run_suite(base: PnpConfig, n: int = 12, seed: int = 0, training: bool = False) -> list[BlockCheck]:
    return [check_block(cfg, n, seed, training) for cfg in variant_grid(base)]
