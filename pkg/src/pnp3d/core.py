"""The PnP-3D feature refinement block.

Local context fusion encodes two neighbourhood graphs (coordinates and
features) with shared MLPs and max-pools them over the neighbours.  Global
bilinear regularisation squeezes the fused map into a point-wise and a
channel-wise descriptor, combines them into a low-rank response, restores the
channel dimension and uses the result to regularise the fused map.

All functions accept an optional leading batch axis: coordinates ``[B, N, 3]``,
features ``[B, N, C]`` and neighbour tables ``[B, N, k]``.  Global pooling is
always per cloud.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .numerics import MLPParams, MLPVars, Tape, Var, const, flop_stage, tally
from .spatial import IntegrityError, NeighborIndex, PointCloud, edge_graph, find_neighbors

POOLING = ("max", "avg")
REGULARIZATION = ("product", "sum", "subtract")
COMBINE_RULES = ("sum", "product", "grand_mean", "quadratic_mean", "harmonic_mean", "geometric_mean")
EPS = 1e-12


class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class PnpConfig:
    channels: int = 64
    neighbors: int = 16
    reduction: int = 8
    pooling: str = "avg"
    regularization: str = "subtract"
    combine: str = "geometric_mean"
    neighbor_mode: str = "knn"
    radius: float | None = None
    half_k: bool = False
    psi_activation: str = "relu"

    def __post_init__(self):
        c, r = self.channels, self.reduction
        if c < 2 or c % 2:
            raise ConfigError(f"channels must be even, got {c}")
        if r < 2:
            raise ConfigError(f"reduction factor must be >= 2, got {r}")
        if c % r:
            raise ConfigError(f"reduction factor {r} must divide channels {c}")
        if self.neighbors < 1:
            raise ConfigError(f"neighbors must be >= 1, got {self.neighbors}")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        if self.regularization not in REGULARIZATION:
            raise ConfigError(f"regularization must be one of {REGULARIZATION}, got {self.regularization!r}")
        if self.combine not in COMBINE_RULES:
            raise ConfigError(f"combine must be one of {COMBINE_RULES}, got {self.combine!r}")
        if self.neighbor_mode not in ("knn", "ball"):
            raise ConfigError(f"neighbor_mode must be knn or ball, got {self.neighbor_mode!r}")
        if self.neighbor_mode == "ball" and (self.radius is None or self.radius <= 0):
            raise ConfigError("ball neighbour mode needs a positive radius")
        if self.psi_activation not in ("relu", "none"):
            raise ConfigError(f"psi_activation must be relu or none, got {self.psi_activation!r}")

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction

    @property
    def half(self) -> int:
        return self.channels // 2

    @property
    def effective_k(self) -> int:
        return max(1, self.neighbors // 2) if self.half_k else self.neighbors

    def with_(self, **kw) -> PnpConfig:
        return replace(self, **kw)


@dataclass
class PnpVars:
    theta: MLPVars
    phi: MLPVars
    w_c: Var
    w_p: Var
    psi: MLPVars


@dataclass
class PnpParams:
    theta: MLPParams
    phi: MLPParams
    w_c: np.ndarray
    w_p: np.ndarray
    psi: MLPParams

    @classmethod
    def init(cls, config: PnpConfig, rng: np.random.Generator | int = 0) -> PnpParams:
        rng = np.random.default_rng(rng)
        c, m, h = config.channels, config.reduced, config.half
        return cls(
            theta=MLPParams.init(6, h, rng),
            phi=MLPParams.init(2 * c, h, rng),
            w_c=rng.normal(0.0, np.sqrt(1.0 / c), size=(c, m)),
            w_p=rng.normal(0.0, np.sqrt(1.0 / c), size=(c, m)),
            psi=MLPParams.init(m, c, rng, activation=config.psi_activation),
        )

    def check(self, config: PnpConfig) -> None:
        c, m, h = config.channels, config.reduced, config.half
        expected = {
            "theta.weight": (6, h), "phi.weight": (2 * c, h),
            "w_c": (c, m), "w_p": (c, m), "psi.weight": (m, c),
        }
        for name, shape in expected.items():
            got = self.trainable()[name].shape
            if got != shape:
                raise ConfigError(f"{name} has shape {got}, config expects {shape}")

    def _mlps(self):
        return {"theta": self.theta, "phi": self.phi, "psi": self.psi}

    def trainable(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self._mlps().items():
            out[f"{name}.weight"] = p.weight
            out[f"{name}.gamma"] = p.bn.gamma
            out[f"{name}.beta"] = p.bn.beta
            if name == "phi":
                out["w_c"] = self.w_c
                out["w_p"] = self.w_p
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors plus batch-norm running statistics."""
        out = self.trainable()
        for name, p in self._mlps().items():
            out[f"{name}.running_mean"] = p.bn.running_mean
            out[f"{name}.running_var"] = p.bn.running_var
        return out

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self._mlps().items():
            p.weight = np.array(tensors[f"{name}.weight"], dtype=np.float64)
            for stat in ("gamma", "beta", "running_mean", "running_var"):
                setattr(p.bn, stat, np.array(tensors[f"{name}.{stat}"], dtype=np.float64))
        self.w_c = np.array(tensors["w_c"], dtype=np.float64)
        self.w_p = np.array(tensors["w_p"], dtype=np.float64)

    def update(self, name: str, value: np.ndarray) -> None:
        if name in ("w_c", "w_p"):
            setattr(self, name, value)
            return
        mlp, attr = name.split(".")
        p = self._mlps()[mlp]
        if attr == "weight":
            p.weight = value
        else:
            setattr(p.bn, attr, value)

    def set_training(self, training: bool) -> None:
        for p in self._mlps().values():
            p.bn.training = training

    def leaves(self, tape: Tape, prefix: str = "") -> PnpVars:
        return PnpVars(
            nx.mlp_leaves(tape, f"{prefix}theta", self.theta),
            nx.mlp_leaves(tape, f"{prefix}phi", self.phi),
            tape.leaf(f"{prefix}w_c", self.w_c),
            tape.leaf(f"{prefix}w_p", self.w_p),
            nx.mlp_leaves(tape, f"{prefix}psi", self.psi),
        )

    def consts(self) -> PnpVars:
        return PnpVars(
            nx.mlp_consts(self.theta), nx.mlp_consts(self.phi),
            Var(self.w_c), Var(self.w_p), nx.mlp_consts(self.psi),
        )


# ---------------------------------------------------------------------------
# block stages


def _coords_of(cloud) -> np.ndarray:
    return cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _table(idx) -> np.ndarray:
    return idx.indices if isinstance(idx, NeighborIndex) else np.asarray(idx)


def local_context_fusion(cloud, features, idx, params: PnpParams, pv: PnpVars | None = None) -> Var:
    """Concatenate max-pooled geometric context (first C/2 columns) and feature context."""
    coords, features, table = _coords_of(cloud), const(features), _table(idx)
    c = features.shape[-1]
    if c % 2:
        raise ConfigError(f"feature channels must be even, got {c}")
    if coords.shape[:-1] != features.shape[:-1]:
        raise IntegrityError(f"cloud has {coords.shape[:-1]} points but features have {features.shape[:-1]}")
    pv = pv or params.consts()
    with flop_stage("geometric_graph"):
        geo = edge_graph(Var(coords), table)
    with flop_stage("geometric_mlp"):
        geo = nx.apply_mlp(geo, params.theta, pv.theta)
    with flop_stage("geometric_pool"):
        geo = nx.pool(geo, axis=-2, mode="max")
    with flop_stage("feature_graph"):
        feat = edge_graph(features, table)
    with flop_stage("feature_mlp"):
        feat = nx.apply_mlp(feat, params.phi, pv.phi)
    with flop_stage("feature_pool"):
        feat = nx.pool(feat, axis=-2, mode="max")
    return nx.concat([geo, feat], axis=-1)


def global_descriptor(f_l, w, reduce_axis: str = "points", mode: str = "avg") -> tuple[Var, Var]:
    """Pool ReLU(f_l @ w) over points (channel-wise g_c) or channels (point-wise g_p).

    The second result is the raw projection f_l @ w, used as a shortcut term.
    """
    f_l, w = const(f_l), const(w)
    if f_l.shape[-1] % w.shape[-1]:
        raise ConfigError(f"reduced width {w.shape[-1]} must divide channels {f_l.shape[-1]}")
    axis = {"points": -2, "channels": -1}.get(reduce_axis)
    if axis is None:
        raise ValueError(f"reduce_axis must be 'points' or 'channels', got {reduce_axis!r}")
    with flop_stage("projection"):
        projected = nx.matmul(f_l, w)
        act = nx.relu(projected)
    with flop_stage("descriptor"):
        desc = nx.pool(act, axis=axis, mode=mode)
    return desc, projected


def _combine_values(lam: np.ndarray, mu: np.ndarray, rule: str) -> np.ndarray:
    if rule == "sum":
        return lam + mu
    if rule == "product":
        return lam * mu
    if rule == "grand_mean":
        return (lam + mu) / 2
    if rule == "quadratic_mean":
        return np.sqrt(lam * lam + mu * mu)
    if rule == "harmonic_mean":
        # scaling lam by a ratio that rounds to <= 1 keeps HM <= GM when lam == mu
        return lam * (2 * mu / (lam + mu + EPS))
    if rule == "geometric_mean":
        return np.sqrt(lam * mu)
    raise ConfigError(f"unknown combine rule {rule!r}")


def _combine_partials(lam, mu, eta, rule):
    """d eta / d lambda and d eta / d mu, broadcast to eta's shape."""
    one = np.ones_like(eta)
    if rule == "sum":
        return one, one
    if rule == "product":
        return mu * one, lam * one
    if rule == "grand_mean":
        return one / 2, one / 2
    if rule == "quadratic_mean":
        safe = np.where(eta > 0, eta, 1.0)
        return np.where(eta > 0, lam / safe, 0.0), np.where(eta > 0, mu / safe, 0.0)
    if rule == "harmonic_mean":
        den = lam + mu + EPS
        return 2 * mu * (mu + EPS) / den**2, 2 * lam * (lam + EPS) / den**2
    # geometric mean: subgradient 0 where the response vanishes
    pos = eta > 0
    half = np.where(pos, 1.0 / (2 * eta + EPS), 0.0)
    return np.where(pos, mu * half, 0.0), np.where(pos, lam * half, 0.0)


def bilinear_response(g_p, g_c, rule: str = "geometric_mean") -> Var:
    """Combine point responses g_p[..., N] with channel responses g_c[..., m] into [..., N, m]."""
    g_p, g_c = const(g_p), const(g_c)
    if rule not in COMBINE_RULES:
        raise ConfigError(f"unknown combine rule {rule!r}")
    if rule in ("geometric_mean", "harmonic_mean") and (np.any(g_p.value < 0) or np.any(g_c.value < 0)):
        raise DomainError(f"{rule} needs non-negative descriptors")
    lam = g_p.value[..., :, None]
    mu = g_c.value[..., None, :]
    eta = _combine_values(lam, mu, rule)
    with flop_stage("bilinear"):
        tally(eta.size)

    def backward(g):
        d_lam, d_mu = _combine_partials(lam, mu, eta, rule)
        return (g * d_lam).sum(-1), (g * d_mu).sum(-2)

    return nx._emit(eta, (g_p, g_c), backward)


def global_perception(g, proj_c, proj_p, params: PnpParams, pv: PnpVars | None = None) -> Var:
    """Restore channels: MLP_psi(g + proj_c + proj_p)."""
    g, proj_c, proj_p = const(g), const(proj_c), const(proj_p)
    if not (g.shape == proj_c.shape == proj_p.shape):
        raise nx.ShapeError(f"global_perception: shapes {g.shape}, {proj_c.shape}, {proj_p.shape} differ")
    psi = pv.psi if pv is not None else nx.mlp_consts(params.psi)
    with flop_stage("shortcut"):
        s = nx.add(nx.add(g, proj_c), proj_p)
    with flop_stage("psi_mlp"):
        return nx.apply_mlp(s, params.psi, psi)


def regularize(f_l: Var, f_g: Var, op: str) -> Var:
    with flop_stage("regularize"):
        if op == "subtract":
            h = nx.sub(f_l, f_g)
        elif op == "sum":
            h = nx.add(f_l, f_g)
        elif op == "product":
            h = nx.mul(f_l, f_g)
        else:
            raise ConfigError(f"unknown regularization op {op!r}")
        return nx.mish(h)


def neighbors_for(coords: np.ndarray, config: PnpConfig) -> np.ndarray:
    """Neighbour table for one cloud [N, 3] or a batch [B, N, 3]."""
    k = config.effective_k
    if coords.ndim == 2:
        return find_neighbors(coords, k, config.neighbor_mode, config.radius).indices
    return np.stack([find_neighbors(c, k, config.neighbor_mode, config.radius).indices for c in coords])


def pnp3d_block(coords, features, params: PnpParams, config: PnpConfig,
                pv: PnpVars | None = None, idx=None) -> Var:
    """Var-level block, for embedding into larger taped models."""
    coords = _coords_of(coords)
    features = const(features)
    if features.shape[-1] != config.channels:
        raise ConfigError(f"features have {features.shape[-1]} channels, config expects {config.channels}")
    table = neighbors_for(coords, config) if idx is None else _table(idx)
    pv = pv or params.consts()
    f_l = local_context_fusion(coords, features, table, params, pv)
    g_c, proj_c = global_descriptor(f_l, pv.w_c, "points", config.pooling)
    g_p, proj_p = global_descriptor(f_l, pv.w_p, "channels", config.pooling)
    g = bilinear_response(g_p, g_c, config.combine)
    f_g = global_perception(g, proj_c, proj_p, params, pv)
    return regularize(f_l, f_g, config.regularization)


def pnp3d_forward(cloud, features, params: PnpParams, config: PnpConfig,
                  tape: Tape | None = None, idx=None) -> np.ndarray:
    """Refine an [N, C] feature map; the output has the input's shape.

    With a tape, the input features are registered as leaf ``"features"`` and
    the parameters under their :meth:`PnpParams.trainable` names, ready for
    :func:`pnp3d_backward`.
    """
    params.check(config)
    if tape is not None:
        feats = tape.leaf("features", features)
        pv = params.leaves(tape)
    else:
        feats, pv = Var(features), params.consts()
    out = pnp3d_block(cloud, feats, params, config, pv, idx)
    if tape is not None:
        tape.set_output(out)
    return out.value


def pnp3d_backward(tape: Tape, d_out) -> dict[str, np.ndarray]:
    """Gradients of <d_out, output> for the features and every parameter leaf."""
    return tape.backward(d_out)


# ---------------------------------------------------------------------------
# complexity accounting


def count_params(config: PnpConfig) -> dict[str, int]:
    """Learnable scalars per tensor (batch-norm running statistics excluded)."""
    c, m, h = config.channels, config.reduced, config.half
    counts = {
        "theta.weight": 6 * h, "theta.gamma": h, "theta.beta": h,
        "phi.weight": 2 * c * h, "phi.gamma": h, "phi.beta": h,
        "w_c": c * m, "w_p": c * m,
        "psi.weight": m * c, "psi.gamma": c, "psi.beta": c,
    }
    counts["total"] = sum(counts.values())
    return counts


def enumerate_params(params: PnpParams) -> dict[str, int]:
    counts = {name: int(t.size) for name, t in params.trainable().items()}
    counts["total"] = sum(counts.values())
    return counts


STAGES = (
    "geometric_graph", "geometric_mlp", "geometric_pool",
    "feature_graph", "feature_mlp", "feature_pool",
    "projection", "descriptor", "bilinear", "shortcut", "psi_mlp", "regularize",
)


def count_flops(config: PnpConfig, n: int) -> dict:
    """Analytic multiply-accumulate and elementwise operation counts for N points.

    Neighbour search is not included: it is shared with the host network.
    """
    c, m, h, k = config.channels, config.reduced, config.half, config.effective_k
    psi_act = n * c if config.psi_activation == "relu" else 0
    stages = {
        "geometric_graph": (0, n * k * 3),
        "geometric_mlp": (n * k * 6 * h, 2 * n * k * h),
        "geometric_pool": (0, n * k * h),
        "feature_graph": (0, n * k * c),
        "feature_mlp": (n * k * 2 * c * h, 2 * n * k * h),
        "feature_pool": (0, n * k * h),
        "projection": (2 * n * c * m, 2 * n * m),
        "descriptor": (0, 2 * n * m),
        "bilinear": (0, n * m),
        "shortcut": (0, 2 * n * m),
        "psi_mlp": (n * m * c, n * c + psi_act),
        "regularize": (0, 2 * n * c),
    }
    return _flop_report({s: {"mac": a, "elementwise": b} for s, (a, b) in stages.items()})


def _flop_report(stages: dict[str, dict[str, int]]) -> dict:
    stages = {s: dict(stages.get(s, {"mac": 0, "elementwise": 0})) for s in STAGES}
    mac = sum(v["mac"] for v in stages.values())
    ew = sum(v["elementwise"] for v in stages.values())
    return {"stages": stages, "mac": mac, "elementwise": ew, "total": mac + ew}


def instrumented_flops(config: PnpConfig, n: int, seed: int = 0) -> dict:
    """Count operations by running a forward pass through the counting primitives."""
    rng = np.random.default_rng(seed)
    params = PnpParams.init(config, rng)
    coords = rng.uniform(-1, 1, size=(n, 3))
    feats = rng.normal(size=(n, config.channels))
    table = neighbors_for(coords, config)
    with nx.flop_counter() as counts:
        pnp3d_block(coords, feats, params, config, idx=table)
    unknown = set(counts) - set(STAGES)
    if unknown:
        raise RuntimeError(f"operations counted outside known stages: {sorted(unknown)}")
    return _flop_report(counts)
