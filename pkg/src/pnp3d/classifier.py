"""A small point-cloud classifier with an optional PnP-3D refinement block.

lift (shared MLP 3 -> C) -> [PnP-3D] -> max-pool over points -> FC C -> C/2 -> FC -> classes
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .core import PnpConfig, PnpParams, neighbors_for, pnp3d_block
from .data import Split
from .numerics import MLPParams, Tape, Var


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    lift_dim: int = 16
    use_pnp: bool = True
    pnp: PnpConfig = field(default_factory=lambda: PnpConfig(channels=16, neighbors=8, reduction=8))
    classes: int = 4
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 6
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.use_pnp and self.pnp.channels != self.lift_dim:
            raise ValueError(f"pnp.channels ({self.pnp.channels}) must equal lift_dim ({self.lift_dim})")
        if self.lift_dim % 2:
            raise ValueError("lift_dim must be even")


@dataclass
class ClassifierParams:
    lift: MLPParams
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    pnp: PnpParams | None = None

    @classmethod
    def init(cls, cfg: ClassifierConfig) -> ClassifierParams:
        rng = np.random.default_rng(cfg.seed)
        c, h = cfg.lift_dim, cfg.lift_dim // 2
        lift = MLPParams.init(3, c, rng)
        fc1_w = rng.normal(0, np.sqrt(2.0 / c), size=(c, h))
        fc2_w = rng.normal(0, np.sqrt(1.0 / h), size=(h, cfg.classes))
        # drawn last so the baseline weights are identical with or without the block
        pnp = PnpParams.init(cfg.pnp, rng) if cfg.use_pnp else None
        return cls(lift, fc1_w, np.zeros(h), fc2_w, np.zeros(cfg.classes), pnp)

    def trainable(self) -> dict[str, np.ndarray]:
        out = {
            "lift.weight": self.lift.weight, "lift.gamma": self.lift.bn.gamma, "lift.beta": self.lift.bn.beta,
            "fc1.weight": self.fc1_w, "fc1.bias": self.fc1_b,
            "fc2.weight": self.fc2_w, "fc2.bias": self.fc2_b,
        }
        if self.pnp is not None:
            out.update({f"pnp.{k}": v for k, v in self.pnp.trainable().items()})
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = self.trainable()
        out["lift.running_mean"] = self.lift.bn.running_mean
        out["lift.running_var"] = self.lift.bn.running_var
        if self.pnp is not None:
            out.update({f"pnp.{k}": v for k, v in self.pnp.named_tensors().items()})
        return out

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        expected = set(self.named_tensors())
        if set(tensors) != expected:
            missing, extra = expected - set(tensors), set(tensors) - expected
            raise KeyError(f"checkpoint tensors mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in tensors.items():
            self._set(name, np.array(value, dtype=np.float64))

    def _set(self, name: str, value: np.ndarray) -> None:
        if name.startswith("pnp."):
            self.pnp.update(name[4:], value)
        elif name.startswith("lift."):
            attr = name[5:]
            if attr == "weight":
                self.lift.weight = value
            else:
                setattr(self.lift.bn, attr, value)
        else:
            layer, attr = name.split(".")
            setattr(self, f"{layer}_{'w' if attr == 'weight' else 'b'}", value)

    def set_training(self, training: bool) -> None:
        self.lift.bn.training = training
        if self.pnp is not None:
            self.pnp.set_training(training)

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.trainable().values())


def forward_classifier(coords, cfg: ClassifierConfig, params: ClassifierParams,
                       tape: Tape | None = None, idx=None, return_features: bool = False):
    """Logits for one cloud [N, 3] (-> [classes]) or a batch [B, N, 3] (-> [B, classes])."""
    coords = np.asarray(coords, dtype=np.float64)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
        idx = None if idx is None else np.asarray(idx)[None]
    if coords.ndim != 3 or coords.shape[-1] != 3:
        raise nx.ShapeError(f"expected coordinates [B, N, 3], got {coords.shape}")

    if tape is not None:
        leaves = {name: tape.leaf(name, v) for name, v in params.trainable().items()}
    else:
        leaves = {name: Var(v) for name, v in params.trainable().items()}

    x = nx.shared_mlp(Var(coords), leaves["lift.weight"], params.lift.bn, "relu",
                      leaves["lift.gamma"], leaves["lift.beta"])
    before = x
    if cfg.use_pnp:
        pv = _pnp_vars(leaves)
        x = pnp3d_block(coords, x, params.pnp, cfg.pnp, pv, idx)
    g = nx.pool(x, axis=1, mode="max")
    h = nx.mish(nx.add(nx.matmul(g, leaves["fc1.weight"]), leaves["fc1.bias"]))
    logits = nx.add(nx.matmul(h, leaves["fc2.weight"]), leaves["fc2.bias"])
    if single:
        logits = nx.reshape(logits, (cfg.classes,))
    if tape is not None:
        tape.set_output(logits)
    if return_features:
        return logits, before, x
    return logits


def _pnp_vars(leaves):
    from .core import PnpVars
    from .numerics import MLPVars

    def mlp(name):
        return MLPVars(leaves[f"pnp.{name}.weight"], leaves[f"pnp.{name}.gamma"], leaves[f"pnp.{name}.beta"])

    return PnpVars(mlp("theta"), mlp("phi"), leaves["pnp.w_c"], leaves["pnp.w_p"], mlp("psi"))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    b = len(labels)
    loss = float(np.mean(lse - logits[np.arange(b), labels]))
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)
    n_params: int = 0

    @property
    def final_test_acc(self) -> float:
        return self.test_acc[-1] if self.test_acc else float("nan")

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


def split_neighbors(split: Split, cfg: ClassifierConfig) -> np.ndarray | None:
    """Static neighbour tables for every cloud of a split (None without the block)."""
    if not cfg.use_pnp or len(split) == 0:
        return None
    return neighbors_for(split.clouds, cfg.pnp)


def evaluate(params: ClassifierParams, cfg: ClassifierConfig, split: Split,
             idx: np.ndarray | None = None, batch: int = 16) -> tuple[float, np.ndarray]:
    """Eval-mode accuracy and confusion matrix (rows: true class)."""
    if idx is None:
        idx = split_neighbors(split, cfg)
    params.set_training(False)
    preds = []
    for s in range(0, len(split), batch):
        sl = slice(s, s + batch)
        logits = forward_classifier(split.clouds[sl], cfg, params, idx=None if idx is None else idx[sl])
        preds.append(np.argmax(logits.value, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    conf = np.zeros((cfg.classes, cfg.classes), dtype=np.int64)
    np.add.at(conf, (split.labels, pred), 1)
    acc = float(np.mean(pred == split.labels)) if len(pred) else float("nan")
    return acc, conf


def train(cfg: ClassifierConfig, train_split: Split, test_split: Split,
          params: ClassifierParams | None = None, neighbors=None,
          eval_every_epoch: bool = True) -> tuple[TrainReport, ClassifierParams]:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    ``neighbors`` optionally supplies precomputed (train, test) neighbour tables.
    With ``eval_every_epoch=False`` the test split is scored once, after the last
    epoch, and ``test_acc`` holds that single value.
    """
    if len(train_split) == 0:
        raise ValueError("training split is empty")
    params = params or ClassifierParams.init(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    if neighbors is None:
        neighbors = (split_neighbors(train_split, cfg), split_neighbors(test_split, cfg))
    train_idx, test_idx = neighbors
    velocity = {name: np.zeros_like(v) for name, v in params.trainable().items()}
    report = TrainReport(n_params=params.n_params())

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        params.set_training(True)
        order = rng.permutation(len(train_split))
        total_loss, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            tape = Tape()
            logits = forward_classifier(train_split.clouds[batch], cfg, params, tape=tape,
                                        idx=None if train_idx is None else train_idx[batch])
            labels = train_split.labels[batch]
            loss, dlogits = cross_entropy(logits.value, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
            grads = tape.backward(dlogits)
            tape.clear()
            current = params.trainable()
            for name, g in grads.items():
                v = velocity[name]
                v *= cfg.momentum
                v += g
                current[name] -= cfg.lr * v
            total_loss += loss * len(batch)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == labels))
        report.loss.append(total_loss / len(order))
        report.train_acc.append(correct / len(order))
        if eval_every_epoch or epoch == cfg.epochs - 1:
            acc, conf = evaluate(params, cfg, test_split, test_idx)
            report.test_acc.append(acc)
            report.confusion = conf.tolist()
        report.wall_time.append(time.perf_counter() - t0)
    return report, params
