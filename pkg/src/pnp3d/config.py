"""Strict JSON run configuration shared by every CLI command."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .classifier import ClassifierConfig
from .core import PnpConfig
from .data import SHAPES, SynthDataset


class ConfigParseError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PnpSection(_Strict):
    channels: Optional[int] = None  # defaults to model.lift_dim
    neighbors: int = Field(8, ge=1)
    reduction: int = Field(8, ge=2)
    pooling: Literal["max", "avg"] = "avg"
    regularization: Literal["product", "sum", "subtract"] = "subtract"
    combine: Literal["sum", "product", "grand_mean", "quadratic_mean", "harmonic_mean",
                     "geometric_mean"] = "geometric_mean"
    neighbor_mode: Literal["knn", "ball"] = "knn"
    radius: Optional[float] = None
    half_k: bool = False
    psi_activation: Literal["relu", "none"] = "relu"


class ModelSection(_Strict):
    lift_dim: int = Field(16, ge=2)
    use_pnp: bool = True
    lr: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(6, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0


class DataSection(_Strict):
    classes: list[Literal[SHAPES]] = list(SHAPES)
    n_points: int = Field(512, ge=16)
    noise_sigma: float = Field(0.02, ge=0)
    seed: int = 0
    train_per_class: int = Field(200, ge=1)
    test_per_class: int = Field(100, ge=0)
    rotate: bool = True


class GradcheckSection(_Strict):
    n: int = Field(12, ge=2)
    channels: int = 8
    neighbors: int = 4
    reduction: int = 2
    seed: int = 0
    tolerance: float = 1e-5
    training_check: bool = True


class AblateSection(_Strict):
    seeds: int = Field(5, ge=1)


class BenchSection(_Strict):
    n: int = Field(1024, ge=1)
    repeats: int = Field(3, ge=1)


class RunConfig(_Strict):
    pnp: PnpSection = PnpSection()
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    gradcheck: GradcheckSection = GradcheckSection()
    ablate: AblateSection = AblateSection()
    bench: BenchSection = BenchSection()
    out_dir: str = "runs"

    @model_validator(mode="after")
    def _consistent(self):
        # surface PnpConfig/ClassifierConfig validation errors at parse time
        self.classifier_config()
        return self

    def pnp_config(self) -> PnpConfig:
        d = self.pnp.model_dump()
        d["channels"] = d["channels"] or self.model.lift_dim
        return PnpConfig(**d)

    def classifier_config(self, **overrides) -> ClassifierConfig:
        m = self.model
        kw = dict(
            lift_dim=m.lift_dim, use_pnp=m.use_pnp, pnp=self.pnp_config(), classes=len(self.data.classes),
            lr=m.lr, momentum=m.momentum, epochs=m.epochs, batch_size=m.batch_size, seed=m.seed,
        )
        kw.update(overrides)
        return ClassifierConfig(**kw)

    def dataset(self) -> SynthDataset:
        d = self.data
        return SynthDataset(tuple(d.classes), d.n_points, d.noise_sigma, d.seed,
                            d.train_per_class, d.test_per_class, d.rotate)

    def gradcheck_base(self) -> PnpConfig:
        g = self.gradcheck
        return PnpConfig(channels=g.channels, neighbors=g.neighbors, reduction=g.reduction,
                         neighbor_mode=self.pnp.neighbor_mode, radius=self.pnp.radius,
                         psi_activation=self.pnp.psi_activation)

    def with_seed(self, seed: int) -> RunConfig:
        return self.model_copy(update={
            "model": self.model.model_copy(update={"seed": seed}),
            "data": self.data.model_copy(update={"seed": seed}),
        })


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigParseError("config must be a JSON object")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigParseError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
