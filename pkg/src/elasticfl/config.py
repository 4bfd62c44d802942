"""Declarative experiment configuration.

Configs are YAML (or JSON) documents. Unknown keys are rejected; every invalid
field is reported at once. Relative dataset paths resolve against the directory
named by ``ELASTICFL_DATA`` (default: ``./data``).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import data as fdata
from .fedcore import HyperParams, LRSchedule, ParticipationSpec, RunConfig
from .models import ModelSpec
from .numkit import stream

DATA_ENV = "ELASTICFL_DATA"
MNIST_CLASSES = 10


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class PartitionConfig(_Strict):
    scheme: Literal["iid", "classes"] = "iid"
    m: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _need_m(self):
        if self.scheme == "classes" and self.m is None:
            raise ValueError("partition scheme 'classes' requires m")
        return self


class DatasetConfig(_Strict):
    kind: Literal["idx", "synthetic", "regression"]
    images: str | None = None
    labels: str | None = None
    classes: int = Field(default=MNIST_CLASSES, ge=2)
    per_class_cap: int | None = Field(default=None, ge=1)
    clients: int = Field(default=10, ge=1)
    partition: PartitionConfig = PartitionConfig()
    test_fraction: float = Field(default=0.2, ge=0, lt=1)
    seed: int | None = None
    # synthetic / regression generators
    alpha: float = Field(default=1.0, ge=0)
    beta: float = Field(default=1.0, ge=0)
    samples_per_client: tuple[int, int] = (50, 200)
    input_dim: int = Field(default=60, ge=1)
    noise: float = Field(default=0.1, ge=0)

    @model_validator(mode="after")
    def _consistent(self):
        problems = []
        if self.kind == "idx" and (self.images is None or self.labels is None):
            problems.append("kind 'idx' requires both images and labels paths")
        if self.partition.m is not None and self.partition.m > self.classes:
            problems.append(f"partition.m={self.partition.m} exceeds the number of classes C={self.classes}")
        lo, hi = self.samples_per_client
        if not 2 <= lo <= hi:
            problems.append("samples_per_client must be [lo, hi] with 2 <= lo <= hi")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class ModelConfig(_Strict):
    kind: Literal["linear-regression", "softmax-regression", "mlp-1hidden"] = "softmax-regression"
    hidden: int = Field(default=0, ge=0)
    activation: Literal["tanh", "relu"] = "tanh"
    l2: float = Field(default=0.0, ge=0)


class LRConfig(_Strict):
    kind: Literal["constant", "inverse-time"] = "constant"
    eta0: float = Field(default=0.1, gt=0)
    gamma0: float = Field(default=10.0, gt=0)


class HPConfig(_Strict):
    T: int = Field(default=100, ge=0)
    E: int = Field(default=5, ge=1)
    B: int = Field(default=32, ge=1)
    lam: float = Field(default=0.0, ge=0, alias="lambda")
    lr: LRConfig = LRConfig()
    theta: float | None = Field(default=None, ge=1)
    q_up: float | None = Field(default=0.05, gt=0, le=1)
    q_down: float | None = Field(default=0.05, gt=0, le=1)
    algorithm: Literal["efl", "fedavg", "fedprox"] = "efl"
    mu_prox: float = Field(default=0.0, ge=0)
    coeff: Literal["static", "adaptive"] = "adaptive"
    fisher_batch: int = Field(default=64, ge=1)


class ParticipationConfig(_Strict):
    kind: Literal["full", "inactive", "incomplete", "depart", "arrive"] = "full"
    y: float = Field(default=0.0, ge=0, le=1)
    s_probs: tuple[float, ...] | None = None
    at: int = Field(default=0, ge=0)


class ExperimentConfig(_Strict):
    dataset: DatasetConfig
    model: ModelConfig = ModelConfig()
    hp: HPConfig = HPConfig()
    participation: ParticipationConfig | list[ParticipationConfig] = ParticipationConfig()
    seeds: list[int] = Field(default=[0], min_length=1)
    output_dir: str = "runs/default"
    eval_every: int = Field(default=1, ge=1)
    record_wall_time: bool = False

    @model_validator(mode="after")
    def _cross_checks(self):
        problems = []
        part = self.participation
        if isinstance(part, list) and len(part) != self.dataset.clients:
            problems.append(f"participation lists {len(part)} clients but dataset.clients={self.dataset.clients}")
        for ps in part if isinstance(part, list) else [part]:
            if ps.kind in ("depart", "arrive") and ps.at > self.hp.T:
                problems.append(f"participation.at={ps.at} exceeds hp.T={self.hp.T}")
            if ps.s_probs is not None and len(ps.s_probs) != self.hp.E:
                problems.append(f"participation.s_probs needs hp.E={self.hp.E} entries")
        if self.model.kind == "mlp-1hidden" and self.model.hidden < 1:
            problems.append("model.hidden must be >= 1 for mlp-1hidden")
        regression = self.dataset.kind == "regression"
        if regression != (self.model.kind == "linear-regression"):
            problems.append("linear-regression models go with the regression dataset and vice versa")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def echo(self) -> dict[str, Any]:
        """Plain-data dump that parses back into an identical config."""
        return self.model_dump(mode="json", by_alias=True)


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else data_root() / p


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        nxt = cur.get(k)
        if nxt is None:
            nxt = cur[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
        cur = nxt
    cur[keys[-1]] = value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        set_path(doc, key.strip(), yaml.safe_load(raw))
    return doc


def from_dict(doc: dict, check_paths: bool = True) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None
    if check_paths and cfg.dataset.kind == "idx":
        missing = [f"dataset.{k}: {resolve(v)} does not exist"
                   for k, v in (("images", cfg.dataset.images), ("labels", cfg.dataset.labels))
                   if not resolve(v).is_file()]
        if missing:
            raise ConfigError("invalid config:\n  " + "\n  ".join(missing))
    return cfg


def load_document(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def parse_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    doc = apply_overrides(load_document(path), overrides or [])
    return from_dict(doc)


# ------------------------------------------------------------------ building


def build_dataset(cfg: ExperimentConfig, seed: int) -> fdata.FederatedDataset:
    ds = cfg.dataset
    base = ds.seed if ds.seed is not None else seed
    if ds.kind == "synthetic":
        return fdata.gen_synthetic(ds.alpha, ds.beta, ds.clients, ds.samples_per_client, ds.input_dim,
                                   ds.classes, stream(base, purpose="dataset"), ds.test_fraction)
    if ds.kind == "regression":
        return fdata.gen_regression(ds.clients, ds.samples_per_client, ds.input_dim, stream(base, purpose="dataset"),
                                    heterogeneity=ds.alpha, noise=ds.noise, test_fraction=ds.test_fraction)
    source = fdata.load_idx(resolve(ds.images), resolve(ds.labels))
    if ds.per_class_cap is not None:
        source = fdata.subset_per_class(source, ds.per_class_cap, stream(base, purpose="subset"))
    s = stream(base, purpose="partition")
    if ds.partition.scheme == "iid":
        return fdata.partition_iid(source, ds.clients, s, ds.test_fraction, class_count=ds.classes)
    return fdata.partition_by_classes(source, ds.clients, ds.partition.m, s, ds.test_fraction,
                                      class_count=ds.classes)


def build_run(cfg: ExperimentConfig, seed: int, dataset: fdata.FederatedDataset | None = None) -> RunConfig:
    ds = dataset if dataset is not None else build_dataset(cfg, seed)
    m = cfg.model
    classes = 1 if m.kind == "linear-regression" else ds.class_count
    spec = ModelSpec(m.kind, ds.input_dim, classes, m.hidden, m.activation, m.l2)
    h = cfg.hp
    hp = HyperParams(
        T=h.T, E=h.E, B=h.B, lam=h.lam, lr=LRSchedule(h.lr.kind, h.lr.eta0, h.lr.gamma0), theta=h.theta,
        q_up=h.q_up, q_down=h.q_down, algorithm=h.algorithm, mu_prox=h.mu_prox, coeff=h.coeff,
        fisher_batch=h.fisher_batch,
    )

    def part(pc: ParticipationConfig) -> ParticipationSpec:
        return ParticipationSpec(pc.kind, pc.y, pc.s_probs, pc.at)

    p = cfg.participation
    participation = tuple(part(x) for x in p) if isinstance(p, list) else part(p)
    return RunConfig(spec, ds, hp, participation, seed, cfg.eval_every, record_wall_time=cfg.record_wall_time)
