"""JSON experiment configuration, validated in full before anything runs."""

import json
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator

from .bench import DEFAULT_FAR_LEVELS, PopulationSpec
from .margin import MarginConfig
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Strict):
    lr: PositiveFloat = 0.1
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    batch_size: PositiveInt = 128
    epochs: int = Field(20, ge=0)
    lr_decay_epochs: List[int] = []
    lr_decay_factor: PositiveFloat = 10.0
    temp: PositiveFloat = 0.5
    aggregate: Literal["mean-ce", "log-is"] = "log-is"
    embedding_dim: PositiveInt = 32
    clamp_eps: Optional[PositiveFloat] = None
    top_k: PositiveInt = 10


class MarginSection(_Strict):
    kind: Literal["additive-angular", "additive-cosine"] = "additive-angular"
    s: PositiveFloat = 64.0
    m: Optional[float] = None


class PopulationSection(_Strict):
    name: str
    class_count: PositiveInt
    samples_per_class: PositiveInt
    class_center_spread: PositiveFloat
    within_class_noise: float = Field(ge=0.0)
    shift: Union[float, List[float]] = 0.0
    n_inputs: Optional[PositiveInt] = None
    signal_dims: Optional[PositiveInt] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _dimension_known(self):
        if isinstance(self.shift, list):
            if not self.shift:
                raise ValueError("shift list must be nonempty")
            if self.n_inputs is not None and self.n_inputs != len(self.shift):
                raise ValueError("n_inputs disagrees with the length of shift")
        elif self.n_inputs is None:
            raise ValueError("a scalar shift needs n_inputs")
        return self

    def to_spec(self, seed):
        shift = self.shift if isinstance(self.shift, list) else [self.shift] * self.n_inputs
        return PopulationSpec(
            self.name,
            self.class_count,
            self.samples_per_class,
            self.class_center_spread,
            self.within_class_noise,
            shift,
            seed=seed if self.seed is None else self.seed,
            signal_dims=self.signal_dims,
        )


class PairSection(_Strict):
    positives_per_class: Optional[PositiveInt] = None
    n_positive: PositiveInt = 600
    negatives_total: PositiveInt = 600
    far_levels: List[float] = list(DEFAULT_FAR_LEVELS)
    hard_k: PositiveInt = 10

    @field_validator("far_levels")
    @classmethod
    def _levels_in_range(cls, v):
        if not v or any(not 0.0 < f < 1.0 for f in v):
            raise ValueError("FAR levels must be a nonempty list of values in (0, 1)")
        return v


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: str = "out"
    train_population: str
    populations: List[PopulationSection]
    train: TrainSection = TrainSection()
    margin: MarginSection = MarginSection()
    pairs: PairSection = PairSection()

    @model_validator(mode="after")
    def _consistent(self):
        names = [p.name for p in self.populations]
        if len(set(names)) != len(names):
            raise ValueError("population names must be unique")
        if self.train_population not in names:
            raise ValueError(f"train_population {self.train_population!r} is not among the populations")
        dims = {p.n_inputs or len(p.shift) for p in self.populations}
        if len(dims) != 1:
            raise ValueError("all populations must share one input dimension")
        # dataclass-level checks (e.g. margin range, signal_dims) surface here too
        self.margin_config()
        self.population_specs()
        return self

    def population_specs(self):
        """Specs in listed order; populations without an explicit seed derive one from the global seed."""
        out = []
        for i, p in enumerate(self.populations):
            derived = int(np.random.SeedSequence([self.seed, i]).generate_state(1)[0])
            out.append(p.to_spec(derived))
        return out

    def train_spec(self):
        return next(s for s in self.population_specs() if s.name == self.train_population)

    def train_config(self):
        t = self.train
        return TrainConfig(
            lr=t.lr,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            epochs=t.epochs,
            lr_decay_epochs=tuple(t.lr_decay_epochs),
            lr_decay_factor=t.lr_decay_factor,
            temp=t.temp,
            aggregate=t.aggregate,
            seed=self.seed,
            embedding_dim=t.embedding_dim,
            clamp_eps=t.clamp_eps,
            top_k=t.top_k,
        )

    def margin_config(self):
        return MarginConfig(self.margin.kind, self.margin.s, self.margin.m)


def load_config(path, seed=None, out_dir=None):
    """Parse and validate a config file; command-line ``seed``/``out_dir`` override the file."""
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        if seed is not None:
            raw["seed"] = seed
        if out_dir is not None:
            raw["out_dir"] = out_dir
    return ExperimentConfig.model_validate(raw)
