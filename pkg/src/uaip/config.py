"""Experiment configuration: validated JSON in, runnable objects out.

Every model forbids unknown keys, so a typo in a config file fails loudly
with the offending key named instead of being silently ignored.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import concepts, data
from .errors import ConfigError
from .pursuit import PursuitTrainConfig

VARIANTS = ("vip", "uav_entropy", "uav_mc", "uav_oracle", "cbm")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FeatureNoiseModel(StrictModel):
    sigma_low: float = 0.1
    sigma_high: float = 1.5
    p_high: float = 0.3


class ReliabilityRange(StrictModel):
    """Per-query reliabilities spread evenly from low to high."""

    low: float
    high: float


class SynthModel(StrictModel):
    n_classes: int = 2
    n_queries: int = 8
    n_samples: int = 1000
    class_prior: Optional[list[float]] = None  # None: uniform
    truth_table: Optional[list[list[int]]] = None  # None: alternating rows
    reliability: Union[float, list[float], ReliabilityRange] = 0.9
    noise: FeatureNoiseModel = Field(default_factory=FeatureNoiseModel)

    def to_joint_spec(self) -> data.JointSpec:
        k, m = self.n_classes, self.n_queries
        prior = (np.full(k, 1.0 / k) if self.class_prior is None
                 else np.asarray(self.class_prior, dtype=np.float64))
        if self.truth_table is None:
            # Class y answers +1/-1 in blocks of length y+1, so every class
            # gets a distinct square-wave signature over the queries.
            table = np.empty((k, m), dtype=np.int8)
            for y in range(k):
                blocks = (np.arange(m) // (y + 1)) % 2
                table[y] = np.where(blocks == 0, 1, -1)
        else:
            table = np.asarray(self.truth_table, dtype=np.int8)
        if isinstance(self.reliability, ReliabilityRange):
            rel = np.linspace(self.reliability.low, self.reliability.high, m)
        elif isinstance(self.reliability, float):
            rel = np.full(m, self.reliability)
        else:
            rel = np.asarray(self.reliability, dtype=np.float64)
        noise = data.FeatureNoise(self.noise.sigma_low, self.noise.sigma_high,
                                  self.noise.p_high)
        return data.JointSpec(n_classes=k, n_queries=m, class_prior=prior,
                              truth_table=table, reliability=rel, noise=noise)


class SplitModel(StrictModel):
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def to_spec(self, seed: int) -> data.SplitSpec:
        return data.SplitSpec(self.train, self.val, self.test, seed=seed)


class DatasetModel(StrictModel):
    source: Literal["synth", "csv"] = "synth"
    synth: Optional[SynthModel] = Field(default_factory=SynthModel)
    csv_path: Optional[str] = None
    n_classes: Optional[int] = None  # csv only; None infers from labels
    split: SplitModel = Field(default_factory=SplitModel)

    @model_validator(mode="after")
    def _check(self) -> "DatasetModel":
        if self.source == "synth" and self.synth is None:
            raise ValueError("synth source requires a synth block")
        if self.source == "csv" and not self.csv_path:
            raise ValueError("csv source requires csv_path")
        return self


class SimulatorModel(StrictModel):
    base_accuracy: float = 0.9
    ambiguity_rate: float = 0.2
    ambiguous_band: tuple[float, float] = (0.35, 0.65)
    correct_beta: tuple[float, float] = (2.0, 38.0)
    wrong_beta: tuple[float, float] = (2.0, 18.0)
    extremity_clip: float = 0.30
    mc_sigma_confident: float = 0.02
    mc_sigma_wrong: float = 0.06
    mc_sigma_ambiguous: float = 0.15
    wrong_shrink: float = 0.7
    n_passes: int = 30

    def to_params(self) -> concepts.SimulatorParams:
        return concepts.SimulatorParams(**self.model_dump())


class ConceptTrainModel(StrictModel):
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.3
    hidden: list[int] = Field(default_factory=lambda: [128, 128])
    mc_passes: int = 30

    def to_config(self, seed: int) -> concepts.ConceptTrainConfig:
        return concepts.ConceptTrainConfig(
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            dropout=self.dropout, hidden=tuple(self.hidden), seed=seed)


class AnswerSourceModel(StrictModel):
    """Where the pursuit's answers come from: the dataset's own labels, the
    stochastic simulator, a trained concept model over features, or a
    probability file produced elsewhere."""

    kind: Literal["truth", "simulator", "concept_model", "import"] = "truth"
    simulator: Optional[SimulatorModel] = None
    concept: Optional[ConceptTrainModel] = None
    import_path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "AnswerSourceModel":
        if self.kind == "import" and not self.import_path:
            raise ValueError("import answer source requires import_path")
        if self.kind == "simulator" and self.simulator is None:
            self.simulator = SimulatorModel()
        if self.kind == "concept_model" and self.concept is None:
            self.concept = ConceptTrainModel()
        return self


class CorruptionModel(StrictModel):
    """Flip a fixed number of answers per test sample, grouped by count.
    ``train_counts`` optionally corrupts training data too, each sample
    drawing its flip count uniformly from the list."""

    test_counts: list[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    train_counts: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "CorruptionModel":
        if not self.test_counts:
            raise ValueError("test_counts must not be empty")
        if any(c < 0 for c in self.test_counts + self.train_counts):
            raise ValueError("corruption counts must be non-negative")
        return self


class TrainModel(StrictModel):
    epochs: int = 200
    lr: float = 1e-4
    batch_size: Optional[int] = None
    hidden: list[int] = Field(default_factory=lambda: [128, 128])
    tau_start: float = 1.0
    tau_end: float = 0.2
    st_mode: Literal["argmax", "sample"] = "argmax"
    sequential_finetune_epochs: int = 0
    val_batch: int = 256

    def to_config(self, seed: int) -> PursuitTrainConfig:
        return PursuitTrainConfig(
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            hidden=tuple(self.hidden), tau_start=self.tau_start,
            tau_end=self.tau_end, st_mode=self.st_mode, seed=seed,
            sequential_finetune_epochs=self.sequential_finetune_epochs,
            val_batch=self.val_batch)


class UncertaintyModel(StrictModel):
    mc_passes: int = 30
    entropy_threshold: float = 0.95
    calibration_score: Literal["uncertainty", "confidence"] = "uncertainty"


class ExperimentModel(StrictModel):
    name: str = "experiment"
    seeds: list[int] = Field(default_factory=lambda: [0])
    variants: list[str] = Field(default_factory=lambda: ["vip", "uav_mc"])
    stop_threshold: float = 0.85
    budget: Optional[int] = None
    output_dir: str = "runs"
    dataset: DatasetModel = Field(default_factory=DatasetModel)
    # The default showcases the masked-vs-plain comparison, which needs a
    # probabilistic answer source; "truth" would leave uav_mc nothing to mask.
    answers: AnswerSourceModel = Field(
        default_factory=lambda: AnswerSourceModel(kind="simulator"))
    corruption: Optional[CorruptionModel] = None
    train: TrainModel = Field(default_factory=TrainModel)
    uncertainty: UncertaintyModel = Field(default_factory=UncertaintyModel)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentModel":
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.variants:
            raise ValueError("variants must not be empty")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(
                    f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if len(set(self.variants)) != len(self.variants):
            raise ValueError("variants must be distinct")
        if not 0.0 < self.stop_threshold <= 1.0:
            raise ValueError("stop_threshold must lie in (0, 1]")
        if self.corruption is not None and self.answers.kind != "truth":
            raise ValueError("corruption requires the truth answer source")
        if ("uav_oracle" in self.variants and self.corruption is None
                and self.answers.kind == "truth"):
            raise ValueError(
                "uav_oracle masks exactly the wrong answers, but the truth source "
                "without corruption never produces any; add a corruption block or "
                "switch the answer source")
        if "uav_mc" in self.variants and self.answers.kind == "truth":
            raise ValueError(
                "uav_mc needs spread-out answer probabilities; use the simulator, "
                "a concept model, or an import")
        return self


def default_config() -> ExperimentModel:
    return ExperimentModel()


def load_config(path: str | Path) -> ExperimentModel:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"config {path} is not valid JSON at offset {err.pos}: {err.msg}"
        ) from err
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentModel:
    try:
        return ExperimentModel.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(str(err)) from err


def dump_config(cfg: ExperimentModel) -> str:
    return cfg.model_dump_json(indent=2)
