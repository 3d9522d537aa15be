"""Run configuration schema.

One YAML file per run. Every key has a default and unknown keys are
rejected. Sections and keys (defaults in brackets):

``run_id`` [run]
    Label written into every metrics row and used as the condition name by
    ``report``.
``output_dir`` [runs/run]
    Directory receiving checkpoints, CSVs and the effective config.

``datasets``
    ``manifests`` [[]] manifest CSV paths (each with a ``.meta.yaml``).
    ``exclude_eval_folds`` [false] drop ``eval_folds`` from the pre-training pool.
    ``eval_folds`` [[1]] folds held out by KNN evaluation during per-dataset pre-training.
    ``toy``: ``num_classes`` [10], ``clips_per_class`` [20], ``seed`` [7].
``spectro``
    ``window_length`` [1024], ``hop_length`` [512], ``window_function`` [hann],
    ``target_sample_rate`` [44100], ``stereo`` [false] (six input channels).
``encoder``
    ``architecture`` [tiny-cnn], ``embedding_dim`` [128], ``width`` [16].
``npid``
    ``temperature`` [0.4], ``nce_k`` [64], ``bank_momentum`` [0.5],
    ``noise_renormalization_z`` [auto].
``pretrain``
    ``phase`` [combined | per-dataset], ``objective`` [nce | softmax],
    ``epochs`` [200], ``batch_size`` [64], ``learning_rate`` [0.03],
    ``lr_schedule`` [cosine], ``momentum`` [0.9], ``weight_decay`` [1e-4],
    ``seed`` [0], ``clip_length_s`` [5.0], ``knn_every`` [1] (per-dataset phase only).
``finetune``
    ``init_mode`` [from-scratch], ``checkpoint`` [null], ``epochs`` [30],
    ``batch_size`` [16], ``learning_rate`` [0.01], ``lr_schedule`` [cosine],
    ``momentum`` [0.9], ``weight_decay`` [1e-4], ``seed`` [0], ``folds`` [null = all].
``eval``
    ``checkpoint`` [null], ``k`` [5], ``temperature`` [0.4], ``folds`` [null = all].
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator

from .encoder import ARCHITECTURES
from .finetune import INIT_MODES


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ToySection(_Section):
    num_classes: int = Field(10, ge=2)
    clips_per_class: int = Field(20, ge=2)
    seed: int = 7


class DatasetsSection(_Section):
    manifests: list[str] = Field(default_factory=list)
    exclude_eval_folds: bool = False
    eval_folds: list[PositiveInt] = Field(default_factory=lambda: [1])
    toy: ToySection = Field(default_factory=ToySection)


class SpectroSection(_Section):
    window_length: PositiveInt = 1024
    hop_length: PositiveInt = 512
    window_function: Literal["hann"] = "hann"
    target_sample_rate: PositiveInt = 44100
    stereo: bool = False

    def stft_kwargs(self) -> dict:
        return self.model_dump()


class EncoderSection(_Section):
    architecture: str = "tiny-cnn"
    embedding_dim: PositiveInt = 128
    width: PositiveInt = 16

    @field_validator("architecture")
    @classmethod
    def _known(cls, v):
        if v not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {v!r}; known: {sorted(ARCHITECTURES)}")
        return v


class NpidSection(_Section):
    temperature: PositiveFloat = 0.4
    nce_k: PositiveInt = 64
    bank_momentum: float = Field(0.5, ge=0.0, le=1.0)
    noise_renormalization_z: Union[Literal["auto"], PositiveFloat] = "auto"


class _Optim(_Section):
    batch_size: PositiveInt
    learning_rate: PositiveFloat
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    seed: int = 0


class PretrainSection(_Optim):
    phase: Literal["combined", "per-dataset"] = "combined"
    objective: Literal["nce", "softmax"] = "nce"
    epochs: PositiveInt = 200
    batch_size: PositiveInt = 64
    learning_rate: PositiveFloat = 0.03
    clip_length_s: PositiveFloat = 5.0
    knn_every: PositiveInt = 1


class FinetuneSection(_Optim):
    init_mode: Literal[INIT_MODES] = "from-scratch"  # type: ignore[valid-type]
    checkpoint: Optional[str] = None
    epochs: PositiveInt = 30
    batch_size: PositiveInt = 16
    learning_rate: PositiveFloat = 0.01
    folds: Optional[list[PositiveInt]] = None


class EvalSection(_Section):
    checkpoint: Optional[str] = None
    k: PositiveInt = 5
    temperature: PositiveFloat = 0.4
    folds: Optional[list[PositiveInt]] = None


class RunConfig(_Section):
    run_id: str = Field("run", pattern=r"^[A-Za-z0-9_.\-]+$")
    output_dir: str = "runs/run"
    datasets: DatasetsSection = Field(default_factory=DatasetsSection)
    spectro: SpectroSection = Field(default_factory=SpectroSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    npid: NpidSection = Field(default_factory=NpidSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="after")
    def _contradictions(self):
        if self.finetune.init_mode == "from-scratch" and self.finetune.checkpoint is not None:
            raise ValueError("finetune.init_mode 'from-scratch' contradicts finetune.checkpoint")
        return self

    @property
    def input_channels(self) -> int:
        return 6 if self.spectro.stereo else 3


def load_config(path: str | Path | None) -> dict:
    """Raw mapping from a YAML file (empty mapping for ``None``)."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def set_dotted(data: dict, key: str, value) -> None:
    """``set_dotted(d, "finetune.epochs", 5)`` creates intermediate mappings as needed."""
    *parents, leaf = key.split(".")
    node = data
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"{key}: {p} is not a section")
    node[leaf] = value


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True), encoding="utf-8")
    return path
