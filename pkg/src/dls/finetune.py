"""Manifest-level training drivers: pre-training, k-NN evaluation, fine-tuning, cross-validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .datasets import DatasetManifest, ManifestEntry, Split, make_split
from .encoder import Encoder, EncoderSpec
from .estimators import DLSPretrainer, FineTuneClassifier, SpectrogramTransformer, _forward_batched
from .evaluation import EvalReport, TrainingCurve, aggregate_folds, knn_report
from .npid import NpidConfig
from .spectro import load_audio

INIT_MODES = ("pretrained-dls", "from-scratch", "external-checkpoint")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    lr_schedule: str = "cosine"
    seed: int = 0
    init_mode: str = "from-scratch"
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")


class FeatureSource:
    """Spectrogram arrays for a fixed list of entries.

    Evaluation-mode (center crop) features are computed once. Training-mode
    features are recomputed per epoch with crop seed ``(seed, epoch, id)``
    only if some clip is longer than the target length; otherwise the random
    crop is a no-op and the cached array is reused.
    """

    def __init__(self, entries: Sequence[ManifestEntry], clip_length_s: float, seed: int = 0, **stft):
        self.entries = list(entries)
        self.clip_length_s = clip_length_s
        self.seed = seed
        self.stft = stft
        self._static = None
        self._needs_crop = None

    def _transformer(self, mode, seed):
        return SpectrogramTransformer(clip_length_s=self.clip_length_s, mode=mode, seed=seed, **self.stft)

    def static(self) -> np.ndarray:
        if self._static is None:
            tr = self._transformer("eval", self.seed)
            clips = [load_audio(e.path) for e in self.entries]
            self._needs_crop = any(c.duration > self.clip_length_s + 1e-9 for c in clips)
            self._static = tr.transform(clips, [e.instance_id for e in self.entries])
        return self._static

    def epoch(self, epoch: int) -> np.ndarray:
        X = self.static()
        if not self._needs_crop:
            return X
        tr = self._transformer("train", [self.seed, epoch])
        return tr.transform([e.path for e in self.entries], [e.instance_id for e in self.entries])

    def subset(self, mask: np.ndarray) -> "FeatureSource":
        sub = FeatureSource([e for e, m in zip(self.entries, mask) if m], self.clip_length_s, self.seed, **self.stft)
        if self._static is not None:
            sub._static = self._static[mask]
            sub._needs_crop = self._needs_crop
        return sub


def pretrain(
    pool: Sequence[ManifestEntry],
    encoder_spec: EncoderSpec = EncoderSpec(),
    npid: NpidConfig = NpidConfig(),
    epochs: int = 200,
    batch_size: int = 64,
    seed: int = 0,
    clip_length_s: float = 5.0,
    objective: str = "nce",
    learning_rate: float = 0.03,
    features: FeatureSource | None = None,
    epoch_callback=None,
    stft: dict | None = None,
    **optim,
) -> DLSPretrainer:
    """Instance-discrimination pre-training on ``pool``; row i is instance ``pool[i].instance_id``."""
    if not pool:
        raise ValueError("pre-training pool is empty")
    if [e.instance_id for e in pool] != list(range(len(pool))):
        raise ValueError("pool instance ids must be 0..n-1 in order")
    if npid.embedding_dim != encoder_spec.embedding_dim:
        raise ValueError("npid.embedding_dim must equal encoder embedding_dim")
    features = features or FeatureSource(pool, clip_length_s, seed, **(stft or {}))
    est = DLSPretrainer(
        architecture=encoder_spec.architecture,
        width=encoder_spec.width,
        embedding_dim=encoder_spec.embedding_dim,
        input_channels=encoder_spec.input_channels,
        objective=objective,
        temperature=npid.temperature,
        nce_k=npid.nce_k,
        bank_momentum=npid.bank_momentum,
        noise_renormalization_z=npid.noise_renormalization_z,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        seed=seed,
        **optim,
    )
    return est.fit(features.static(), epoch_provider=features.epoch, epoch_callback=epoch_callback)


def knn_on_features(
    encoder: Encoder, X: np.ndarray, labels, folds, held_fold: int, k: int = 5, temperature: float = 0.4,
    num_classes: int | None = None,
) -> EvalReport:
    """k-NN accuracy of fold ``held_fold`` against all other folds, given precomputed inputs."""
    labels, folds = np.asarray(labels), np.asarray(folds)
    held = folds == held_fold
    if not held.any():
        raise ValueError(f"fold {held_fold} has no entries")
    if held.all():
        raise ValueError("training side of the split is empty")
    V = _forward_batched(encoder, np.ascontiguousarray(X, dtype=np.float32))
    return knn_report(V[~held], labels[~held], V[held], labels[held], k, temperature, num_classes, held_fold)


def evaluate_embeddings(
    encoder: Encoder,
    split: Split,
    k: int = 5,
    temperature: float = 0.4,
    transformer: SpectrogramTransformer | None = None,
    num_classes: int | None = None,
) -> EvalReport:
    """Map train and eval entries (eval mode, center crop) and score eval by weighted k-NN."""
    if not split.train:
        raise ValueError("cannot evaluate: the training side of the split is empty")
    if not split.eval:
        raise ValueError("cannot evaluate: the evaluation side of the split is empty")
    tr = transformer or SpectrogramTransformer()
    tr = tr.set_params(mode="eval")
    Xtr = tr.transform([e.path for e in split.train], [e.instance_id for e in split.train])
    Xev = tr.transform([e.path for e in split.eval], [e.instance_id for e in split.eval])
    Vtr, Vev = _forward_batched(encoder, Xtr), _forward_batched(encoder, Xev)
    return knn_report(
        Vtr, [e.label for e in split.train], Vev, [e.label for e in split.eval], k, temperature, num_classes,
        split.held_fold,
    )


def _resolve_init(cfg: FinetuneConfig, checkpoint):
    if cfg.init_mode == "from-scratch":
        if checkpoint is not None:
            raise ValueError("init_mode 'from-scratch' does not take a checkpoint")
        return None
    if checkpoint is None:
        raise ValueError(f"init_mode {cfg.init_mode!r} requires a checkpoint")
    if isinstance(checkpoint, (str, os.PathLike)):
        if not os.path.isfile(checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        return checkpoint.encoder()
    return checkpoint


def finetune(
    checkpoint,
    manifest: DatasetManifest,
    held_fold: int,
    cfg: FinetuneConfig = FinetuneConfig(),
    encoder_spec: EncoderSpec = EncoderSpec(),
    features: FeatureSource | None = None,
    stft: dict | None = None,
    verbose: bool = False,
) -> tuple[FineTuneClassifier, TrainingCurve]:
    """Fine-tune on all folds but ``held_fold``; record held-fold accuracy per epoch.

    ``checkpoint`` is a path, a ``Checkpoint`` or an ``Encoder`` for the
    pre-trained modes and must be ``None`` for ``from-scratch``.
    ``features`` (covering every manifest entry, in order) skips audio decoding.
    """
    init = _resolve_init(cfg, checkpoint)
    make_split(manifest, held_fold)  # validates held_fold
    features = features or FeatureSource(manifest.entries, manifest.clip_length_s, cfg.seed, **(stft or {}))
    folds, labels = manifest.folds, manifest.labels
    train, held = folds != held_fold, folds == held_fold
    X = features.static()
    train_src = features.subset(train)
    spec = init.spec if init is not None else encoder_spec
    clf = FineTuneClassifier(
        init_encoder=init,
        architecture=spec.architecture,
        width=spec.width,
        embedding_dim=spec.embedding_dim,
        input_channels=spec.input_channels,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        lr_schedule=cfg.lr_schedule,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        seed=cfg.seed,
        verbose=verbose,
    )
    clf.fit(
        X[train],
        labels[train],
        eval_set=(X[held], labels[held]),
        num_classes=manifest.num_classes,
        epoch_provider=train_src.epoch,
    )
    return clf, clf.curve_


@dataclass
class CrossValResult:
    curves: dict[int, TrainingCurve] = field(default_factory=dict)
    epochs: list[int] = field(default_factory=list)
    mean_accuracy: np.ndarray | None = None
    std_accuracy: np.ndarray | None = None


def cross_validate(
    manifest: DatasetManifest,
    cfg: FinetuneConfig = FinetuneConfig(),
    checkpoint=None,
    encoder_spec: EncoderSpec = EncoderSpec(),
    folds: Sequence[int] | None = None,
    features: FeatureSource | None = None,
    stft: dict | None = None,
    verbose: bool = False,
) -> CrossValResult:
    """Fine-tune once per held fold; report per-epoch mean and std of held-fold accuracy."""
    if manifest.fold_scheme < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if isinstance(checkpoint, (str, os.PathLike)) and cfg.init_mode != "from-scratch":
        if not os.path.isfile(checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        checkpoint = load_checkpoint(checkpoint)
    features = features or FeatureSource(manifest.entries, manifest.clip_length_s, cfg.seed, **(stft or {}))
    result = CrossValResult()
    for fold in folds or range(1, manifest.fold_scheme + 1):
        _, curve = finetune(checkpoint, manifest, fold, cfg, encoder_spec, features, verbose=verbose)
        result.curves[fold] = curve
    result.epochs = next(iter(result.curves.values())).epochs
    result.mean_accuracy, result.std_accuracy = aggregate_folds([c.accuracies for c in result.curves.values()])
    return result
