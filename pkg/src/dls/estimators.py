"""scikit-learn style estimators wrapping the front end, pre-training, k-NN probing and fine-tuning.

All estimators follow the usual contract: hyperparameters are constructor
arguments stored verbatim (so ``get_params``/``set_params``/``clone`` work),
learned state lives in trailing-underscore attributes set by ``fit``.
"""

from __future__ import annotations

import math
import os
import time
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import spectro
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import Encoder, EncoderSpec, build_encoder, replace_head
from .evaluation import (
    EpochRecord,
    LabeledBank,
    TrainingCurve,
    classification_accuracy,
    knn_predict,
)
from .npid import MemoryBank, NpidConfig, estimate_z, full_softmax_loss, init_bank, nce_loss, update_bank
from .validation import batch_slices, check_embeddings, check_labels, check_spectrograms

PREDICT_BATCH = 256


def _lr_at(base: float, schedule: str, epoch: int, epochs: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    raise ValueError(f"unknown lr_schedule {schedule!r}")


def _forward_batched(model: torch.nn.Module, X: np.ndarray) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for sl in batch_slices(len(X), PREDICT_BATCH):
            out.append(model(torch.from_numpy(X[sl])).numpy())
    return np.concatenate(out, axis=0)


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Turn audio (paths or ``AudioClip`` objects) into ``[N, C, F, T]`` float32 arrays.

    Stateless: ``fit`` only validates parameters. In ``"train"`` mode, clip i
    gets its crop from seed ``(seed, ids[i])``.
    """

    def __init__(
        self,
        clip_length_s=5.0,
        window_length=1024,
        hop_length=512,
        window_function="hann",
        target_sample_rate=44100,
        mode="eval",
        seed=0,
        stereo=False,
        standardize=True,
    ):
        self.clip_length_s = clip_length_s
        self.window_length = window_length
        self.hop_length = hop_length
        self.window_function = window_function
        self.target_sample_rate = target_sample_rate
        self.mode = mode
        self.seed = seed
        self.stereo = stereo
        self.standardize = standardize

    @property
    def stft_config(self) -> spectro.StftConfig:
        return spectro.StftConfig(
            self.window_length, self.hop_length, self.window_function, self.target_sample_rate
        )

    def fit(self, X=None, y=None):
        self.stft_config_ = self.stft_config
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        return self

    def transform_one(self, clip, instance_id: int = 0) -> np.ndarray:
        if not isinstance(clip, spectro.AudioClip):
            clip = spectro.load_audio(clip)
        banded = spectro.pipeline(
            clip,
            self.stft_config,
            self.clip_length_s,
            mode=self.mode,
            seed=[*np.ravel(self.seed).tolist(), int(instance_id)],
            stereo=self.stereo,
        ).values
        if self.standardize:
            banded = spectro.standardize_spectrogram(banded)
        return banded.astype(np.float32)

    def transform(self, X: Sequence, ids: Sequence[int] | None = None) -> np.ndarray:
        if ids is None:
            ids = range(len(X))
        return np.stack([self.transform_one(x, i) for x, i in zip(X, ids)])


class DLSPretrainer(TransformerMixin, BaseEstimator):
    """Instance-discrimination pre-training of a spectrogram encoder.

    ``fit(X)`` treats row i of ``X`` as instance i. With ``objective="nce"``
    the loss is the NCE approximation with ``nce_k`` negatives; with
    ``"softmax"`` it is the exact non-parametric softmax over the whole bank.
    The bank is refreshed after every optimizer step. ``transform`` returns
    unit-norm embeddings.
    """

    def __init__(
        self,
        architecture="tiny-cnn",
        width=16,
        embedding_dim=128,
        input_channels=3,
        objective="nce",
        temperature=0.4,
        nce_k=64,
        bank_momentum=0.5,
        noise_renormalization_z="auto",
        epochs=200,
        batch_size=64,
        learning_rate=0.03,
        lr_schedule="cosine",
        momentum=0.9,
        weight_decay=1e-4,
        seed=0,
        verbose=False,
    ):
        self.architecture = architecture
        self.width = width
        self.embedding_dim = embedding_dim
        self.input_channels = input_channels
        self.objective = objective
        self.temperature = temperature
        self.nce_k = nce_k
        self.bank_momentum = bank_momentum
        self.noise_renormalization_z = noise_renormalization_z
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.verbose = verbose

    @property
    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(self.architecture, self.embedding_dim, self.input_channels, self.width)

    @property
    def npid_config(self) -> NpidConfig:
        return NpidConfig(
            self.embedding_dim, self.temperature, self.nce_k, self.bank_momentum, self.noise_renormalization_z
        )

    def _optimizer(self, params):
        return torch.optim.SGD(
            params, lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay
        )

    def fit(
        self,
        X,
        y=None,
        epoch_provider: Callable[[int], np.ndarray] | None = None,
        epoch_callback: Callable[[int, "DLSPretrainer"], None] | None = None,
        resume: Checkpoint | str | os.PathLike | None = None,
    ):
        """Train for ``epochs`` epochs.

        ``epoch_provider(epoch)`` may supply freshly augmented inputs each
        epoch (same row order as ``X``). ``resume`` continues from a
        checkpoint written by :meth:`save`, restoring weights, bank, frozen
        partition estimate and optimizer buffers.
        """
        if self.objective not in ("nce", "softmax"):
            raise ValueError(f"objective must be 'nce' or 'softmax', got {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        X = check_spectrograms(X, self.input_channels)
        n = len(X)
        cfg = self.npid_config
        if self.objective == "nce" and cfg.nce_k >= n:
            raise ValueError(f"nce_k ({cfg.nce_k}) must be smaller than the pool size ({n})")

        encoder = build_encoder(self.encoder_spec, seed=self.seed)
        bank = init_bank(n, self.embedding_dim, seed=self.seed + 1)
        opt = self._optimizer(encoder.parameters())
        self.z_ = None if cfg.noise_renormalization_z == "auto" else float(cfg.noise_renormalization_z)
        self.loss_curve_ = []
        start = 0
        if resume is not None:
            ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, self.encoder_spec)
            encoder.load_state_dict(ckpt.state_dict)
            if ckpt.bank is None or ckpt.bank.shape != (n, self.embedding_dim):
                raise ValueError("resume checkpoint has no memory bank matching this pool")
            bank = MemoryBank(ckpt.bank.clone())
            self.z_ = ckpt.metadata.get("z")
            self.loss_curve_ = list(ckpt.metadata.get("loss_curve", []))
            start = int(ckpt.metadata.get("epochs_completed", 0))
            for i, p in enumerate(opt.param_groups[0]["params"]):
                buf = ckpt.extra.get(f"momentum_buffer.{i}")
                if buf is not None:
                    opt.state[p]["momentum_buffer"] = buf.clone()

        for epoch in range(start, self.epochs):
            Xe = X if epoch_provider is None else check_spectrograms(epoch_provider(epoch), self.input_channels)
            for g in opt.param_groups:
                g["lr"] = _lr_at(self.learning_rate, self.lr_schedule, epoch, self.epochs)
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
            encoder.train()
            total = 0.0
            for step, sl in enumerate(batch_slices(n, self.batch_size)):
                ids = order[sl]
                v = encoder(torch.from_numpy(Xe[ids]))
                ids_t = torch.from_numpy(ids)
                if self.objective == "nce":
                    step_seed = [self.seed, epoch, step]
                    if self.z_ is None:
                        self.z_ = estimate_z(v, ids_t, bank, cfg, step_seed)
                    loss = nce_loss(v, ids_t, bank, cfg, step_seed, z=self.z_)
                else:
                    loss = full_softmax_loss(v, ids_t, bank, cfg.temperature)
                opt.zero_grad()
                loss.backward()
                opt.step()
                update_bank(bank, ids_t, v.detach(), cfg.bank_momentum)
                total += loss.item() * len(ids)
            self.loss_curve_.append(total / n)
            self.epochs_completed_ = epoch + 1
            if self.verbose:
                print(f"[pretrain] epoch {epoch + 1}/{self.epochs} loss {total / n:.5f}")
            if epoch_callback is not None:
                self.encoder_, self.bank_, self.optimizer_ = encoder, bank, opt
                epoch_callback(epoch + 1, self)

        self.encoder_ = encoder
        self.bank_ = bank
        self.optimizer_ = opt
        self.epochs_completed_ = max(start, self.epochs)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        X = check_spectrograms(X, self.input_channels)
        return _forward_batched(self.encoder_, X)

    def save(self, path, metadata: dict | None = None):
        """Write encoder, bank, optimizer buffers and training state to a checkpoint."""
        check_is_fitted(self, "encoder_")
        meta = {
            "z": self.z_,
            "loss_curve": self.loss_curve_,
            "epochs_completed": self.epochs_completed_,
            "objective": self.objective,
            "npid": {k: getattr(self.npid_config, k) for k in NpidConfig.__dataclass_fields__},
            "finetune_attach": "pooled-features-below-projection",
            **(metadata or {}),
        }
        extra = {}
        opt = getattr(self, "optimizer_", None)
        if opt is not None:
            for i, p in enumerate(opt.param_groups[0]["params"]):
                buf = opt.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    extra[f"momentum_buffer.{i}"] = buf
        return save_checkpoint(path, self.encoder_, "pretrain", self.bank_.vectors, meta, extra)


class KNNEmbeddingClassifier(ClassifierMixin, BaseEstimator):
    """Weighted k-NN over unit-norm embeddings (votes weighted by exp(sim / temperature))."""

    def __init__(self, k=5, temperature=0.4):
        self.k = k
        self.temperature = temperature

    def fit(self, X, y):
        X = check_embeddings(X)
        y = check_labels(y, len(X))
        if not 1 <= self.k <= len(X):
            raise ValueError(f"k must be in [1, {len(X)}], got {self.k}")
        self.bank_ = LabeledBank(X, y)
        self.classes_ = np.arange(int(y.max()) + 1)
        return self

    def predict(self, X):
        check_is_fitted(self, "bank_")
        return knn_predict(check_embeddings(X), self.bank_, self.k, self.temperature)


class FineTuneClassifier(ClassifierMixin, BaseEstimator):
    """Supervised fine-tuning of an encoder backbone with a fresh linear head.

    ``init_encoder`` selects the starting point: ``None`` trains from
    scratch (random init, no checkpoint is touched); an ``Encoder``, a
    ``Checkpoint`` or a checkpoint path starts from pre-trained weights.
    The projection layer is dropped and every layer is trained.
    """

    def __init__(
        self,
        init_encoder=None,
        architecture="tiny-cnn",
        width=16,
        embedding_dim=128,
        input_channels=3,
        epochs=5,
        batch_size=16,
        learning_rate=0.01,
        lr_schedule="cosine",
        momentum=0.9,
        weight_decay=1e-4,
        seed=0,
        verbose=False,
    ):
        self.init_encoder = init_encoder
        self.architecture = architecture
        self.width = width
        self.embedding_dim = embedding_dim
        self.input_channels = input_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.verbose = verbose

    def _initial_encoder(self) -> Encoder:
        init = self.init_encoder
        if init is None:
            spec = EncoderSpec(self.architecture, self.embedding_dim, self.input_channels, self.width)
            return build_encoder(spec, seed=self.seed)
        if isinstance(init, Encoder):
            return init
        if isinstance(init, Checkpoint):
            return init.encoder()
        return load_checkpoint(init).encoder()

    def fit(self, X, y, eval_set=None, num_classes: int | None = None, epoch_provider=None):
        """Train with cross-entropy; if ``eval_set=(X_eval, y_eval)`` is given,
        top-1 accuracy on it is recorded after every epoch in ``curve_``."""
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        X = check_spectrograms(X, self.input_channels)
        y = check_labels(y, len(X))
        num_classes = num_classes or int(y.max()) + 1
        if eval_set is not None:
            X_eval = check_spectrograms(eval_set[0], self.input_channels)
            y_eval = check_labels(eval_set[1], len(X_eval), num_classes)

        model = replace_head(self._initial_encoder(), num_classes, seed=self.seed)
        opt = torch.optim.SGD(
            model.parameters(), lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay
        )
        self.classes_ = np.arange(num_classes)
        self.curve_ = TrainingCurve()
        t0 = time.perf_counter()
        y_t = torch.from_numpy(y)
        for epoch in range(self.epochs):
            Xe = X if epoch_provider is None else check_spectrograms(epoch_provider(epoch), self.input_channels)
            for g in opt.param_groups:
                g["lr"] = _lr_at(self.learning_rate, self.lr_schedule, epoch, self.epochs)
            order = np.random.default_rng([self.seed, epoch]).permutation(len(X))
            model.train()
            total = 0.0
            for sl in batch_slices(len(X), self.batch_size):
                idx = order[sl]
                loss = F.cross_entropy(model(torch.from_numpy(Xe[idx])), y_t[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            acc = float("nan")
            if eval_set is not None:
                acc = classification_accuracy(_forward_batched(model, X_eval), y_eval, num_classes).accuracy
            self.curve_.append(EpochRecord(epoch + 1, total / len(X), acc, time.perf_counter() - t0))
            if self.verbose:
                print(f"[finetune] epoch {epoch + 1}/{self.epochs} loss {total / len(X):.5f} acc {acc:.4f}")
        self.model_ = model
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return _forward_batched(self.model_, check_spectrograms(X, self.input_channels))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)
