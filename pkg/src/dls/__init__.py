"""Discriminative learning of sounds: instance-discrimination pre-training for audio event classification."""

from .datasets import (
    DatasetManifest,
    ManifestEntry,
    Split,
    build_pretrain_pool,
    generate_toy_dataset,
    load_manifest,
    make_split,
)
from .encoder import EncoderSpec, build_encoder, replace_head
from .estimators import DLSPretrainer, FineTuneClassifier, KNNEmbeddingClassifier, SpectrogramTransformer
from .finetune import FinetuneConfig, cross_validate, evaluate_embeddings, finetune, pretrain
from .npid import NpidConfig

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "ManifestEntry",
    "Split",
    "build_pretrain_pool",
    "generate_toy_dataset",
    "load_manifest",
    "make_split",
    "EncoderSpec",
    "build_encoder",
    "replace_head",
    "DLSPretrainer",
    "FineTuneClassifier",
    "KNNEmbeddingClassifier",
    "SpectrogramTransformer",
    "FinetuneConfig",
    "cross_validate",
    "evaluate_embeddings",
    "finetune",
    "pretrain",
    "NpidConfig",
]
