"""Dataset manifests, fold splits, the combined pre-training pool and the toy corpus.

A manifest is a CSV file with header ``path,label,fold`` plus a companion
metadata file ``<stem>.meta.yaml`` holding ``name``, ``num_classes``,
``clip_length_s`` and ``fold_scheme``. Relative audio paths are resolved
against ``$DLS_DATA_ROOT`` when set, otherwise against the manifest directory.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy import signal
from scipy.io import wavfile

DATA_ROOT_ENV = "DLS_DATA_ROOT"
META_SUFFIX = ".meta.yaml"
TOY_SAMPLE_RATE = 16000
TOY_FOLDS = 5

# Events / classes / standardized length / fold count of the four benchmarks.
BENCHMARK_DATASETS = {
    "urbansound8k": dict(events=8732, num_classes=10, clip_length_s=4.0, fold_scheme=10),
    "esc50": dict(events=2000, num_classes=50, clip_length_s=5.0, fold_scheme=5),
    "esc10": dict(events=400, num_classes=10, clip_length_s=5.0, fold_scheme=5),
    "dcase2013": dict(events=200, num_classes=10, clip_length_s=30.0, fold_scheme=2),
}


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    fold: int
    instance_id: int
    dataset: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    entries: tuple[ManifestEntry, ...]
    num_classes: int
    clip_length_s: float
    fold_scheme: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        validate_manifest(self)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def folds(self) -> np.ndarray:
        return np.array([e.fold for e in self.entries], dtype=np.int64)


@dataclass(frozen=True)
class Split:
    train: tuple[ManifestEntry, ...]
    eval: tuple[ManifestEntry, ...]
    held_fold: int


def validate_manifest(manifest: DatasetManifest) -> None:
    if not manifest.name:
        raise ManifestError("manifest name must be non-empty")
    if manifest.num_classes < 1:
        raise ManifestError(f"num_classes must be positive, got {manifest.num_classes}")
    if manifest.fold_scheme < 1:
        raise ManifestError(f"fold_scheme must be positive, got {manifest.fold_scheme}")
    if not manifest.clip_length_s > 0:
        raise ManifestError(f"clip_length_s must be positive, got {manifest.clip_length_s}")
    if not manifest.entries:
        raise ManifestError(f"manifest {manifest.name!r} has no entries")
    seen = set()
    for e in manifest.entries:
        if not 1 <= e.fold <= manifest.fold_scheme:
            raise ManifestError(
                f"{e.path}: fold {e.fold} outside [1, {manifest.fold_scheme}]"
            )
        if not 0 <= e.label < manifest.num_classes:
            raise ManifestError(
                f"{e.path}: label {e.label} outside [0, {manifest.num_classes})"
            )
        if e.path in seen:
            raise ManifestError(f"duplicate path {e.path!r}")
        seen.add(e.path)


def resolve_audio_path(path: str, manifest_dir: Path) -> str:
    p = Path(path)
    if p.is_absolute():
        return str(p)
    root = os.environ.get(DATA_ROOT_ENV)
    base = Path(root) if root else manifest_dir
    return str((base / p).resolve())


def meta_path_for(csv_path: str | os.PathLike) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + META_SUFFIX)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read and validate a manifest CSV and its metadata file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    meta_file = meta_path_for(path)
    if not meta_file.is_file():
        raise FileNotFoundError(f"manifest metadata not found: {meta_file}")
    with open(meta_file, encoding="utf-8") as fh:
        meta = yaml.safe_load(fh) or {}
    missing = {"name", "num_classes", "clip_length_s", "fold_scheme"} - set(meta)
    if missing:
        raise ManifestError(f"{meta_file}: missing keys {sorted(missing)}")

    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "fold"]:
            raise ManifestError(f"{path}:1: header must be 'path,label,fold', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                label, fold = int(row[1]), int(row[2])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            entries.append(
                ManifestEntry(
                    path=resolve_audio_path(row[0].strip(), path.parent),
                    label=label,
                    fold=fold,
                    instance_id=len(entries),
                    dataset=str(meta["name"]),
                )
            )
    return DatasetManifest(
        name=str(meta["name"]),
        entries=tuple(entries),
        num_classes=int(meta["num_classes"]),
        clip_length_s=float(meta["clip_length_s"]),
        fold_scheme=int(meta["fold_scheme"]),
    )


def write_manifest(
    manifest: DatasetManifest, path: str | os.PathLike, relative_to: str | os.PathLike | None = None
) -> Path:
    """Write ``manifest`` as CSV + metadata. Paths are made relative to ``relative_to`` if given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "fold"])
        for e in manifest.entries:
            p = os.path.relpath(e.path, relative_to) if relative_to is not None else e.path
            w.writerow([Path(p).as_posix(), e.label, e.fold])
    meta = dict(
        name=manifest.name,
        num_classes=manifest.num_classes,
        clip_length_s=manifest.clip_length_s,
        fold_scheme=manifest.fold_scheme,
    )
    with open(meta_path_for(path), "w", encoding="utf-8") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    return path


def make_split(manifest: DatasetManifest, held_fold: int) -> Split:
    if not 1 <= held_fold <= manifest.fold_scheme:
        raise ValueError(f"held_fold {held_fold} outside [1, {manifest.fold_scheme}]")
    train = tuple(e for e in manifest.entries if e.fold != held_fold)
    held = tuple(e for e in manifest.entries if e.fold == held_fold)
    return Split(train=train, eval=held, held_fold=held_fold)


def build_pretrain_pool(
    manifests: Sequence[DatasetManifest],
    exclude_folds: Mapping[str, Iterable[int]] | None = None,
) -> list[ManifestEntry]:
    """Merge all entries of all manifests into one unlabeled pool.

    Ordering is by dataset name, then path, and ``instance_id`` is reassigned
    to ``0..n-1`` in that order. ``exclude_folds`` maps a dataset name to folds
    left out of the pool (used to keep downstream evaluation folds unseen).
    """
    if not manifests:
        raise ValueError("at least one manifest is required")
    exclude_folds = {k: set(v) for k, v in (exclude_folds or {}).items()}
    keyed = []
    for m in manifests:
        skip = exclude_folds.get(m.name, set())
        keyed.extend((m.name, e.path, e) for e in m.entries if e.fold not in skip)
    # stable on ties, so two identical (name, path) pairs keep manifest order
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [replace(e, instance_id=i, dataset=name) for i, (name, _, e) in enumerate(keyed)]


# ---------------------------------------------------------------------------
# benchmark dataset helpers

def manifest_from_esc50(meta_csv: str | os.PathLike, audio_dir: str | os.PathLike, esc10: bool = False) -> DatasetManifest:
    """Build an ESC-50 (or ESC-10) manifest from the official ``meta/esc50.csv``.

    ESC-10 targets are remapped to ``0..9`` in ascending order of the ESC-50 target.
    """
    rows = []
    with open(meta_csv, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if esc10 and r["esc10"].strip().lower() != "true":
                continue
            rows.append((r["filename"], int(r["target"]), int(r["fold"])))
    remap = {t: i for i, t in enumerate(sorted({t for _, t, _ in rows}))} if esc10 else None
    entries = [
        ManifestEntry(
            path=str(Path(audio_dir, fn).resolve()),
            label=remap[t] if remap else t,
            fold=fold,
            instance_id=i,
            dataset="esc10" if esc10 else "esc50",
        )
        for i, (fn, t, fold) in enumerate(rows)
    ]
    info = BENCHMARK_DATASETS["esc10" if esc10 else "esc50"]
    return DatasetManifest(
        name="esc10" if esc10 else "esc50",
        entries=tuple(entries),
        num_classes=info["num_classes"],
        clip_length_s=info["clip_length_s"],
        fold_scheme=info["fold_scheme"],
    )


def manifest_from_urbansound8k(meta_csv: str | os.PathLike, audio_dir: str | os.PathLike) -> DatasetManifest:
    """Build an UrbanSound8K manifest from the official ``metadata/UrbanSound8K.csv``."""
    entries = []
    with open(meta_csv, newline="", encoding="utf-8") as fh:
        for i, r in enumerate(csv.DictReader(fh)):
            fold = int(r["fold"])
            entries.append(
                ManifestEntry(
                    path=str(Path(audio_dir, f"fold{fold}", r["slice_file_name"]).resolve()),
                    label=int(r["classID"]),
                    fold=fold,
                    instance_id=i,
                    dataset="urbansound8k",
                )
            )
    info = BENCHMARK_DATASETS["urbansound8k"]
    return DatasetManifest(
        name="urbansound8k",
        entries=tuple(entries),
        num_classes=info["num_classes"],
        clip_length_s=info["clip_length_s"],
        fold_scheme=info["fold_scheme"],
    )


# ---------------------------------------------------------------------------
# toy corpus

def toy_clip(label: int, index: int, seed: int, sample_rate: int = TOY_SAMPLE_RATE) -> np.ndarray:
    """Synthesize one 1 s toy clip of class ``label``.

    Class c is a sine at ``200 + 150 c`` Hz plus a band-limited noise burst
    whose onset moves later with c. Frequency, phase, levels and onset get
    per-clip jitter drawn from ``(seed, label, index)``.
    """
    rng = np.random.default_rng([seed, label, index])
    n = sample_rate
    t = np.arange(n) / sample_rate
    freq = (200.0 + 150.0 * label) * (1.0 + rng.uniform(-0.02, 0.02))
    tone = rng.uniform(0.15, 0.3) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))

    sos = signal.butter(4, [2500.0, 5000.0], btype="bandpass", fs=sample_rate, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    noise /= np.max(np.abs(noise)) + 1e-12
    onset = 0.05 + 0.08 * label + rng.uniform(-0.02, 0.02)
    start = int(np.clip(onset, 0.0, 0.85) * sample_rate)
    stop = start + int(0.12 * sample_rate)
    burst = np.zeros(n)
    burst[start:stop] = noise[start:stop] * np.hanning(stop - start)
    burst *= rng.uniform(0.2, 0.4)

    floor = 0.01 * rng.standard_normal(n)
    return np.clip(tone + burst + floor, -1.0, 1.0)


def generate_toy_dataset(
    out_dir: str | os.PathLike,
    num_classes: int = 10,
    clips_per_class: int = 20,
    seed: int = 7,
) -> DatasetManifest:
    """Write a deterministic toy corpus (16-bit WAV) and its manifest to ``out_dir``.

    Folds are assigned round-robin per class, so every fold holds every class.
    Returns the manifest, whose CSV is ``out_dir/toy.csv``.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if clips_per_class < 2:
        raise ValueError(f"clips_per_class must be >= 2, got {clips_per_class}")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for c in range(num_classes):
        for j in range(clips_per_class):
            x = toy_clip(c, j, seed)
            pcm = np.round(x * 32767.0).astype("<i2")
            fname = audio_dir / f"c{c:02d}_{j:03d}.wav"
            wavfile.write(fname, TOY_SAMPLE_RATE, pcm)
            entries.append(
                ManifestEntry(
                    path=str(fname.resolve()),
                    label=c,
                    fold=j % TOY_FOLDS + 1,
                    instance_id=len(entries),
                    dataset="toy",
                )
            )
    manifest = DatasetManifest(
        name="toy",
        entries=tuple(entries),
        num_classes=num_classes,
        clip_length_s=1.0,
        fold_scheme=TOY_FOLDS,
    )
    write_manifest(manifest, out_dir / "toy.csv", relative_to=out_dir)
    return manifest
