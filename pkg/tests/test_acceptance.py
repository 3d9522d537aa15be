"""Desk-scale acceptance criteria A1-A7.

Each test prints one ``A<n> PASS|FAIL`` line and the same lines are
repeated in the pytest terminal summary.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from dls.cli import main
from dls.datasets import build_pretrain_pool, generate_toy_dataset
from dls.encoder import EncoderSpec, build_encoder
from dls.evaluation import LabeledBank, knn_predict
from dls.finetune import FeatureSource, FinetuneConfig, cross_validate, knn_on_features, pretrain
from dls.metrics import write_aggregate
from dls.npid import (
    MemoryBank,
    NpidConfig,
    estimate_z,
    full_softmax_loss,
    init_bank,
    log_softmax_probs,
    nce_loss,
    softmax_prob,
    update_bank,
)
from dls.spectro import StftConfig, band_split, stft_power

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
TOY_STFT = dict(target_sample_rate=16000)  # toy audio is 16 kHz; the other STFT settings stay at their defaults
PRETRAIN = dict(epochs=50, batch_size=64, clip_length_s=1.0)
FINETUNE = dict(epochs=5, batch_size=64, learning_rate=0.1)


def report(record_property, name, ok, detail):
    print(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
    record_property("detail", detail)
    return ok


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# -- oracles -----------------------------------------------------------------------------------

def central_diff(f, x: torch.Tensor, h=1e-6) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(analytic, numeric):
    return float((analytic - numeric).norm() / numeric.norm())


def brute_force_knn(v, vectors, labels, k, tau):
    sims = [float(np.dot(v, row)) for row in vectors]
    top = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
    votes = {}
    for i in top:
        votes[int(labels[i])] = votes.get(int(labels[i]), 0.0) + math.exp(sims[i] / tau)
    best = max(votes.values())
    return min(c for c, w in votes.items() if w == best)


def dft_power(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    spec = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n) @ frame
    return spec.real**2 + spec.imag**2


# -- A1 ----------------------------------------------------------------------------------------

@pytest.mark.criterion("A1")
def test_a1_softmax_probabilities(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in (2, 64, 1024):
        for trial in range(100):
            bank = init_bank(n, 128, seed=int(rng.integers(2**31)))
            v = torch.from_numpy(unit(rng, 128).astype(np.float32))
            total = float(log_softmax_probs(v, bank, 0.4).exp().double().sum())
            worst = max(worst, abs(total - 1.0))
    bank = MemoryBank(torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], dtype=torch.float64))
    expected = math.exp(2.5) / (math.exp(2.5) + 1.0 + math.exp(-2.5))
    scalar = abs(softmax_prob([1.0, 0.0], 0, bank, 0.4) - expected)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and scalar <= 1e-10 and elapsed < 5
    detail = f"max |sum-1| = {worst:.2e} (<=1e-6), three-instance error {scalar:.1e} (<=1e-10), {elapsed:.2f}s (<5s)"
    assert report(record_property, "A1", ok, detail), detail


# -- A2 ----------------------------------------------------------------------------------------

@pytest.mark.criterion("A2")
def test_a2_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    n, d = 8, 4
    bank = init_bank(n, d, seed=1, dtype=torch.float64)
    ids = torch.arange(n)
    cfg = NpidConfig(embedding_dim=d, temperature=0.4, nce_k=4)
    negatives = torch.from_numpy(np.random.default_rng(2).integers(0, n, (n, cfg.nce_k)))
    v0 = torch.from_numpy(unit(np.random.default_rng(3), n, d))
    z = estimate_z(v0, ids, bank, cfg, seed=0, negatives=negatives)

    losses = {
        "softmax": lambda v: full_softmax_loss(v, ids, bank, cfg.temperature),
        "nce": lambda v: nce_loss(v, ids, bank, cfg, seed=0, z=z, negatives=negatives),
    }
    errors = {}
    for name, loss in losses.items():
        v = v0.clone().requires_grad_(True)
        loss(v).backward()
        with torch.no_grad():
            numeric = central_diff(lambda: float(loss(v)), v)
        errors[f"{name}/embedding"] = rel_err(v.grad, numeric)

        enc = build_encoder(EncoderSpec(embedding_dim=d, width=2), seed=0).double().train()
        x = torch.randn(n, 3, 16, 16, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        enc.zero_grad()
        loss(enc(x)).backward()
        params = list(enc.parameters())
        analytic = torch.cat([p.grad.reshape(-1) for p in params])
        with torch.no_grad():
            numeric = torch.cat([central_diff(lambda: float(loss(enc(x))), p).reshape(-1) for p in params])
        errors[f"{name}/encoder"] = rel_err(analytic, numeric)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst <= 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {e:.1e}" for k, e in errors.items()) + f" (<=1e-4), {elapsed:.1f}s (<30s)"
    assert report(record_property, "A2", ok, detail), detail


# -- A3 ----------------------------------------------------------------------------------------

@pytest.mark.criterion("A3")
def test_a3_bank_and_knn_oracles(record_property):
    rng = np.random.default_rng(0)
    bank = init_bank(64, 16, seed=0)
    for step in range(1000):
        ids = torch.from_numpy(rng.choice(64, size=8, replace=False))
        v = torch.from_numpy(unit(rng, 8, 16).astype(np.float32))
        update_bank(bank, ids, v, 0.5)
    drift = float((bank.vectors.double().norm(dim=1) - 1).abs().max())

    vectors, labels = unit(rng, 300, 12), rng.integers(0, 8, 300)
    queries = unit(rng, 100, 12)
    mismatches = 0
    for k in (1, 5):
        fast = knn_predict(queries, LabeledBank(vectors, labels), k, 0.4)
        slow = [brute_force_knn(q, vectors, labels, k, 0.4) for q in queries]
        mismatches += int(np.sum(fast != np.array(slow)))
    ok = drift <= 1e-6 and mismatches == 0
    detail = f"max row-norm drift {drift:.1e} after 1000 updates (<=1e-6), knn disagreements {mismatches}/200 (=0)"
    assert report(record_property, "A3", ok, detail), detail


# -- A4 / A5 -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_runs")
    t0 = time.perf_counter()
    manifest = generate_toy_dataset(root / "toy", 10, 20, seed=7)
    features = FeatureSource(manifest.entries, 1.0, 0, **TOY_STFT)
    pool = build_pretrain_pool([manifest])
    assert [e.path for e in pool] == [e.path for e in manifest.entries]  # pool rows line up with `features`
    runs = {}
    for seed in SEEDS:
        est = pretrain(pool, EncoderSpec(), NpidConfig(), seed=seed, features=features, **PRETRAIN)
        curves = {}
        for mode, init in (("pretrained-dls", est.encoder_), ("from-scratch", None)):
            cfg = FinetuneConfig(seed=seed, init_mode=mode, **FINETUNE)
            curves[mode] = cross_validate(manifest, cfg, init, EncoderSpec(), features=features)
        runs[seed] = {"encoder": est.encoder_, "curves": curves}
    elapsed = time.perf_counter() - t0
    return manifest, features, runs, elapsed, root


def knn_mean(encoder, manifest, X):
    return float(np.mean([
        knn_on_features(encoder, X, manifest.labels, manifest.folds, f).accuracy
        for f in range(1, manifest.fold_scheme + 1)
    ]))


@pytest.mark.criterion("A4")
def test_a4_pretraining_beats_scratch(toy_runs, record_property):
    manifest, _, runs, elapsed, root = toy_runs
    per_seed = []
    for seed, run in runs.items():
        dls = run["curves"]["pretrained-dls"].mean_accuracy[-1]
        scratch = run["curves"]["from-scratch"].mean_accuracy[-1]
        per_seed.append((seed, dls, scratch))
    margin = float(np.mean([d - s for _, d, s in per_seed]))

    # merged report for the last seed, as the CLI would emit it
    for mode, run_id in (("pretrained-dls", "dls"), ("from-scratch", "scratch")):
        res = runs[SEEDS[-1]]["curves"][mode]
        write_aggregate(root / run_id / "aggregate.csv", res.epochs, res.mean_accuracy, res.std_accuracy)
        (root / run_id / "config.yaml").write_text(yaml.safe_dump({"run_id": run_id}))
    assert main(["report", str(root / "dls"), str(root / "scratch"), "--output-dir", str(root / "report")]) == 0

    ok = margin >= 0.10 and elapsed < 600
    seeds = "; ".join(f"seed {s}: dls {d:.3f} vs scratch {c:.3f}" for s, d, c in per_seed)
    detail = f"epoch-5 margin {100 * margin:+.1f} points (>=+10) [{seeds}], {elapsed:.0f}s (<600s)"
    assert report(record_property, "A4", ok, detail), detail


@pytest.mark.criterion("A5")
def test_a5_nce_matches_full_softmax(toy_runs, record_property):
    manifest, features, runs, _, _ = toy_runs
    X = features.static()
    pool = build_pretrain_pool([manifest])
    nce, soft = [], []
    for seed in SEEDS:
        nce.append(knn_mean(runs[seed]["encoder"], manifest, X))
        est = pretrain(pool, EncoderSpec(), NpidConfig(), seed=seed, features=features, objective="softmax",
                       **PRETRAIN)
        soft.append(knn_mean(est.encoder_, manifest, X))
    gap = abs(np.mean(nce) - np.mean(soft))
    ok = gap <= 0.05
    detail = f"knn accuracy nce {np.mean(nce):.3f} vs softmax {np.mean(soft):.3f}, gap {100 * gap:.1f} points (<=5)"
    assert report(record_property, "A5", ok, detail), detail


# -- A6 ----------------------------------------------------------------------------------------

@pytest.mark.criterion("A6")
def test_a6_pipeline_exactness(record_property):
    rng = np.random.default_rng(0)
    broken = 0
    for _ in range(1000):
        f, t = int(rng.integers(3, 600)), int(rng.integers(1, 40))
        v = rng.random((f, t))
        out = band_split(v).values
        if out.shape[0] != 3 or not np.array_equal(np.concatenate(list(out), axis=0), v[: 3 * (f // 3)]):
            broken += 1

    sr, n = 16000, 1024
    x = 0.5 * np.sin(2 * np.pi * 440.0 * np.arange(sr) / sr)
    spec = stft_power(x, StftConfig(n, 512, "hann", sr)).values
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    peak = int(np.argmax(dft_power(x[:n] * window)))
    frac = float(spec[peak - 2 : peak + 3].sum() / spec.sum())
    ok = broken == 0 and frac >= 0.9
    detail = f"band_split mismatches {broken}/1000 (=0), sine energy within +-2 bins of bin {peak}: {frac:.4f} (>=0.9)"
    assert report(record_property, "A6", ok, detail), detail


# -- A7 ----------------------------------------------------------------------------------------

SMALL = {
    "spectro": {"target_sample_rate": 16000, "window_length": 512, "hop_length": 256},
    "encoder": {"embedding_dim": 16, "width": 4},
    "npid": {"nce_k": 8},
    "pretrain": {"epochs": 2, "batch_size": 8, "clip_length_s": 1.0},
    "finetune": {"epochs": 2, "batch_size": 4},
    "datasets": {"toy": {"num_classes": 3, "clips_per_class": 5}},
}


def _run_all(base: Path):
    cfg = dict(SMALL)
    cfg["datasets"] = dict(SMALL["datasets"], manifests=[str(base / "toy" / "toy.csv")])
    base.mkdir(parents=True, exist_ok=True)
    (base / "run.yaml").write_text(yaml.safe_dump(cfg))
    c = ["--config", str(base / "run.yaml")]
    ck = str(base / "pre" / "checkpoint.dlsc")
    codes = [
        main(["toy-generate", *c, "--output-dir", str(base / "toy")]),
        main(["pretrain", *c, "--output-dir", str(base / "pre")]),
        main(["finetune", *c, "--output-dir", str(base / "dls"), "--run-id", "dls",
              "--init-mode", "pretrained-dls", "--checkpoint", ck]),
        main(["finetune", *c, "--output-dir", str(base / "scratch"), "--run-id", "scratch"]),
        main(["eval-knn", *c, "--output-dir", str(base / "knn"), "--checkpoint", ck, "--k", "3"]),
        main(["report", *c, str(base / "dls"), str(base / "scratch"), "--output-dir", str(base / "report")]),
    ]
    return codes


def _digests(base: Path, pattern: str):
    return {
        p.relative_to(base).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(base.rglob(pattern))
    }


@pytest.mark.criterion("A7")
def test_a7_reruns_are_byte_identical(tmp_path, record_property):
    codes_a, codes_b = _run_all(tmp_path / "a"), _run_all(tmp_path / "b")
    csv_a = {k: v for k, v in _digests(tmp_path / "a", "*.csv").items() if not k.endswith("timing.csv")}
    csv_b = {k: v for k, v in _digests(tmp_path / "b", "*.csv").items() if not k.endswith("timing.csv")}
    wav_same = list(_digests(tmp_path / "a", "*.wav").values()) == list(_digests(tmp_path / "b", "*.wav").values())
    differing = sorted(k for k in csv_a if csv_a.get(k) != csv_b.get(k))
    ok = codes_a == codes_b == [0] * 6 and csv_a.keys() == csv_b.keys() and not differing and wav_same
    detail = f"{len(csv_a)} metrics CSVs over 6 commands, differing {differing or 'none'}, exit codes {codes_a}"
    assert report(record_property, "A7", ok, detail), detail
