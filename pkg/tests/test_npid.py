import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dls.npid import (
    MemoryBank,
    NpidConfig,
    estimate_z,
    full_softmax_loss,
    init_bank,
    nce_loss,
    sample_negatives,
    softmax_prob,
    update_bank,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def bank_of(rows):
    return MemoryBank(torch.tensor(np.asarray(rows), dtype=torch.float64))


def central_diff(f, x: np.ndarray, h=1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# -- config / init ----------------------------------------------------------------

@pytest.mark.parametrize(
    "kwargs", [dict(temperature=0.0), dict(nce_k=0), dict(bank_momentum=1.5), dict(noise_renormalization_z=-1.0)]
)
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        NpidConfig(**kwargs)


def test_config_defaults():
    cfg = NpidConfig()
    assert (cfg.embedding_dim, cfg.nce_k, cfg.temperature) == (128, 64, 0.4)


def test_init_bank_pool_size():
    bank = init_bank(11332, 128, seed=0)
    assert bank.vectors.shape == (11332, 128)
    np.testing.assert_allclose(bank.vectors.norm(dim=1).numpy(), 1.0, atol=1e-6)


def test_init_bank_single_row():
    bank = init_bank(1, 2, seed=3)
    assert bank.vectors.shape == (1, 2)
    assert abs(float(bank.vectors.norm()) - 1.0) < 1e-6


def test_init_bank_deterministic():
    assert torch.equal(init_bank(50, 8, 4).vectors, init_bank(50, 8, 4).vectors)
    assert not torch.equal(init_bank(50, 8, 4).vectors, init_bank(50, 8, 5).vectors)


def test_init_bank_rejects_degenerate():
    with pytest.raises(ValueError):
        init_bank(0, 4)
    with pytest.raises(ValueError):
        init_bank(3, 1)


# -- softmax ---------------------------------------------------------------------------

def test_single_instance_probability_one():
    assert softmax_prob([0.6, 0.8], 0, bank_of([[1.0, 0.0]]), 0.4) == pytest.approx(1.0, abs=1e-12)


def test_identical_rows_uniform():
    bank = bank_of([[0.6, 0.8]] * 5)
    for i in range(5):
        assert softmax_prob([1.0, 0.0], i, bank, 0.4) == pytest.approx(0.2, abs=1e-12)


def test_three_instance_scalar_oracle():
    bank = bank_of([[1, 0], [0, 1], [-1, 0]])
    expected = math.exp(2.5) / (math.exp(2.5) + math.exp(0.0) + math.exp(-2.5))
    assert abs(softmax_prob([1.0, 0.0], 0, bank, 0.4) - expected) < 1e-10


def test_softmax_out_of_range_id():
    with pytest.raises(IndexError):
        softmax_prob([1.0, 0.0], 3, bank_of([[1, 0], [0, 1]]), 0.4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1024), st.integers(2, 16), st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_probabilities_sum_to_one(n, d, seed, tau):
    rng = np.random.default_rng(seed)
    bank = bank_of(unit_rows(rng, n, d))
    v = unit_rows(rng, 1, d)[0]
    from dls.npid import log_softmax_probs

    p = log_softmax_probs(torch.tensor(v), bank, tau).exp().numpy()
    assert abs(p.sum() - 1.0) < 1e-6


def test_temperature_monotonicity():
    rng = np.random.default_rng(0)
    bank = bank_of(unit_rows(rng, 30, 5))
    v = unit_rows(rng, 1, 5)[0]
    best = int(np.argmax(bank.vectors.numpy() @ v))
    probs = [softmax_prob(v, best, bank, tau) for tau in (1.0, 0.7, 0.4, 0.2, 0.1)]
    assert all(b > a for a, b in zip(probs, probs[1:]))


# -- full softmax loss -------------------------------------------------------------------------

def test_loss_single_instance_zero():
    v = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    assert float(full_softmax_loss(v, [0], bank_of([[1.0, 0.0]]), 0.4)) == pytest.approx(0.0, abs=1e-12)


def test_loss_identical_rows_log_n():
    v = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss = full_softmax_loss(v, [2, 4], bank_of([[0.6, 0.8]] * 7), 0.4)
    assert float(loss) == pytest.approx(math.log(7), abs=1e-12)


def test_loss_three_instance_oracle():
    p = math.exp(2.5) / (math.exp(2.5) + 1.0 + math.exp(-2.5))
    loss = full_softmax_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0], bank_of([[1, 0], [0, 1], [-1, 0]]), 0.4)
    assert abs(float(loss) + math.log(p)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_loss_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    bank = bank_of(unit_rows(rng, n, 4))
    v = torch.tensor(unit_rows(rng, 3, 4))
    assert float(full_softmax_loss(v, rng.integers(0, n, 3), bank, 0.4)) >= 0.0


def test_full_softmax_gradient_finite_differences():
    rng = np.random.default_rng(0)
    bank = bank_of(unit_rows(rng, 8, 4))
    v0 = unit_rows(rng, 8, 4)
    ids = np.arange(8)

    def f(x):
        return float(full_softmax_loss(torch.tensor(x), ids, bank, 0.4))

    v = torch.tensor(v0, requires_grad=True)
    full_softmax_loss(v, ids, bank, 0.4).backward()
    assert rel_err(v.grad.numpy(), central_diff(f, v0)) <= 1e-4


def test_bank_is_stop_gradient():
    bank = MemoryBank(torch.tensor(unit_rows(np.random.default_rng(0), 4, 3), requires_grad=True))
    v = torch.tensor(unit_rows(np.random.default_rng(1), 2, 3), requires_grad=True)
    full_softmax_loss(v, [0, 1], bank, 0.4).backward()
    assert bank.vectors.grad is None


# -- NCE ---------------------------------------------------------------------------------------

def nce_oracle(v, pos_row, neg_rows, tau, z, k, n):
    """-log h(pos) - sum log(1 - h(neg)), h = p / (p + k/n), p = exp(s/tau)/z."""
    def h(row):
        p = math.exp(sum(a * b for a, b in zip(row, v)) / tau) / z
        return p / (p + k / n)

    return -math.log(h(pos_row)) - sum(math.log(1.0 - h(r)) for r in neg_rows)


def test_nce_balance_point():
    # choose z so that p == K * Pn exactly: h = 1/2 for every term
    k, n, tau = 1, 2, 0.4
    rows = [[1.0, 0.0], [1.0, 0.0]]
    z = math.exp(1.0 / tau) / (k / n)
    cfg = NpidConfig(embedding_dim=2, temperature=tau, nce_k=k)
    loss = nce_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [0], bank_of(rows), cfg, seed=0, z=z)
    assert float(loss) == pytest.approx(-2 * math.log(0.5), abs=1e-12)


def test_nce_k1_n2_scalar_oracle():
    rows = [[0.6, 0.8], [-0.8, 0.6]]
    v = [0.28, 0.96]
    cfg = NpidConfig(embedding_dim=2, temperature=0.4, nce_k=1)
    for neg in (0, 1):
        loss = nce_loss(
            torch.tensor([v], dtype=torch.float64), [0], bank_of(rows), cfg, seed=0, z=3.0,
            negatives=torch.tensor([[neg]]),
        )
        expected = nce_oracle(v, rows[0], [rows[neg]], 0.4, 3.0, 1, 2)
        assert abs(float(loss) - expected) < 1e-12


def test_nce_seeded_sampling_matches_oracle():
    rows = [[0.6, 0.8], [-0.8, 0.6]]
    v = [0.28, 0.96]
    cfg = NpidConfig(embedding_dim=2, temperature=0.4, nce_k=1)
    neg = int(sample_negatives(1, 1, 2, seed=11)[0, 0])
    loss = nce_loss(torch.tensor([v], dtype=torch.float64), [0], bank_of(rows), cfg, seed=11, z=3.0)
    assert abs(float(loss) - nce_oracle(v, rows[0], [rows[neg]], 0.4, 3.0, 1, 2)) < 1e-12


def test_nce_deterministic():
    rng = np.random.default_rng(0)
    bank = bank_of(unit_rows(rng, 100, 8))
    v = torch.tensor(unit_rows(rng, 4, 8))
    cfg = NpidConfig(embedding_dim=8, nce_k=10)
    assert float(nce_loss(v, [1, 2, 3, 4], bank, cfg, seed=5)) == float(nce_loss(v, [1, 2, 3, 4], bank, cfg, seed=5))


def test_nce_k_too_large():
    cfg = NpidConfig(embedding_dim=2, nce_k=3)
    with pytest.raises(ValueError, match="nce_k"):
        nce_loss(torch.tensor([[1.0, 0.0]]), [0], bank_of([[1, 0], [0, 1], [-1, 0]]), cfg, seed=0)


def test_estimate_z_formula():
    rng = np.random.default_rng(2)
    rows = unit_rows(rng, 20, 4)
    v = unit_rows(rng, 3, 4)
    cfg = NpidConfig(embedding_dim=4, nce_k=5, temperature=0.4)
    neg = torch.from_numpy(rng.integers(0, 20, (3, 5)))
    ids = [0, 7, 9]
    z = estimate_z(torch.tensor(v), ids, bank_of(rows), cfg, seed=0, negatives=neg)
    sims = [np.exp(rows[j] @ v[b] / 0.4) for b in range(3) for j in [ids[b], *neg[b].tolist()]]
    assert z == pytest.approx(20 * np.mean(sims), rel=1e-12)


def test_nce_gradient_finite_differences():
    rng = np.random.default_rng(1)
    bank = bank_of(unit_rows(rng, 8, 4))
    v0 = unit_rows(rng, 8, 4)
    ids = np.arange(8)
    cfg = NpidConfig(embedding_dim=4, nce_k=3, temperature=0.4)

    def f(x):
        return float(nce_loss(torch.tensor(x), ids, bank, cfg, seed=3, z=5.0))

    v = torch.tensor(v0, requires_grad=True)
    nce_loss(v, ids, bank, cfg, seed=3, z=5.0).backward()
    assert rel_err(v.grad.numpy(), central_diff(f, v0)) <= 1e-4


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    rows = unit_rows(rng, 12, 5)
    v = torch.tensor(unit_rows(rng, 3, 5))
    ids = np.array([0, 5, 11])
    perm = rng.permutation(12)  # new row perm_inv[i] holds old row i
    inv = np.argsort(perm)
    permuted = bank_of(rows[perm])
    a = full_softmax_loss(v, ids, bank_of(rows), 0.4)
    b = full_softmax_loss(v, inv[ids], permuted, 0.4)
    assert float(a) == pytest.approx(float(b), abs=1e-12)

    cfg = NpidConfig(embedding_dim=5, nce_k=4)
    neg = rng.integers(0, 12, (3, 4))
    a = nce_loss(v, ids, bank_of(rows), cfg, 0, z=7.0, negatives=torch.from_numpy(neg))
    b = nce_loss(v, inv[ids], permuted, cfg, 0, z=7.0, negatives=torch.from_numpy(inv[neg]))
    assert float(a) == pytest.approx(float(b), abs=1e-12)


# -- bank updates ------------------------------------------------------------------------------

def test_update_momentum_one_replaces():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]])
    update_bank(bank, [0], torch.tensor([[0.6, 0.8]], dtype=torch.float64), 1.0)
    np.testing.assert_allclose(bank.vectors[0].numpy(), [0.6, 0.8], atol=1e-15)


def test_update_momentum_zero_keeps():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]])
    before = bank.vectors.clone()
    update_bank(bank, [0, 1], torch.tensor([[0.6, 0.8], [0.8, 0.6]], dtype=torch.float64), 0.0)
    assert torch.equal(bank.vectors, before)


def test_update_half_momentum():
    bank = bank_of([[1.0, 0.0]])
    update_bank(bank, [0], torch.tensor([[0.0, 1.0]], dtype=torch.float64), 0.5)
    np.testing.assert_allclose(bank.vectors[0].numpy(), [math.sqrt(2) / 2] * 2, atol=1e-15)


def test_update_duplicate_ids_rejected():
    bank = bank_of([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="duplicate"):
        update_bank(bank, [1, 1], torch.tensor([[0.6, 0.8], [0.8, 0.6]], dtype=torch.float64), 0.5)


def test_update_antipodal_falls_back_to_v():
    bank = bank_of([[1.0, 0.0]])
    update_bank(bank, [0], torch.tensor([[-1.0, 0.0]], dtype=torch.float64), 0.5)
    np.testing.assert_allclose(bank.vectors[0].numpy(), [-1.0, 0.0])


def test_update_preserves_norms_over_many_steps():
    rng = np.random.default_rng(0)
    bank = init_bank(50, 16, seed=0)
    for _ in range(1000):
        ids = rng.choice(50, size=8, replace=False)
        v = torch.tensor(unit_rows(rng, 8, 16), dtype=torch.float32)
        update_bank(bank, ids, v, float(rng.uniform(0, 1)))
    drift = (bank.vectors.double().norm(dim=1) - 1).abs().max()
    assert float(drift) < 1e-6
