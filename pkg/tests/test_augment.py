import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsr.augment import (
    SIGMA_FLOOR,
    NoiseGenerator,
    augment_items,
    encode_sequence,
    intra_infonce,
    sample_noise,
)
from oracles import grad_rel_error, gru_step, infonce_loop


@pytest.fixture(autouse=True)
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def generator(d=4, seed=0):
    torch.manual_seed(seed)
    return NoiseGenerator(d).double()


def gru_oracle(gen, reps):
    g = gen.gru
    w_ih, w_hh = g.weight_ih.detach().numpy(), g.weight_hh.detach().numpy()
    b_ih, b_hh = g.bias_ih.detach().numpy(), g.bias_hh.detach().numpy()
    h = np.zeros(g.hidden_size)
    for x in reps:
        h = gru_step(x, h, w_ih, w_hh, b_ih, b_hh)
    return h


def test_encode_single_step():
    gen = generator()
    reps = torch.randn(5, 4)
    h = encode_sequence(gen, reps, [3])
    expected = gen.gru(reps[3:4], torch.zeros(1, 4))[0]
    assert torch.allclose(h, expected, atol=1e-14)


def test_encode_ignores_pads():
    gen = generator()
    reps = torch.randn(6, 4)
    a = encode_sequence(gen, reps, [1, 4, 2])
    b = encode_sequence(gen, reps, [-1, -1, 1, -1, 4, 2])
    assert torch.equal(a, b)


def test_encode_matches_loop_oracle():
    gen = generator(seed=3)
    reps = torch.randn(10, 4)
    seq = [7, 2, 2, 9, 0]
    h = encode_sequence(gen, reps, seq).detach().numpy()
    np.testing.assert_allclose(h, gru_oracle(gen, reps[seq].numpy()), atol=1e-10)


def test_encode_all_pad_raises():
    with pytest.raises(ValueError):
        encode_sequence(generator(), torch.randn(3, 4), [-1, -1])


def test_sample_noise_zero_eps_is_mean():
    gen = generator()
    h = torch.randn(4)
    assert torch.equal(sample_noise(gen, h, torch.zeros(4)), gen.mu(h))


def test_sample_noise_zeroed_sigma_uses_floor():
    gen = generator()
    with torch.no_grad():
        for p in gen.sigma.parameters():
            p.zero_()
    h, eps = torch.randn(4), torch.randn(4)
    s0 = math.log(2.0) + SIGMA_FLOOR
    assert torch.allclose(sample_noise(gen, h, eps), gen.mu(h) + s0 * eps, atol=1e-14)


def test_sigma_strictly_positive():
    gen = generator()
    with torch.no_grad():
        gen.sigma[2].bias.fill_(-1e4)
    assert torch.all(gen.scale(torch.randn(8, 4)) >= SIGMA_FLOOR)


def test_sample_noise_monte_carlo_mean():
    gen = generator(seed=5)
    h = torch.randn(4)
    eps = torch.randn(10_000, 4, generator=torch.Generator().manual_seed(0))
    beta = sample_noise(gen, h.expand(10_000, 4), eps).detach()
    mu, sigma = gen.mu(h).detach(), gen.scale(h).detach()
    assert torch.all((beta.mean(0) - mu).abs() < 3 * sigma / 100)


def test_sample_noise_is_function_of_eps():
    gen = generator()
    h, eps = torch.randn(4), torch.randn(4)
    assert torch.equal(sample_noise(gen, h, eps), sample_noise(gen, h, eps.clone()))


def test_augment_items():
    E, beta = torch.randn(5, 3), torch.randn(5, 3)
    assert torch.equal(augment_items(E, beta, 0.0), E)
    assert torch.allclose(augment_items(E, torch.ones(5, 3), 0.1) - E, torch.full((5, 3), 0.1), atol=1e-15)
    diff = torch.linalg.norm(augment_items(E, beta, 0.1) - E)
    assert diff.item() == pytest.approx(0.1 * torch.linalg.norm(beta).item(), rel=1e-12)
    with pytest.raises(ValueError):
        augment_items(E, torch.ones(4, 3), 0.1)


def test_infonce_single_pair_zero():
    assert intra_infonce(torch.randn(1, 4), torch.randn(1, 4), 0.2).item() == pytest.approx(0.0, abs=1e-15)


def test_infonce_orthonormal_closed_form():
    a = torch.eye(2)
    expected = -2 * math.log(math.exp(5) / (math.exp(5) + 1))
    assert expected == pytest.approx(0.01343, abs=5e-6)
    assert intra_infonce(a, a.clone(), 0.2).item() == pytest.approx(expected, rel=1e-12)


def test_infonce_empty_raises():
    with pytest.raises(ValueError):
        intra_infonce(torch.zeros(0, 3), torch.zeros(0, 3), 0.2)


def test_infonce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, p = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    got = intra_infonce(torch.from_numpy(a), torch.from_numpy(p), 0.3).item()
    assert got == pytest.approx(infonce_loop(a.tolist(), p.tolist(), 0.3), rel=1e-12)


def test_infonce_zero_row_guard():
    a = torch.randn(3, 4)
    a[1] = 0
    assert torch.isfinite(intra_infonce(a, torch.randn(3, 4), 0.2))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_infonce_permutation_invariant(m, seed):
    g = torch.Generator().manual_seed(seed)
    a, p = torch.randn(m, 4, generator=g), torch.randn(m, 4, generator=g)
    perm = torch.randperm(m, generator=g)
    assert intra_infonce(a[perm], p[perm], 0.2).item() == pytest.approx(intra_infonce(a, p, 0.2).item(), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_infonce_anchor_scale_invariant(m, seed, c):
    g = torch.Generator().manual_seed(seed)
    a, p = torch.randn(m, 4, generator=g), torch.randn(m, 4, generator=g)
    b = a.clone()
    b[0] *= c
    assert intra_infonce(b, p, 0.2).item() == pytest.approx(intra_infonce(a, p, 0.2).item(), rel=1e-10, abs=1e-12)


def test_infonce_nonnegative_when_positives_equal_anchors():
    for seed in range(20):
        a = torch.randn(5, 4, generator=torch.Generator().manual_seed(seed))
        loss = intra_infonce(a, a.clone(), 0.2).item()
        m = 5
        bound = m * math.log(1 + (m - 1) * math.exp(-2 / 0.2))
        assert loss >= 0 and loss >= bound - 1e-12


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_infonce_gradients(m):
    g = torch.Generator().manual_seed(m)
    a, p = torch.randn(m, 4, generator=g), torch.randn(m, 4, generator=g)
    assert grad_rel_error(lambda x, y: intra_infonce(x, y, 0.2), [a, p]) < 1e-4


def test_noise_path_gradients():
    gen = generator(seed=2)
    reps = torch.randn(5, 4)
    eps = torch.randn(4)

    def f(r):
        h = encode_sequence(gen, r, [0, 3, 1])
        beta = sample_noise(gen, h, eps)
        anchors = r[[0, 3, 1]]
        return intra_infonce(anchors, augment_items(anchors, beta.expand(3, 4), 0.1), 0.2)

    assert grad_rel_error(f, [reps]) < 1e-4
