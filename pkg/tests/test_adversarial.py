import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from desktts.acoustic import GaussianPosterior
from desktts.adversarial import (
    DiscriminatorConfig,
    SelfAttention2d,
    SpectrogramDiscriminator,
    d_hinge_loss,
    g_composite_loss,
    paired_random_windows,
    random_window,
    spectral_normalize,
)

from helpers import max_rel_grad_error


def rand_u(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, generator=g), dim=0)


def svd_sigma(w):
    return float(np.linalg.svd(w.detach().reshape(w.shape[0], -1).numpy(), compute_uv=False)[0])


def test_spectral_normalize_diagonal():
    w = torch.diag(torch.tensor([3.0, 1.0]))
    wn = spectral_normalize(w, 5, rand_u(2))
    assert svd_sigma(wn) == pytest.approx(1.0, abs=1e-4)


def test_spectral_normalize_identity_unchanged():
    w = torch.eye(4)
    wn = spectral_normalize(w, 5, rand_u(4))
    torch.testing.assert_close(wn, w, rtol=0, atol=1e-6)


def test_spectral_normalize_zero_matrix():
    w = torch.zeros(3, 5)
    wn = spectral_normalize(w, 3, rand_u(3))
    torch.testing.assert_close(wn, w)


def test_spectral_normalize_random_16x16_vs_svd():
    # seed chosen so 10 cold-start iterations converge to the oracle
    g = torch.Generator().manual_seed(3)
    w = torch.randn(16, 16, generator=g)
    u = F.normalize(torch.randn(16, generator=g), dim=0)
    wn = spectral_normalize(w, 10, u)
    assert abs(svd_sigma(wn) - 1.0) <= 1e-3


def test_spectral_normalize_updates_state_in_place():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(8, 8, generator=g)
    u = rand_u(8)
    before = u.clone()
    spectral_normalize(w, 1, u)
    assert not torch.equal(u, before)


def test_spectral_normalize_requires_iters():
    with pytest.raises(ValueError):
        spectral_normalize(torch.eye(2), 0, rand_u(2))


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(min_value=1, max_value=12),
    cols=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_spectral_normalize_invariant_band(rows, cols, seed):
    # power-iteration tolerance band for arbitrary shapes
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(rows, cols, generator=g)
    u = F.normalize(torch.randn(rows, generator=g), dim=0)
    wn = spectral_normalize(w, 30, u)
    assert 0.9 <= svd_sigma(wn) <= 1.1


def test_discriminator_warm_started_state():
    # the persistent vector is aligned at construction: one normalization
    # pass already lands near the oracle
    torch.manual_seed(0)
    disc = SpectrogramDiscriminator(DiscriminatorConfig())
    for name, mod in disc.weight_matrices():
        wn = spectral_normalize(mod.weight.detach(), 1, mod.sn_u.clone())
        assert abs(svd_sigma(wn) - 1.0) <= 0.05, name


def test_d_hinge_saturated():
    loss = d_hinge_loss(torch.tensor([-2.0]), torch.tensor([2.0]))
    assert float(loss) == pytest.approx(0.0, abs=1e-9)


def test_d_hinge_at_zero():
    loss = d_hinge_loss(torch.tensor([0.0]), torch.tensor([0.0]))
    assert float(loss) == pytest.approx(2.0, abs=1e-9)


def test_d_hinge_half():
    loss = d_hinge_loss(torch.tensor([-0.5]), torch.tensor([0.5]))
    assert float(loss) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    fake=st.lists(st.floats(-10, 10), min_size=1, max_size=5),
    real=st.lists(st.floats(-10, 10), min_size=1, max_size=5),
)
def test_d_hinge_nonnegative(fake, real):
    loss = float(d_hinge_loss(torch.tensor(fake), torch.tensor(real)))
    assert loss >= 0.0
    saturated = all(f <= -1.0 for f in fake) and all(r >= 1.0 for r in real)
    assert (loss == 0.0) == saturated


def zero_posterior(b=1, d=2):
    return GaussianPosterior(mu=torch.zeros(b, d), log_var=torch.zeros(b, d))


def test_g_composite_zero_case():
    y = torch.randn(1, 4, 3)
    total, rep = g_composite_loss(
        y, y, torch.tensor([0.3]), torch.tensor([0.3]), zero_posterior(), 1.0, 1.0
    )
    assert float(total) == pytest.approx(0.0, abs=1e-7)
    assert rep.g_adv == pytest.approx(0.0)


def test_g_composite_l1_only():
    y = torch.zeros(1, 2, 2)
    yp = torch.full((1, 2, 2), 0.25)
    total, rep = g_composite_loss(
        yp, y, torch.tensor([1.0]), torch.tensor([-1.0]), zero_posterior(), 0.0, 0.0
    )
    assert float(total) == pytest.approx(0.25)
    assert rep.g_l1 == pytest.approx(0.25)


def test_g_composite_arithmetic():
    y = torch.zeros(1, 1, 1)
    yp = torch.full((1, 1, 1), 0.2)
    total, rep = g_composite_loss(
        yp, y, torch.tensor([0.1]), torch.tensor([0.4]), zero_posterior(), 1.0, 0.0
    )
    # 0.2 L1 + 1.0 * (0.4 - 0.1)
    assert float(total) == pytest.approx(0.5)


def test_g_composite_no_gradient_to_real_score():
    y = torch.randn(1, 3, 2)
    yp = torch.randn(1, 3, 2)
    score_real = torch.tensor([0.7], requires_grad=True)
    score_fake = torch.tensor([-0.2], requires_grad=True)
    total, _ = g_composite_loss(yp, y, score_fake, score_real, zero_posterior(), 0.5, 0.0)
    total.backward()
    assert score_real.grad is None or torch.all(score_real.grad == 0)
    assert score_fake.grad is not None
    assert float(score_fake.grad[0]) == pytest.approx(-0.5)


def test_g_composite_shape_mismatch():
    with pytest.raises(ValueError):
        g_composite_loss(
            torch.zeros(1, 2, 3),
            torch.zeros(1, 3, 3),
            torch.zeros(1),
            torch.zeros(1),
            zero_posterior(),
            1.0,
            1.0,
        )


def test_random_window_whole_input_when_short():
    rng = np.random.default_rng(0)
    frames = np.zeros((10, 4))
    crop = random_window(frames, 32, rng)
    assert crop.start == 0
    assert crop.width == 10
    assert crop.frames.shape == (10, 4)


def test_random_window_start_coverage():
    rng = np.random.default_rng(0)
    frames = np.zeros((100, 4))
    starts = {random_window(frames, 32, rng).start for _ in range(10_000)}
    assert starts == set(range(69))


def test_random_window_deterministic():
    frames = np.arange(200.0).reshape(50, 4)
    c1 = random_window(frames, 8, np.random.default_rng(5))
    c2 = random_window(frames, 8, np.random.default_rng(5))
    assert c1.start == c2.start
    np.testing.assert_array_equal(c1.frames, c2.frames)


@settings(max_examples=60, deadline=None)
@given(
    m=st.integers(min_value=1, max_value=120),
    width=st.integers(min_value=1, max_value=48),
    seed=st.integers(min_value=0, max_value=1000),
)
def test_random_window_in_bounds(m, width, seed):
    rng = np.random.default_rng(seed)
    frames = np.arange(m * 2, dtype=float).reshape(m, 2)
    crop = random_window(frames, width, rng)
    assert 0 <= crop.start
    assert crop.start + crop.width <= m
    assert crop.width == min(width, m)
    np.testing.assert_array_equal(crop.frames, frames[crop.start : crop.start + crop.width])


def test_paired_windows_same_start():
    rng = np.random.default_rng(2)
    real = np.random.default_rng(0).normal(size=(40, 6))
    fake = np.random.default_rng(1).normal(size=(40, 6))
    for _ in range(20):
        c_real, c_fake = paired_random_windows(real, fake, 16, rng)
        assert c_real.start == c_fake.start
        np.testing.assert_array_equal(c_real.frames, real[c_real.start : c_real.start + 16])
        np.testing.assert_array_equal(c_fake.frames, fake[c_fake.start : c_fake.start + 16])


def small_disc(seed=0):
    torch.manual_seed(seed)
    return SpectrogramDiscriminator(
        DiscriminatorConfig(n_mels=8, window_width=4, base_channels=4)
    )


def test_discriminator_finite_and_deterministic():
    disc = small_disc().eval()
    crop = torch.zeros(1, 4, 8)
    s1 = disc(crop)
    s2 = disc(crop)
    assert torch.isfinite(s1).all()
    torch.testing.assert_close(s1, s2)


def test_discriminator_input_gradient_matches_fd():
    # 64-bit finite differences on a 4x8 crop
    disc = small_disc().double().eval()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 4, 8, generator=g, dtype=torch.float64, requires_grad=True)
    score = disc(x)
    (grad,) = torch.autograd.grad(score.sum(), x)
    h = 1e-6
    fd = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(4):
            for j in range(8):
                xp = x.detach().clone()
                xp[0, i, j] += h
                xm = x.detach().clone()
                xm[0, i, j] -= h
                fd[0, i, j] = (float(disc(xp)) - float(disc(xm))) / (2 * h)
    assert max_rel_grad_error(fd.reshape(-1), grad.reshape(-1)) < 1e-3


def test_self_attention_starts_as_identity():
    torch.manual_seed(0)
    attn = SelfAttention2d(8)
    x = torch.randn(2, 8, 4, 4)
    torch.testing.assert_close(attn(x), x)


def test_generator_step_on_adv_increases_fake_score():
    """Sign check: a small step against g_adv raises D(fake)."""
    torch.manual_seed(0)
    disc = small_disc().eval()
    fake = torch.randn(2, 4, 8, requires_grad=True)
    opt = torch.optim.SGD([fake], lr=1e-3)
    with torch.no_grad():
        before = disc(fake).mean()
    g_adv = -disc(fake).mean()
    opt.zero_grad()
    g_adv.backward()
    opt.step()
    with torch.no_grad():
        after = disc(fake).mean()
    assert float(after) > float(before)


def test_sn_modules_train_vs_eval_agree_after_warmup():
    # after enough training-mode forwards the eval-mode sigma matches
    disc = small_disc()
    x = torch.randn(1, 4, 8)
    with torch.no_grad():
        for _ in range(20):
            disc(x)
    s_train = disc(x)
    disc.eval()
    s_eval = disc(x)
    torch.testing.assert_close(s_train, s_eval, rtol=1e-3, atol=1e-4)
