import math

import numpy as np
import pytest
import torch

from desktts.acoustic import (
    AcousticConfig,
    AcousticModel,
    AttentionState,
    DecoderStepOutput,
    GaussianPosterior,
    acoustic_loss,
    kld_closed_form,
    reparameterize,
    slice_outputs,
)


def tiny_cfg(**kw):
    base = dict(
        vocab_size=6,
        n_mels=8,
        max_outputs_per_step=5,
        latent_dim=4,
        embed_dim=8,
        encoder_channels=8,
        encoder_kernel=3,
        encoder_layers=1,
        encoder_lstm_units=6,
        decoder_lstm_units=10,
        prenet_units=6,
        prenet_dropout=0.5,
        attention_units=6,
        attention_filters=2,
        attention_kernel=5,
        reference_channels=4,
        reference_layers=2,
        reference_lstm_units=4,
    )
    base.update(kw)
    return AcousticConfig(**base)


def make_model(seed=0, **kw):
    torch.manual_seed(seed)
    model = AcousticModel(tiny_cfg(**kw))
    model.eval()
    return model


def test_kld_zero_for_standard_normal():
    q = GaussianPosterior(mu=torch.zeros(3, 4), log_var=torch.zeros(3, 4))
    assert float(kld_closed_form(q)) == 0.0


def test_kld_analytic_value():
    # KL(N(1, 1) || N(0, 1)) = 0.5 per dimension
    q = GaussianPosterior(mu=torch.ones(2, 5), log_var=torch.zeros(2, 5))
    assert float(kld_closed_form(q)) == pytest.approx(2.5)


def test_kld_nonnegative_random():
    g = torch.Generator().manual_seed(1)
    q = GaussianPosterior(
        mu=torch.randn(10, 8, generator=g), log_var=torch.randn(10, 8, generator=g)
    )
    assert float(kld_closed_form(q)) > 0.0


def test_reparameterize_mean_at_zero_noise():
    q = GaussianPosterior(mu=torch.full((2, 3), 1.5), log_var=torch.zeros(2, 3))
    z = reparameterize(q, noise=torch.zeros(2, 3))
    torch.testing.assert_close(z, q.mu)


def test_reparameterize_scales_noise():
    q = GaussianPosterior(mu=torch.zeros(1, 2), log_var=torch.full((1, 2), math.log(4.0)))
    z = reparameterize(q, noise=torch.ones(1, 2))
    torch.testing.assert_close(z, torch.full((1, 2), 2.0))


def test_slice_outputs():
    raw = torch.arange(2 * 5 * 3, dtype=torch.float32).reshape(2, 5, 3)
    out = DecoderStepOutput(raw_frames=raw, stop_logit=torch.zeros(2))
    sliced = slice_outputs(out, 2)
    torch.testing.assert_close(sliced, raw[:, :2])
    with pytest.raises(ValueError):
        slice_outputs(out, 6)


def test_encode_phonemes_rejects_oov():
    model = make_model()
    with pytest.raises(ValueError):
        model.encode_phonemes(torch.tensor([[0, 99]]))


def test_vae_posterior_shapes():
    model = make_model()
    mel = torch.randn(3, 12, 8)
    q = model.vae_encode(mel)
    assert q.mu.shape == (3, 4)
    assert q.log_var.shape == (3, 4)


def test_teacher_forced_shapes_and_masks():
    model = make_model()
    B, N, M = 2, 5, 11
    tokens = torch.randint(0, 6, (B, N))
    token_lengths = torch.tensor([5, 3])
    mel = torch.randn(B, M, 8)
    mel_lengths = torch.tensor([11, 7])
    z = torch.zeros(B, 4)
    ops = 4
    steps = math.ceil(M / ops)
    res = model.teacher_forced(tokens, token_lengths, mel, mel_lengths, z, ops)
    assert res.pred.shape == (B, steps * ops, 8)
    assert res.stop_logits.shape == (B, steps)
    assert res.attention.shape == (B, steps, N)
    assert res.target.shape == (B, steps * ops, 8)
    # silence padding beyond the true mel
    assert torch.all(res.target[:, M:] == math.log(1e-5))
    # frame mask covers exactly the true lengths
    assert res.frame_mask.sum().item() == 11 + 7
    # stop target fires at the final step of each utterance and after
    assert res.stop_targets[0].tolist() == [0.0, 0.0, 1.0]
    assert res.stop_targets[1].tolist() == [0.0, 1.0, 1.0]


def test_attention_rows_normalized_and_masked():
    model = make_model()
    tokens = torch.randint(0, 6, (2, 6))
    token_lengths = torch.tensor([6, 4])
    mel = torch.randn(2, 8, 8)
    res = model.teacher_forced(
        tokens, token_lengths, mel, torch.tensor([8, 8]), torch.zeros(2, 4), 4
    )
    attn = res.attention
    assert torch.all(attn >= 0)
    torch.testing.assert_close(attn.sum(dim=-1), torch.ones(attn.shape[:2]))
    # padded memory positions receive zero weight
    assert torch.all(attn[1, :, 4:] == 0)


def test_infer_output_shapes():
    model = make_model()
    tokens = torch.randint(0, 6, (1, 4))
    res = model.infer(tokens, torch.zeros(1, 4), outputs_per_step=2, max_steps=10)
    assert res.mel.shape[1] == 8
    assert res.mel.shape[0] % 2 == 0
    assert res.attention.shape[1] == 4
    if res.reached_max_steps:
        assert res.mel.shape[0] == 20
    else:
        assert res.stop_step is not None


def test_infer_deterministic_in_eval():
    model = make_model()
    tokens = torch.tensor([[1, 2, 3]])
    r1 = model.infer(tokens, torch.zeros(1, 4), outputs_per_step=3, max_steps=8)
    r2 = model.infer(tokens, torch.zeros(1, 4), outputs_per_step=3, max_steps=8)
    torch.testing.assert_close(r1.mel, r2.mel)


def test_prenet_dropout_train_only():
    # two teacher-forced passes in train mode differ through prenet dropout;
    # eval passes agree because eval disables it
    model = make_model()
    model.train()
    tokens = torch.randint(0, 6, (1, 4))
    mel = torch.randn(1, 6, 8)
    args = (tokens, torch.tensor([4]), mel, torch.tensor([6]), torch.zeros(1, 4), 3)
    torch.manual_seed(1)
    a = model.teacher_forced(*args).pred
    torch.manual_seed(2)
    b = model.teacher_forced(*args).pred
    assert not torch.allclose(a, b)
    model.eval()
    c = model.teacher_forced(*args).pred
    d = model.teacher_forced(*args).pred
    torch.testing.assert_close(c, d)


def test_loss_zero_for_perfect_prediction():
    B, T, n_mels = 2, 6, 8
    target = torch.randn(B, T, n_mels)
    q = GaussianPosterior(mu=torch.zeros(B, 3), log_var=torch.zeros(B, 3))
    stop_logits = torch.tensor([[-20.0, 20.0], [-20.0, 20.0]])
    stop_targets = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
    mask = torch.ones(B, T, dtype=torch.bool)
    total, report = acoustic_loss(target, target, q, 1.0, stop_logits, stop_targets, mask)
    assert report.l1 == pytest.approx(0.0)
    assert report.kld == pytest.approx(0.0)
    assert report.stop_bce == pytest.approx(0.0, abs=1e-6)
    assert float(total) == pytest.approx(0.0, abs=1e-6)


def test_loss_masked_l1():
    B, T, n_mels = 1, 4, 2
    target = torch.zeros(B, T, n_mels)
    pred = torch.ones(B, T, n_mels)
    # only 2 of 4 frames are real; |diff| = 1 everywhere
    mask = torch.tensor([[True, True, False, False]])
    q = GaussianPosterior(mu=torch.zeros(B, 2), log_var=torch.zeros(B, 2))
    stop_logits = torch.zeros(B, 1)
    stop_targets = torch.ones(B, 1)
    total, report = acoustic_loss(pred, target, q, 0.0, stop_logits, stop_targets, mask)
    assert report.l1 == pytest.approx(1.0)


def test_loss_beta_weighting():
    target = torch.zeros(1, 2, 2)
    q = GaussianPosterior(mu=torch.ones(1, 3), log_var=torch.zeros(1, 3))
    mask = torch.ones(1, 2, dtype=torch.bool)
    stop_logits = torch.full((1, 1), -20.0)
    stop_targets = torch.zeros(1, 1)
    _, r0 = acoustic_loss(target, target, q, 0.0, stop_logits, stop_targets, mask)
    _, r1 = acoustic_loss(target, target, q, 2.0, stop_logits, stop_targets, mask)
    assert r0.kld == pytest.approx(1.5)
    assert r0.total == pytest.approx(0.0, abs=1e-6)
    assert r1.total == pytest.approx(3.0, abs=1e-6)
    assert r1.beta == 2.0


def test_ops_slicing_consistency_constant_target():
    """With a frame-constant target, a step's outputs agree across
    outputs_per_step settings (the first k raw rows coincide)."""
    model = make_model()
    tokens = torch.tensor([[1, 2, 3, 4]])
    lengths = torch.tensor([4])
    M = 20
    mel = torch.randn(1, 1, 8).repeat(1, M, 1)
    mel_lengths = torch.tensor([M])
    z = torch.zeros(1, 4)
    preds = {
        k: model.teacher_forced(tokens, lengths, mel, mel_lengths, z, k).pred for k in (2, 3, 4, 5)
    }
    steps5 = preds[5].shape[1] // 5
    for k in (2, 3, 4):
        steps_k = preds[k].shape[1] // k
        for t in range(min(steps_k, steps5)):
            torch.testing.assert_close(
                preds[k][:, t * k : t * k + k],
                preds[5][:, t * 5 : t * 5 + k],
                rtol=0.0,
                atol=1e-6,
            )


def test_checkpoint_arrays_swap_outputs_per_step():
    """Weights trained at one outputs_per_step drive any other: shapes are
    ops-independent."""
    from desktts.checkpoint import load_module_arrays, module_arrays

    m1 = make_model(seed=0)
    m2 = make_model(seed=1)
    load_module_arrays(m2, module_arrays(m1))
    tokens = torch.tensor([[1, 2]])
    for ops in (1, 2, 3, 4, 5):
        res = m2.infer(tokens, torch.zeros(1, 4), outputs_per_step=ops, max_steps=4)
        assert res.mel.shape[0] % ops == 0


def test_attention_state_shapes():
    model = make_model()
    memory = model.condition_memory(model.encode_phonemes(torch.tensor([[1, 2, 3]])), torch.zeros(1, 4))
    state = model.initial_decoder_state(memory)
    assert isinstance(state.attention, AttentionState)
    torch.testing.assert_close(state.attention.weights.sum(dim=-1), torch.ones(1))
    assert state.attention.weights[0, 0] == 1.0
