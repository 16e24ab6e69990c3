import json

import numpy as np
import pytest

from desktts.corpus import STATEMENT, YES_NO_QUESTION
from desktts.inference import (
    LATENT_SCHEMES,
    LatentBank,
    LatentBankError,
    LatentScheme,
    build_latent_bank,
    compute_centroid,
    load_latent_bank,
    save_latent_bank,
    select_acoustic_latent,
    vocoder_latent,
)


def sample_latents():
    rng = np.random.default_rng(0)
    ids = ["u0", "u1", "u2", "u3"]
    return {i: rng.normal(size=3).astype(np.float32) for i in ids}


def sample_tags():
    return {"u0": STATEMENT, "u1": YES_NO_QUESTION, "u2": STATEMENT, "u3": YES_NO_QUESTION}


def test_scheme_kinds():
    assert set(LATENT_SCHEMES) == {
        "prior_sample",
        "prior_mean",
        "train_centroid",
        "reference_utterance",
    }


def test_scheme_validation():
    LatentScheme("prior_mean")
    LatentScheme("reference_utterance", reference_id="u0")
    with pytest.raises(ValueError):
        LatentScheme("banana")
    with pytest.raises(ValueError):
        LatentScheme("prior_mean", reference_id="u0")


def test_centroid_is_mean():
    latents = sample_latents()
    c = compute_centroid(latents)
    np.testing.assert_allclose(c, np.mean(list(latents.values()), axis=0), atol=1e-6)
    # subsets: the centroid of any subset is that subset's mean
    subset = {k: latents[k] for k in ["u1", "u3"]}
    np.testing.assert_allclose(
        compute_centroid(subset), (latents["u1"] + latents["u3"]) / 2, atol=1e-6
    )


def test_centroid_empty_raises():
    with pytest.raises(ValueError):
        compute_centroid({})


def test_build_bank_defaults_first_per_tag():
    bank = build_latent_bank(sample_latents(), sample_tags())
    np.testing.assert_array_equal(bank.statement_z, sample_latents()["u0"])
    np.testing.assert_array_equal(bank.question_z, sample_latents()["u1"])
    np.testing.assert_allclose(
        bank.vocoder_centroid_z, compute_centroid(sample_latents()), atol=1e-6
    )
    assert bank.provenance["statement_z"] == "u0"
    assert bank.provenance["question_z"] == "u1"
    assert bank.provenance["vocoder_centroid_z"] == "centroid"


def test_build_bank_designated_ids():
    bank = build_latent_bank(sample_latents(), sample_tags(), statement_id="u2", question_id="u3")
    np.testing.assert_array_equal(bank.statement_z, sample_latents()["u2"])
    np.testing.assert_array_equal(bank.question_z, sample_latents()["u3"])


def test_build_bank_missing_designated_id():
    with pytest.raises(LatentBankError):
        build_latent_bank(sample_latents(), sample_tags(), statement_id="zz")


def test_build_bank_wrong_tag_for_designated_id():
    with pytest.raises(LatentBankError):
        build_latent_bank(sample_latents(), sample_tags(), question_id="u0")


def test_bank_roundtrip(tmp_path):
    bank = build_latent_bank(sample_latents(), sample_tags())
    path = tmp_path / "bank.npz"
    save_latent_bank(path, bank)
    assert path.with_suffix(".json").exists()
    sidecar = json.loads(path.with_suffix(".json").read_text())
    assert sidecar["provenance"] == bank.provenance
    back = load_latent_bank(path)
    np.testing.assert_array_equal(back.statement_z, bank.statement_z)
    np.testing.assert_array_equal(back.question_z, bank.question_z)
    np.testing.assert_array_equal(back.vocoder_centroid_z, bank.vocoder_centroid_z)
    assert set(back.utterance_z) == set(bank.utterance_z)
    for k in bank.utterance_z:
        np.testing.assert_array_equal(back.utterance_z[k], bank.utterance_z[k])
    assert back.provenance == bank.provenance


def test_bank_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError) as exc:
        load_latent_bank(tmp_path / "absent.npz")
    assert "absent.npz" in str(exc.value)


def test_select_prior_mean_zero():
    bank = build_latent_bank(sample_latents(), sample_tags())
    z = select_acoustic_latent(LatentScheme("prior_mean"), STATEMENT, bank, rng=None)
    np.testing.assert_array_equal(z, np.zeros(3, dtype=np.float32))


def test_select_prior_sample_seeded():
    bank = build_latent_bank(sample_latents(), sample_tags())
    z1 = select_acoustic_latent(
        LatentScheme("prior_sample"), STATEMENT, bank, rng=np.random.default_rng(5)
    )
    z2 = select_acoustic_latent(
        LatentScheme("prior_sample"), STATEMENT, bank, rng=np.random.default_rng(5)
    )
    np.testing.assert_array_equal(z1, z2)
    assert not np.allclose(z1, 0.0)
    with pytest.raises(ValueError):
        select_acoustic_latent(LatentScheme("prior_sample"), STATEMENT, bank, rng=None)


def test_select_train_centroid():
    bank = build_latent_bank(sample_latents(), sample_tags())
    z = select_acoustic_latent(LatentScheme("train_centroid"), STATEMENT, bank, rng=None)
    np.testing.assert_array_equal(z, bank.vocoder_centroid_z)


def test_select_reference_by_tag():
    bank = build_latent_bank(sample_latents(), sample_tags())
    scheme = LatentScheme("reference_utterance")
    z_s = select_acoustic_latent(scheme, STATEMENT, bank, rng=None)
    z_q = select_acoustic_latent(scheme, YES_NO_QUESTION, bank, rng=None)
    np.testing.assert_array_equal(z_s, bank.statement_z)
    np.testing.assert_array_equal(z_q, bank.question_z)


def test_select_reference_by_id():
    bank = build_latent_bank(sample_latents(), sample_tags())
    scheme = LatentScheme("reference_utterance", reference_id="u2")
    z = select_acoustic_latent(scheme, YES_NO_QUESTION, bank, rng=None)
    np.testing.assert_array_equal(z, sample_latents()["u2"])
    with pytest.raises(LatentBankError):
        select_acoustic_latent(
            LatentScheme("reference_utterance", reference_id="zz"), STATEMENT, bank, rng=None
        )


def test_vocoder_latent_is_centroid():
    bank = build_latent_bank(sample_latents(), sample_tags())
    np.testing.assert_array_equal(vocoder_latent(bank), bank.vocoder_centroid_z)


def test_bank_without_questions():
    latents = {k: v for k, v in sample_latents().items() if k in ("u0", "u2")}
    tags = {k: STATEMENT for k in latents}
    bank = build_latent_bank(latents, tags)
    assert bank.question_z is None
    with pytest.raises(LatentBankError):
        select_acoustic_latent(
            LatentScheme("reference_utterance"), YES_NO_QUESTION, bank, rng=None
        )


def test_latent_dim_property():
    bank = build_latent_bank(sample_latents(), sample_tags())
    assert bank.latent_dim == 3
