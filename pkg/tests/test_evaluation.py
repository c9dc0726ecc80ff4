import csv
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from smvae import autodiff as ad
from smvae.errors import ConfigError, FormatError, NumericError
from smvae.evaluation import (CorrelatedGaussianDecoder, FactorizedDecoder, LikelihoodReport, _robust_lme, estimate_ctc,
                              estimate_log_likelihoods, export_latents, log_mean_exp, write_jsonl)
from smvae.data import ClusterSpec, gen_clusters
from smvae.modality import ModalityBatch, ModalitySpec
from smvae.model import SmvaeModel
from smvae.rng import stream

from conftest import random_batch, small_model


def test_log_mean_exp_basics():
    assert log_mean_exp([2.5, 2.5, 2.5]) == 2.5
    assert log_mean_exp([0.0, -1e30]) == pytest.approx(np.log(0.5))
    with pytest.raises(ValueError):
        log_mean_exp([])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_log_mean_exp_matches_direct_formula(values):
    direct = np.log(np.mean(np.exp(np.array(values))))
    assert abs(log_mean_exp(values) - direct) < 1e-10


def test_log_mean_exp_survives_large_values():
    v = np.array([1000.0, 1001.0])
    assert log_mean_exp(v) == pytest.approx(logsumexp(v) - np.log(2), abs=1e-12)


def test_dead_weights_are_dropped_and_counted(caplog):
    counter = [0]
    with caplog.at_level(logging.WARNING):
        assert _robust_lme(np.array([0.0, np.nan, 0.0]), counter) == 0.0
    assert counter == [1] and "dropped 1" in caplog.text
    with pytest.raises(NumericError):
        _robust_lme(np.array([np.inf, np.nan]), counter)


def constant_model():
    """Decoder ignores z and q(z|.) equals the prior."""
    mods = [ModalitySpec("x", "real-vector", (2,)), ModalitySpec("y", "one-hot-label", (3,))]
    model = SmvaeModel(mods, latent_dim=2, embed_dim=8, heads=2, precision="f64")
    model.params["set.out.weight"].data[:] = 0.0
    model.params["set.out.bias"].data[:] = 0.0
    for name, p in model.params.items():
        if name.startswith("decode.") and name.endswith(".0.weight"):
            p.data[:] = 0.0
    return model


@pytest.mark.parametrize("K", [1, 7, 300])
def test_constant_weights_give_exact_likelihood(K):
    model = constant_model()
    batch = random_batch(model, 4)
    report = estimate_log_likelihoods(model, batch, ["x", "y"], K, seed=1)
    with ad.no_grad():
        params = model.decode_one(0, np.zeros((4, 2)))
        exact = model.log_likelihood(0, params, batch.data[0]).data
    np.testing.assert_array_equal(report.log_px, exact)


def test_estimates_are_deterministic_and_chunk_independent(monkeypatch):
    model = small_model(latent_dim=2)
    batch = random_batch(model, 7, seed=2, mask_rate=0.0)
    a = estimate_log_likelihoods(model, batch, "image", 20, seed=3, target="image")
    b = estimate_log_likelihoods(model, batch, "image", 20, seed=3, target="image")
    monkeypatch.setattr("smvae.evaluation.CHUNK_ROWS", 20)  # one sample per chunk
    c = estimate_log_likelihoods(model, batch, "image", 20, seed=3, target="image")
    assert np.array_equal(a.log_px, b.log_px)
    np.testing.assert_allclose(a.log_pxy, c.log_pxy, rtol=1e-12)
    assert np.all(np.isfinite(a.log_px_given_y))


def test_estimator_rejects_bad_arguments():
    model = small_model()
    batch = random_batch(model, 2)
    with pytest.raises(ConfigError):
        estimate_log_likelihoods(model, batch, "image", 0)
    with pytest.raises(ConfigError):
        estimate_log_likelihoods(model, batch, [], 5)
    with pytest.raises(ConfigError, match="unknown modality"):
        estimate_log_likelihoods(model, batch, "audio", 5)


def test_moe_model_can_be_evaluated():
    model = small_model("moe", latent_dim=2)
    report = estimate_log_likelihoods(model, random_batch(model, 3), "image+label", 10, seed=0)
    assert np.all(np.isfinite(report.log_px))


def test_report_records_have_required_keys(tmp_path):
    rep = LikelihoodReport(np.array([-1.0, -2.0]), np.array([-3.0, -4.0]), np.array([-0.5, -0.6]), "x", "x", 10)
    rows = rep.records(seed=4)
    assert len(rows) == 3 * 2 + 3
    assert all({"metric", "subset", "K", "value", "seed"} <= set(r) for r in rows)
    summary = [r for r in rows if r.get("summary")]
    assert {r["metric"]: r["value"] for r in summary}["log_px"] == -1.5
    write_jsonl(tmp_path / "m.jsonl", rows)
    assert [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()] == rows


def test_ctc_is_exactly_zero_for_factorised_decoders():
    model = small_model(latent_dim=2)
    report = estimate_ctc(FactorizedDecoder(model), random_batch(model, 8, seed=1), seed=0, draws=3)
    assert np.all(report.per_sample == 0.0) and report.value == 0.0


# The per-draw standard deviation is about 0.5 nats at rho = 0.5 against a
# target of 0.144, so the weaker correlation needs more samples for 10%.
@pytest.mark.parametrize("rho, loadings, n", [(0.8, (1.0, 1.0), 2000), (0.5, (2.0, -0.5), 20000)])
def test_ctc_matches_analytic_mutual_information(rho, loadings, n):
    dec = CorrelatedGaussianDecoder(rho, loadings)
    batch, _ = dec.sample(n, stream(0, "data"))
    assert estimate_ctc(dec, batch, seed=1, draws=4).value == pytest.approx(dec.analytic_ctc, rel=0.1)


def test_ctc_of_independent_noise_is_near_zero():
    dec = CorrelatedGaussianDecoder(0.0)
    batch, _ = dec.sample(500, stream(0, "data"))
    assert abs(estimate_ctc(dec, batch).value) < 0.02


def test_ctc_requires_joint_density():
    class NoJoint:
        pass

    with pytest.raises(ConfigError, match="joint density"):
        estimate_ctc(NoJoint(), None)


def test_correlated_decoder_posterior_is_exact():
    dec = CorrelatedGaussianDecoder(0.6, (1.0, 0.5))
    batch, _ = dec.sample(3, stream(1, "data"))
    post = dec.posterior(batch)
    grid = np.linspace(-8, 8, 40001)[:, None, None]
    logjoint = dec.log_joint_likelihood(batch, np.broadcast_to(grid, (40001, 1, 1)).transpose(1, 0, 2).repeat(3, 0))
    logpost = logjoint - 0.5 * grid[:, 0, 0] ** 2
    w = np.exp(logpost - logpost.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose((w * grid[:, 0, 0]).sum(1), post.mu.data[:, 0], atol=1e-6)


def test_export_latents(tmp_path):
    ds = gen_clusters(ClusterSpec(n=10))
    model = SmvaeModel(ds.modalities, latent_dim=3, embed_dim=8, heads=2)
    n = export_latents(model, ds, ["vector+label", "vector", "label"], tmp_path / "lat.csv")
    rows = list(csv.reader((tmp_path / "lat.csv").open()))
    assert n == 30 and len(rows) == 31
    assert rows[0] == ["sample", "subset", "label", "mu_0", "mu_1", "mu_2"]
    with ad.no_grad():
        mu = model.infer(ds.batch().restrict([True, False])).mu.data
    vec_rows = [r for r in rows[1:] if r[1] == "vector"]
    np.testing.assert_allclose(np.array([[float(v) for v in r[3:]] for r in vec_rows]), mu, atol=1e-6)
    by_subset = {s: np.array([[float(v) for v in r[3:]] for r in rows[1:] if r[1] == s]) for s in ("vector", "label")}
    assert not np.allclose(by_subset["vector"], by_subset["label"])


def test_export_latents_io_error_names_path(tmp_path):
    ds = gen_clusters(ClusterSpec(n=2))
    model = SmvaeModel(ds.modalities, latent_dim=2, embed_dim=8, heads=2)
    with pytest.raises(FormatError, match="missing"):
        export_latents(model, ds, ["vector"], tmp_path / "missing" / "lat.csv")
