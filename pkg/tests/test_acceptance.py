"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``;
the collected lines are repeated in the terminal summary.  Models are
scaled down (d = 32) so every criterion fits its runtime budget on one core.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from smvae import autodiff as ad
from smvae.baselines import ExpertSet, GaussianPosterior, poe_aggregate
from smvae.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from smvae.cli import main
from smvae.config import TrainConfig
from smvae.data import (ClusterSpec, LinearGaussianSpec, closed_form_log_marginal, gen_clusters, gen_linear_gaussian,
                        load_mnist, sample_subset)
from smvae.errors import FormatError
from smvae.evaluation import CorrelatedGaussianDecoder, FactorizedDecoder, estimate_ctc, estimate_log_likelihoods
from smvae.model import AGGREGATORS, cross_modal_generate, kl_to_prior, noise_shape, subset_elbo
from smvae.nn import ParamStore
from smvae.rng import stream
from smvae.set_encoder import EmbeddingSet, SetEncoder
from smvae.train import build_model, fit

sys.path.insert(0, str(Path(__file__).parent))
from conftest import random_batch, small_model  # noqa: E402

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def small_cfg(**kw):
    base = dict(latent_dim=4, embed_dim=32, heads=2, batch_size=100, lr=1e-3, gamma=1e-3)
    base.update(kw)
    return TrainConfig(**base)


# 1 -------------------------------------------------------------------------------

def test_criterion_01_permutation_invariance():
    t0 = time.perf_counter()
    worst = {}
    for precision, dtype in (("f32", np.float32), ("f64", np.float64)):
        enc = SetEncoder(ParamStore(stream(0, "init"), dtype), 64, 8, 4)
        err = 0.0
        for case in range(200):
            rng = stream(case, "data", 1)
            m = int(rng.integers(1, 6))
            e = rng.standard_normal((4, m, 64)).astype(dtype)
            s = EmbeddingSet(ad.Tensor(e), np.ones((4, m), bool))
            order = rng.permutation(m)
            with ad.no_grad():
                mu, lv = enc(s)
                mu2, lv2 = enc(s.permuted(order))
            err = max(err, np.abs(mu.data - mu2.data).max(), np.abs(lv.data - lv2.data).max())
        worst[precision] = float(err)
    elapsed = time.perf_counter() - t0
    ok = worst["f32"] < 1e-5 and worst["f64"] < 1e-12 and elapsed < 10
    record(1, ok, f"max |delta| f32 {worst['f32']:.2e} (<1e-5), f64 {worst['f64']:.2e} (<1e-12), {elapsed:.1f}s (<10s)")


# 2 -------------------------------------------------------------------------------

def test_criterion_02_gradient_check(capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--precision", "f64"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out.splitlines()
    worst = max(float(line.split()[1]) for line in out[:-1])
    ok = code == 0 and worst < 1e-4 and elapsed < 60
    record(2, ok, f"{len(out) - 1} tensors, worst relative error {worst:.2e} (<1e-4), exit {code}, {elapsed:.1f}s (<60s)")


# 3 -------------------------------------------------------------------------------

def test_criterion_03_elbo_decomposition():
    worst = 0.0
    for case in range(100):
        rng = stream(case, "eval", 3)
        aggregator = AGGREGATORS[case % len(AGGREGATORS)]
        model = small_model(aggregator, seed=case, latent_dim=int(rng.integers(1, 5)))
        batch = random_batch(model, int(rng.integers(2, 7)), seed=case, mask_rate=float(rng.random() * 0.5))
        subset = sample_subset(model.n_modalities, rng, "uniform-nonempty")
        rows = np.flatnonzero((batch.mask & subset).any(axis=1))
        if len(rows) == 0:
            subset = np.ones(model.n_modalities, bool)
            rows = np.arange(len(batch))
        batch = batch.take(rows)
        beta = float(rng.random())
        eps = rng.standard_normal(noise_shape(model, len(batch)))
        terms = subset_elbo(model, batch, subset, beta, eps)
        worst = max(worst, abs(terms.recombined() - float(terms.elbo.data)))
    record(3, worst < 1e-10, f"100 configurations, max |recombined - elbo| {worst:.2e} (<1e-10)")


# 4 -------------------------------------------------------------------------------

def test_criterion_04_kl_closed_form_vs_monte_carlo():
    worst = 0.0
    for case in range(20):
        rng = stream(case, "eval", 4)
        mu = rng.standard_normal((1, 4))
        lv = rng.uniform(-2.0, 2.0, (1, 4))
        post = GaussianPosterior(ad.Tensor(mu), ad.Tensor(lv))
        closed = float(kl_to_prior(post).data[0])
        z = post.sample(rng, 1_000_000)
        log_p = -0.5 * np.sum(np.log(2 * np.pi) + z**2, axis=-1)
        mc = float(np.mean(post.log_prob(z) - log_p))
        worst = max(worst, abs(mc - closed) / closed)
    record(4, worst < 0.01, f"20 Gaussians, 1e6 samples each, max relative gap {worst:.2%} (<1%)")


# 5 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def linear_gaussian_run():
    t0 = time.perf_counter()
    spec = LinearGaussianSpec.random(latent_dim=2, dims=(2, 2), noise=1.0, n=2000, seed=3)
    train = gen_linear_gaussian(spec)
    held_out = LinearGaussianSpec(spec.loadings, spec.offsets, spec.noise, n=100, seed=spec.seed + 1000)
    test = gen_linear_gaussian(held_out)
    cfg = small_cfg(latent_dim=2, epochs=300, anneal_epochs=100, seed=0)
    model = build_model(cfg, train.modalities)
    fit(model, train, cfg)
    batch = test.batch()
    closed = closed_form_log_marginal(spec, {0: batch.data[0]})
    errors = {}
    for K in (10, 100, 1000):
        errors[K] = [float(np.mean(np.abs(estimate_log_likelihoods(model, batch, "x1", K, seed=s).log_px - closed)))
                     for s in range(20)]
    return errors, time.perf_counter() - t0


def test_criterion_05_estimator_oracle(linear_gaussian_run):
    errors, elapsed = linear_gaussian_run
    e10, e1000 = np.mean(errors[10]), np.mean(errors[1000])
    ok = e1000 < 0.5 and e1000 < e10 and elapsed < 600
    record(5, ok, f"mean |log p(x) - closed form|: K=1000 {e1000:.3f} nats (<0.5), K=10 {e10:.3f} "
                  f"(K=1000 must be lower), {elapsed:.0f}s (<600s)")


def test_linear_gaussian_error_shrinks_with_K(linear_gaussian_run):
    errors, _ = linear_gaussian_run
    means = [np.mean(errors[K]) for K in (10, 100, 1000)]
    assert means[0] > means[1] > means[2], means


# 6 -------------------------------------------------------------------------------

def test_criterion_06_conditional_total_correlation():
    t0 = time.perf_counter()
    data = gen_clusters(ClusterSpec(n=500, seed=0))
    cfg = small_cfg(epochs=5, anneal_epochs=2)
    model = build_model(cfg, data.modalities)
    fit(model, data, cfg)
    factorised = estimate_ctc(FactorizedDecoder(model), data.batch(), seed=0, draws=4)
    exact_zero = bool(np.all(factorised.per_sample == 0.0))
    toy = CorrelatedGaussianDecoder(0.8)
    batch, _ = toy.sample(4000, stream(0, "data", 6))
    est = estimate_ctc(toy, batch, seed=0, draws=4).value
    target = -0.5 * np.log(1 - 0.8**2)
    rel = abs(est - target) / target
    elapsed = time.perf_counter() - t0
    ok = exact_zero and rel < 0.10 and elapsed < 120
    record(6, ok, f"factorised CTC identically 0 on {factorised.n_samples} samples: {exact_zero}; "
                  f"rho=0.8 toy {est:.4f} vs {target:.4f} ({rel:.1%}, <10%), {elapsed:.1f}s (<120s)")


# 7 -------------------------------------------------------------------------------

def test_criterion_07_poe_vs_quadrature():
    worst = 0.0
    grid = np.linspace(-15, 15, 60001)
    for case in range(50):
        rng = stream(case, "eval", 7)
        m = int(rng.integers(1, 5))
        mus = rng.standard_normal((1, m, 1)) * 2
        lvs = rng.uniform(-2, 2, (1, m, 1))
        post = poe_aggregate(ExpertSet(ad.Tensor(mus), ad.Tensor(lvs), np.ones((1, m), bool)))
        logd = stats.norm.logpdf(grid)
        for j in range(m):
            logd = logd + stats.norm.logpdf(grid, mus[0, j, 0], np.exp(0.5 * lvs[0, j, 0]))
        d = np.exp(logd - logd.max())
        d /= integrate.trapezoid(d, grid)
        mean = integrate.trapezoid(grid * d, grid)
        var = integrate.trapezoid((grid - mean) ** 2 * d, grid)
        worst = max(worst, abs(mean - post.mu.data[0, 0]), abs(var - np.exp(post.logvar.data[0, 0])))
    same = ExpertSet(ad.Tensor(np.zeros((1, 2, 1))), ad.Tensor(np.zeros((1, 2, 1))), np.ones((1, 2), bool))
    var3 = float(np.exp(poe_aggregate(same).logvar.data[0, 0]))
    ok = worst < 1e-6 and abs(var3 - 1.0 / 3.0) < 1e-15
    record(7, ok, f"50 expert sets, max |mean/var gap| {worst:.2e} (<1e-6); identical experts + prior: var {var3!r}")


# 8 -------------------------------------------------------------------------------

def test_criterion_08_cross_modal_behaviour():
    t0 = time.perf_counter()
    spec = ClusterSpec(n_clusters=2, dim=2, n=1000, seed=8)
    data = gen_clusters(spec)
    train, test = data.split(8)
    cfg = small_cfg(epochs=50, anneal_epochs=25, seed=8)
    model = build_model(cfg, data.modalities)
    fit(model, train, cfg)
    labels = np.arange(200) % 2
    observed = test.batch(np.arange(200))
    observed.data[1] = np.eye(2)[labels]
    gen = cross_modal_generate(model, observed.restrict([False, True]), "vector", stream(8, "generate"), "sample")
    nearest = np.argmin(((gen[:, None, :] - spec.means[None]) ** 2).sum(-1), axis=1)
    acc_vec = float(np.mean(nearest == labels))
    probs = cross_modal_generate(model, test.batch().restrict([True, False]), "label", stream(8, "generate"))
    acc_lab = float(np.mean(probs.argmax(1) == test.labels))
    elapsed = time.perf_counter() - t0
    ok = acc_vec >= 0.90 and acc_lab >= 0.95 and elapsed < 300
    record(8, ok, f"label->vector cluster match {acc_vec:.1%} (>=90%), vector->label accuracy {acc_lab:.1%} "
                  f"(>=95%), {elapsed:.0f}s (<300s)")


# 9 -------------------------------------------------------------------------------

def degradation(model, batch, K, seed):
    full = estimate_log_likelihoods(model, batch, "vector+label", K, seed).means()["log_pxy"]
    worst = 0.0
    for single in ("vector", "label"):
        value = estimate_log_likelihoods(model, batch, single, K, seed).means()["log_pxy"]
        worst = max(worst, (full - value) / abs(full))
    return worst


def test_criterion_09_missing_modality_robustness():
    t0 = time.perf_counter()
    wins, smvae_ok, details = 0, True, []
    for seed in range(5):
        data = gen_clusters(ClusterSpec(n_clusters=2, dim=16, n=1000, seed=seed))
        train, test = data.split(seed)
        batch = test.batch(np.arange(100))
        result = {}
        for aggregator, policy in (("smvae", "uniform-proper"), ("poe", "none")):
            cfg = small_cfg(epochs=50, anneal_epochs=25, seed=seed, aggregator=aggregator, subset_policy=policy)
            model = build_model(cfg, data.modalities)
            fit(model, train, cfg)
            result[aggregator] = degradation(model, batch, K=50, seed=seed)
        smvae_ok &= result["smvae"] < 0.30
        wins += result["poe"] > result["smvae"]
        details.append(f"{result['smvae']:.1%}/{result['poe']:.1%}")
    elapsed = time.perf_counter() - t0
    ok = smvae_ok and wins >= 3 and elapsed < 900
    record(9, ok, f"worst single-modality degradation smvae/poe per seed: {', '.join(details)}; "
                  f"smvae all <30%: {smvae_ok}; poe worse on {wins}/5 seeds (>=3), {elapsed:.0f}s (<900s)")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    data = tmp_path / "d.smvd"
    main(["gen-data", "--out", str(data), "--set", "data.n=400"])
    args = ["--set", "model.latent_dim=4", "--set", "model.embed_dim=32", "--set", "model.heads=2",
            "--set", "train.epochs=3", "--set", "train.batch_size=50", "--seed", "11"]
    codes = [main(["train", "--data", str(data), "--out", str(tmp_path / run), *args]) for run in ("a", "b")]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("metrics.jsonl", "checkpoint.smva"))
    rows = len((tmp_path / "a" / "metrics.jsonl").read_text().splitlines())
    record(10, codes == [0, 0] and same and rows > 0,
           f"two train runs (seed 11): metrics ({rows} rows) and checkpoint byte-identical: {same}")


# 11 ------------------------------------------------------------------------------

def test_criterion_11_checkpoint_integrity(tmp_path):
    model = small_model(precision="f32", seed=4)
    path = tmp_path / "m.smva"
    save_checkpoint(model, path)
    clone = load_checkpoint(small_model(precision="f32", seed=5), path)
    exact = all(clone.params[k].data.tobytes() == p.data.tobytes() for k, p in model.params.items())
    raw = path.read_bytes()
    rejected = 0
    corruptions = [raw[: len(raw) // 2], raw[:-1], raw[:20] + bytes([raw[20] ^ 0x10]) + raw[21:],
                   raw[:-10] + bytes([raw[-10] ^ 0x01]) + raw[-9:]]
    for i, bad in enumerate(corruptions):
        p = tmp_path / f"bad{i}.smva"
        p.write_bytes(bad)
        try:
            read_checkpoint(p)
        except FormatError:
            rejected += 1
    record(11, exact and rejected == len(corruptions),
           f"round-trip bit-exact: {exact}; corrupted files rejected {rejected}/{len(corruptions)}")


# 12 (optional) -----------------------------------------------------------------------

MNIST_DIR = Path(os.environ.get("SMVAE_MNIST_DIR", "data/mnist"))


@pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(),
                    reason="MNIST IDX files not found (set SMVAE_MNIST_DIR); optional criterion")
def test_criterion_12_mnist_optional():
    data = load_mnist(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte", limit=10000)
    cfg = TrainConfig(epochs=10, anneal_epochs=5)
    model = build_model(cfg, data.modalities)
    rows = fit(model, data, cfg)
    per_epoch = [np.mean([r["elbo"] for r in rows if r["epoch"] == e]) for e in range(cfg.epochs)]
    ok = all(b > a for a, b in zip(per_epoch[cfg.anneal_epochs:], per_epoch[cfg.anneal_epochs + 1:]))
    record(12, ok, f"per-epoch mean ELBO after warm-up: {', '.join(f'{v:.1f}' for v in per_epoch)}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
