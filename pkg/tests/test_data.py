import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from smvae.data import (ClusterSpec, LinearGaussianSpec, MultimodalDataset, closed_form_log_marginal, encode_idx,
                        gen_clusters, gen_linear_gaussian, images_to_unit, load_dataset, load_idx, load_mnist,
                        parse_idx, save_dataset, write_idx)
from smvae.errors import ConfigError, FormatError, PairingError
from smvae.modality import ModalityBatch, ModalitySpec


# -- IDX ------------------------------------------------------------------------

def test_idx_header_is_big_endian():
    buf = encode_idx(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert buf[:4] == b"\x00\x00\x08\x02"
    assert struct.unpack(">II", buf[4:12]) == (2, 3)


@given(st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
       st.lists(st.integers(1, 4), min_size=1, max_size=3))
@settings(max_examples=30, deadline=None)
def test_idx_round_trip(dtype, shape):
    arr = (np.arange(int(np.prod(shape))) % 100).astype(dtype).reshape(shape)
    out = parse_idx(encode_idx(arr))
    assert out.shape == arr.shape and np.array_equal(out, arr)


def test_idx_file_round_trip_native_order(tmp_path):
    arr = np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)
    write_idx(tmp_path / "a.idx", arr)
    out = load_idx(tmp_path / "a.idx")
    assert out.dtype.isnative and np.array_equal(out, arr)


@pytest.mark.parametrize("cut", [2, 9, 20])
def test_truncated_idx_reports_offset(cut):
    buf = encode_idx(np.zeros((2, 3, 3), dtype=np.uint8))[:cut]
    with pytest.raises(FormatError, match="byte offset"):
        parse_idx(buf, "x.idx")


def test_bad_idx_magic():
    with pytest.raises(FormatError, match="magic"):
        parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01\x05")


def test_mnist_pairing_and_binarisation(tmp_path):
    images = np.array([[[0, 200], [128, 127]], [[255, 0], [0, 0]]], dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", np.array([3, 7], dtype=np.uint8))
    ds = load_mnist(tmp_path / "img", tmp_path / "lab")
    assert ds.modalities[0].shape == (2, 2) and ds.modalities[1].shape == (10,)
    np.testing.assert_array_equal(ds.arrays[0][0], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(ds.arrays[1].argmax(1), [3, 7])
    write_idx(tmp_path / "lab3", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(PairingError):
        load_mnist(tmp_path / "img", tmp_path / "lab3")


def test_images_to_unit_continuous():
    np.testing.assert_allclose(images_to_unit(np.array([0, 255], dtype=np.uint8), binarize=False), [0.0, 1.0])


# -- synthetic generators ---------------------------------------------------------------

def test_linear_gaussian_closed_form_matches_scipy():
    spec = LinearGaussianSpec.random(latent_dim=2, dims=(2, 3), noise=0.7, n=50, seed=4)
    ds = gen_linear_gaussian(spec)
    w = np.vstack(spec.loadings)
    cov = w @ w.T + np.diag(np.full(5, 0.49))
    mean = np.concatenate(spec.offsets)
    joint = np.concatenate(ds.arrays, axis=1)
    ref = stats.multivariate_normal(mean, cov).logpdf(joint)
    np.testing.assert_allclose(closed_form_log_marginal(spec, {0: ds.arrays[0], 1: ds.arrays[1]}), ref, rtol=1e-10)
    ref0 = stats.multivariate_normal(mean[:2], cov[:2, :2]).logpdf(ds.arrays[0])
    np.testing.assert_allclose(closed_form_log_marginal(spec, {0: ds.arrays[0]}), ref0, rtol=1e-10)


def test_linear_gaussian_sample_moments():
    spec = LinearGaussianSpec.random(2, (2,), noise=0.5, n=40000, seed=1)
    x = gen_linear_gaussian(spec).arrays[0]
    w = spec.loadings[0]
    np.testing.assert_allclose(x.mean(0), spec.offsets[0], atol=0.03)
    np.testing.assert_allclose(np.cov(x.T), w @ w.T + 0.25 * np.eye(2), atol=0.05)


def test_zero_noise_is_rejected():
    spec = LinearGaussianSpec([[[1.0]]], [[0.0]], [0.0])
    with pytest.raises(ConfigError):
        gen_linear_gaussian(spec)
    with pytest.raises(np.linalg.LinAlgError):
        closed_form_log_marginal(LinearGaussianSpec([[[1.0], [1.0]]], [[0.0, 0.0]], [0.0]), {0: np.zeros((1, 2))})


def test_clusters_are_paired_and_deterministic():
    spec = ClusterSpec(n=1000, seed=3)
    a, b = gen_clusters(spec), gen_clusters(ClusterSpec(n=1000, seed=3))
    assert len(a) == 1000
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))
    np.testing.assert_array_equal(a.arrays[1].argmax(1), a.labels)
    means = np.array([a.arrays[0][a.labels == c].mean(0) for c in range(2)])
    np.testing.assert_allclose(means, spec.means, atol=0.15)


def test_label_noise_flips_expected_fraction():
    ds = gen_clusters(ClusterSpec(n_clusters=3, n=20000, label_noise=0.2, seed=0))
    flipped = np.mean(ds.arrays[1].argmax(1) != ds.labels)
    assert flipped == pytest.approx(0.2, abs=0.02)


def test_split_is_deterministic_and_disjoint():
    ds = gen_clusters(ClusterSpec(n=100))
    tr, te = ds.split(5)
    assert len(tr) == 70 and len(te) == 30
    tr2, _ = ds.split(5)
    assert np.array_equal(tr.arrays[0], tr2.arrays[0])


def test_dataset_container_round_trip(tmp_path):
    spec = LinearGaussianSpec.random(2, (2, 2), n=20, seed=2)
    ds = gen_linear_gaussian(spec)
    save_dataset(ds, tmp_path / "d.smvd")
    back = load_dataset(tmp_path / "d.smvd")
    assert [m.describe() for m in back.modalities] == [m.describe() for m in ds.modalities]
    np.testing.assert_array_equal(back.arrays[0], ds.arrays[0].astype(np.float32))
    rebuilt = LinearGaussianSpec.from_meta(back.meta)
    np.testing.assert_array_equal(rebuilt.loadings[1], spec.loadings[1])


def test_dataset_rejects_mismatched_modalities():
    m = [ModalitySpec("a", "real-vector", (2,)), ModalitySpec("b", "real-vector", (2,))]
    with pytest.raises(PairingError):
        MultimodalDataset(m, [np.zeros((3, 2)), np.zeros((4, 2))])
    with pytest.raises(FormatError):
        MultimodalDataset(m, [np.zeros((3, 2)), np.zeros((3, 3))])


def test_modality_spec_parsing_and_defaults():
    spec = ModalitySpec.parse("image:binary-image:28x28")
    assert spec.shape == (28, 28) and spec.weight == 1.0 and spec.likelihood == "bernoulli"
    assert ModalitySpec.parse("label:one-hot-label:10").weight == 10.0
    with pytest.raises(ConfigError):
        ModalitySpec.parse("image:jpeg:28x28")
    with pytest.raises(ConfigError):
        ModalitySpec.parse("garbage")


def test_batch_restrict_and_take():
    b = ModalityBatch([np.zeros((3, 1)), np.ones((3, 2))])
    r = b.restrict([True, False])
    assert r.mask[:, 1].sum() == 0 and b.mask.all()
    assert len(b.take([0, 2])) == 2
