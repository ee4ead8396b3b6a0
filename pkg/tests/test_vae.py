import numpy as np
import pytest
import torch
from sklearn.exceptions import NotFittedError

from beatdiff.audio import MelSpectrogram, wav_to_mel
from beatdiff.conditioning import synth_rhythm_sequence
from beatdiff.diffusion import CLEAN, LatentSample
from beatdiff.vae import (SpectrogramVAE, VaeDecoder, VaeEncoder, load_vae,
                          save_vae, vae_loss)

from fd_check import worst_group_rel_error


def small_corpus(n=6):
    mels = []
    for i in range(n):
        _, w = synth_rhythm_sequence([90.0, 120.0, 150.0][i % 3], 5.0, 30.0, seed=i)
        mels.append(wav_to_mel(w).values)
    return np.stack(mels)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    X = small_corpus(6)
    vae = SpectrogramVAE(base_channels=4, epochs=3, batch_size=2, lr=1e-3, seed=0)
    return vae.fit(X), X


class TestShapes:
    def test_transform_and_inverse_shapes(self, fitted):
        vae, X = fitted
        Z = vae.transform(X[:2])
        assert Z.shape == (2, 1, 32, 32)
        back = vae.inverse_transform(Z)
        assert back.shape == (2, 256, 256)
        assert back.min() >= 0.0 and back.max() <= 1.0

    def test_encode_decode_domain_objects(self, fitted):
        vae, X = fitted
        m = MelSpectrogram(values=X[0])
        z = vae.encode(m)
        assert isinstance(z, LatentSample)
        assert z.t == 0 and z.branch == CLEAN
        assert np.shape(z.z) == (1, 32, 32)
        out = vae.decode(z, norm_min=0.0, norm_max=12.0)
        assert out.values.shape == (256, 256)
        assert out.norm_max == 12.0

    def test_deterministic_encoding(self, fitted):
        vae, X = fitted
        np.testing.assert_array_equal(vae.transform(X[:1]), vae.transform(X[:1]))

    def test_rejects_bad_shapes(self, fitted):
        vae, _ = fitted
        with pytest.raises(ValueError):
            vae.transform(np.zeros((2, 128, 128, 3)))
        with pytest.raises(ValueError):
            vae.inverse_transform(np.zeros((2, 3, 32, 32)))


class TestFitContract:
    def test_not_fitted_errors(self):
        vae = SpectrogramVAE()
        with pytest.raises(NotFittedError):
            vae.transform(np.zeros((1, 256, 256)))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            SpectrogramVAE().fit(np.zeros((0, 256, 256)))

    def test_memorizes_single_spectrogram(self):
        X = small_corpus(1)
        vae = SpectrogramVAE(base_channels=4, epochs=150, batch_size=1, lr=4e-3,
                             target_mse=2e-3, seed=0)
        vae.fit(X)
        assert vae.reconstruction_mse(X) < 5e-3

    def test_running_average_loss_non_increasing(self, fitted):
        vae, _ = fitted
        mses = [h["mse"] for h in vae.history_]
        running = np.cumsum(mses) / np.arange(1, len(mses) + 1)
        assert running[-1] < running[0]
        assert all(b <= a * 1.05 for a, b in zip(running, running[1:]))

    def test_information_bottleneck_direction(self):
        # an identity-sized latent (64 x 32 x 32 = 256 x 256 values) with no
        # KL pressure must beat the 1 x 32 x 32 bottleneck at reconstruction
        X = small_corpus(4)
        kw = dict(base_channels=4, epochs=4, batch_size=2, lr=1e-3, seed=1)
        wide = SpectrogramVAE(latent_channels=64, kl_weight=0.0, **kw).fit(X)
        narrow = SpectrogramVAE(latent_channels=1, **kw).fit(X)
        assert wide.reconstruction_mse(X) < narrow.reconstruction_mse(X)

    def test_divergence_aborts_with_diagnostic(self):
        X = small_corpus(2)
        vae = SpectrogramVAE(base_channels=4, epochs=2, batch_size=1, lr=1e18, seed=0)
        with pytest.raises(RuntimeError, match="diverged"):
            vae.fit(X)

    def test_latent_scale_estimated(self, fitted):
        vae, _ = fitted
        assert vae.latent_scale_ > 0


class TestCheckpoint:
    def test_round_trip(self, fitted, tmp_path):
        vae, X = fitted
        save_vae(tmp_path / "vae.npz", vae)
        back = load_vae(tmp_path / "vae.npz")
        np.testing.assert_array_equal(back.transform(X[:2]), vae.transform(X[:2]))
        assert back.latent_scale_ == vae.latent_scale_

    def test_kind_checked(self, fitted, tmp_path):
        from beatdiff.checkpoint import save_container

        save_container(tmp_path / "other.npz", {}, {"kind": "diffusion"})
        with pytest.raises(ValueError, match="VAE"):
            load_vae(tmp_path / "other.npz")


def test_gradients_match_finite_differences_miniature():
    torch.manual_seed(1)
    enc = VaeEncoder(latent_channels=1, base_channels=2).double()
    dec = VaeDecoder(latent_channels=1, base_channels=2).double()
    x = torch.as_tensor(np.random.default_rng(3).uniform(0, 1, (2, 1, 8, 8)))

    def loss_fn():
        return vae_loss(enc, dec, x, 1e-6)[0]

    params = list(enc.parameters()) + list(dec.parameters())
    assert worst_group_rel_error(loss_fn, params, seed=2) < 1e-4
