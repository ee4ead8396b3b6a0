"""Perceptual compression stage: 256x256 spectrograms <-> C x 32 x 32 latents.

A small convolutional VAE with three stride-2 downsamplings, trained with
pixel MSE plus a tiny KL regularizer.  Encoding during diffusion training is
deterministic (posterior mean); an `adversarial` hook is reserved in the
config surface but intentionally unimplemented at this scale.

The estimator follows the fit/transform idiom: fit trains on a stack of
spectrogram images, transform encodes to latents, inverse_transform decodes
back to [0, 1] images.
"""

from __future__ import annotations

import time

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .audio import FRAMES, MEL_BINS, MelSpectrogram
from .diffusion import LatentSample

__all__ = ["VaeEncoder", "VaeDecoder", "SpectrogramVAE", "save_vae", "load_vae"]


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


def _block(ch_in: int, ch_out: int, stride: int = 1) -> list[nn.Module]:
    return [nn.Conv2d(ch_in, ch_out, 3, stride=stride, padding=1),
            nn.GroupNorm(_groups(ch_out), ch_out), nn.SiLU()]


class VaeEncoder(nn.Module):
    """Strided conv stack, three x2 downsamplings; outputs (mu, logvar)."""

    def __init__(self, latent_channels: int = 1, base_channels: int = 8):
        super().__init__()
        w = base_channels
        self.net = nn.Sequential(
            *_block(1, w, stride=2), *_block(w, w),
            *_block(w, 2 * w, stride=2), *_block(2 * w, 2 * w),
            *_block(2 * w, 4 * w, stride=2), *_block(4 * w, 4 * w),
        )
        self.to_stats = nn.Conv2d(4 * w, 2 * latent_channels, 3, padding=1)

    def forward(self, x):
        mu, logvar = self.to_stats(self.net(x)).chunk(2, dim=1)
        return mu, logvar


class VaeDecoder(nn.Module):
    """Mirrored upsampling stack; output squashed to [0, 1]."""

    def __init__(self, latent_channels: int = 1, base_channels: int = 8):
        super().__init__()
        w = base_channels
        self.net = nn.Sequential(
            *_block(latent_channels, 4 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            *_block(4 * w, 2 * w), *_block(2 * w, 2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            *_block(2 * w, w), *_block(w, w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            *_block(w, w),
            nn.Conv2d(w, 1, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


def vae_loss(encoder: VaeEncoder, decoder: VaeDecoder, x: torch.Tensor,
             kl_weight: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction MSE, KL) for one batch, all element means."""
    mu, logvar = encoder(x)
    recon = decoder(mu)
    rec = torch.mean((recon - x) ** 2)
    kl = -0.5 * torch.mean(1.0 + logvar - mu ** 2 - torch.exp(logvar))
    return rec + kl_weight * kl, rec, kl


class SpectrogramVAE(BaseEstimator, TransformerMixin):
    """Trainable spectrogram autoencoder with deterministic (mean) encoding.

    Parameters
    ----------
    latent_channels : latent depth C; latents have shape (C, 32, 32).
    base_channels : width of the first conv scale.
    epochs, batch_size, lr : training loop knobs (Adam).
    kl_weight : weight of the KL regularizer.
    target_mse : stop early once the epoch reconstruction MSE drops below
        this (0 disables early stopping).
    seed : reproducibility seed for init and batch order.
    """

    def __init__(self, latent_channels: int = 1, base_channels: int = 8,
                 epochs: int = 30, batch_size: int = 8, lr: float = 2e-3,
                 kl_weight: float = 1e-6, target_mse: float = 0.0,
                 seed: int = 0, verbose: bool = False):
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.kl_weight = kl_weight
        self.target_mse = target_mse
        self.seed = seed
        self.verbose = verbose

    # -- estimator plumbing ------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("SpectrogramVAE is not fitted; call fit first")

    @staticmethod
    def _as_batch(X) -> torch.Tensor:
        arr = np.asarray(X, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[:, None, :, :]
        if arr.ndim != 4 or arr.shape[1] != 1:
            raise ValueError(f"expected (N, {MEL_BINS}, {FRAMES}) spectrograms, got {arr.shape}")
        return torch.from_numpy(arr)

    def fit(self, X, y=None, X_val=None):
        """Train on a stack of spectrogram images (N, 256, 256) in [0, 1]."""
        data = self._as_batch(X)
        if len(data) == 0:
            raise ValueError("cannot fit on an empty dataset")
        torch.manual_seed(self.seed)
        self.encoder_ = VaeEncoder(self.latent_channels, self.base_channels)
        self.decoder_ = VaeDecoder(self.latent_channels, self.base_channels)
        params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        optim = torch.optim.Adam(params, lr=self.lr)

        self.history_ = []
        for epoch in range(self.epochs):
            order = np.random.default_rng((self.seed, epoch)).permutation(len(data))
            rec_sum, n_batches = 0.0, 0
            t0 = time.monotonic()
            for start in range(0, len(data), self.batch_size):
                batch = data[order[start:start + self.batch_size]]
                optim.zero_grad()
                total, rec, _ = vae_loss(self.encoder_, self.decoder_, batch, self.kl_weight)
                if not torch.isfinite(total):
                    raise RuntimeError(
                        f"VAE training diverged at epoch {epoch}: loss {total.item()}")
                total.backward()
                optim.step()
                rec_sum += float(rec.detach())
                n_batches += 1
            entry = {"epoch": epoch, "mse": rec_sum / n_batches,
                     "wall_s": time.monotonic() - t0}
            if X_val is not None:
                entry["val_mse"] = self.reconstruction_mse(X_val)
            self.history_.append(entry)
            if self.verbose:
                print(f"vae epoch {epoch}: " + " ".join(
                    f"{k}={v:.5f}" for k, v in entry.items() if k != "epoch"))
            if self.target_mse > 0 and entry["mse"] < self.target_mse:
                break

        with torch.no_grad():
            mus = [self.encoder_(data[i:i + 32])[0] for i in range(0, len(data), 32)]
            self.latent_scale_ = float(torch.cat(mus).std()) or 1.0
        return self

    def transform(self, X) -> np.ndarray:
        """Deterministic latents (posterior means), shape (N, C, 32, 32)."""
        self._check_fitted()
        with torch.no_grad():
            mu, _ = self.encoder_(self._as_batch(X))
        return mu.numpy().astype(np.float64)

    def inverse_transform(self, Z) -> np.ndarray:
        """Decode latents back to (N, 256, 256) images in [0, 1]."""
        self._check_fitted()
        z = torch.as_tensor(np.asarray(Z, dtype=np.float32))
        if z.dim() == 3:
            z = z[None]
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected (N, {self.latent_channels}, 32, 32) latents, got {tuple(z.shape)}")
        with torch.no_grad():
            out = self.decoder_(z)
        return out.squeeze(1).numpy().astype(np.float64)

    # -- domain-facing operations -------------------------------------------

    def encode(self, m: MelSpectrogram) -> LatentSample:
        """Encode one spectrogram into a clean latent."""
        z = self.transform(m.values[None, :, :])[0]
        return LatentSample(z=z, t=0, branch="clean")

    def decode(self, z: LatentSample, norm_min: float | None = None,
               norm_max: float | None = None) -> MelSpectrogram:
        """Decode one clean latent into a spectrogram image."""
        values = self.inverse_transform(np.asarray(z.z)[None])[0]
        kwargs = {}
        if norm_min is not None:
            kwargs["norm_min"] = norm_min
        if norm_max is not None:
            kwargs["norm_max"] = norm_max
        return MelSpectrogram(values=values, **kwargs)

    def reconstruction_mse(self, X) -> float:
        """Mean squared reconstruction error over a spectrogram stack."""
        self._check_fitted()
        data = self._as_batch(X)
        errs = []
        with torch.no_grad():
            for start in range(0, len(data), 32):
                batch = data[start:start + 32]
                mu, _ = self.encoder_(batch)
                errs.append(torch.mean((self.decoder_(mu) - batch) ** 2) * len(batch))
        return float(sum(errs) / len(data))


def save_vae(path, vae: SpectrogramVAE) -> None:
    """Persist a fitted VAE into the shared checkpoint container."""
    from . import checkpoint as ckpt_io

    vae._check_fitted()
    arrays = {}
    arrays.update(ckpt_io.state_to_arrays("encoder", vae.encoder_))
    arrays.update(ckpt_io.state_to_arrays("decoder", vae.decoder_))
    meta = {
        "kind": "vae",
        "config": vae.get_params(),
        "latent_scale": vae.latent_scale_,
        "history": vae.history_,
    }
    ckpt_io.save_container(path, arrays, meta)


def load_vae(path) -> SpectrogramVAE:
    from . import checkpoint as ckpt_io

    arrays, meta = ckpt_io.load_container(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"{path}: not a VAE checkpoint (kind={meta.get('kind')!r})")
    vae = SpectrogramVAE(**meta["config"])
    vae.encoder_ = VaeEncoder(vae.latent_channels, vae.base_channels)
    vae.decoder_ = VaeDecoder(vae.latent_channels, vae.base_channels)
    vae.encoder_.load_state_dict(ckpt_io.arrays_to_state("encoder", arrays))
    vae.decoder_.load_state_dict(ckpt_io.arrays_to_state("decoder", arrays))
    vae.latent_scale_ = float(meta["latent_scale"])
    vae.history_ = meta.get("history", [])
    return vae
