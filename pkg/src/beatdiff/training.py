"""Bi-directional denoising objective, training loop, and generation.

One denoiser serves both branches.  Each training example is noised to a
shared timestep along the positive (+eps) and negative (-eps) chains; the
loss blends the two noise-prediction errors,

    alpha * ||eps - eps_hat(z_t_pos, t, c_pos)||^2
    + (1 - alpha) * ||-eps - eps_hat(z_t_neg, t, c_neg)||^2

with mean-square reduction over latent elements and batch.  A zero-weight
branch is skipped entirely, which makes the single-branch ablations exact
special cases.  Inference uses the positive conditioning only.

Training modes:
    PN    reverse-played negative conditioning (the full objective)
    P     positive only (alpha forced to 1)
    N     negative only (alpha forced to 0)
    RN    negative conditioning from a randomly chosen other clip
    DN    negative conditioning is the negated positive vector
    PN-V  visual stream only (motion half of c zero-masked)
    PN-M  motion stream only (visual half of c zero-masked)
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import checkpoint as ckpt_io
from .audio import DEFAULT_LOG_MAX, MelSpectrogram, Waveform, mel_to_wav
from .conditioning import (ConditionEncoder, ConditionPair, FeatureSequence,
                           MotionEncoder, VisualRhythmEncoder, reverse_sequence)
from .diffusion import CLEAN, LatentSample, NoisePair, diffuse_pair, sample
from .schedule import NoiseSchedule, build_linear_schedule
from .vae import SpectrogramVAE

__all__ = ["MODES", "TrainConfig", "bidirectional_loss", "BeatDiffusionModel",
           "train", "generate", "load_model", "save_model"]

# mode -> (conditioning variant, forced alpha or None, mask_visual, mask_motion)
MODES = {
    "PN": ("reverse", None, False, False),
    "P": ("none", 1.0, False, False),
    "N": ("reverse", 0.0, False, False),
    "RN": ("random", None, False, False),
    "DN": ("negated", None, False, False),
    "PN-V": ("reverse", None, False, True),
    "PN-M": ("reverse", None, True, False),
}


@dataclass
class TrainConfig:
    """Knobs of one diffusion training run."""

    alpha: float = 0.1
    mode: str = "PN"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 100
    max_steps: int = 0          # 0 = no step cap
    grad_clip: float = 1.0
    ema_decay: float = 0.0      # 0 = EMA off
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean((a - b) ** 2)


def bidirectional_loss(p, z0: LatentSample, pair: ConditionPair, t: int,
                       eps: NoisePair, s: NoiseSchedule, alpha: float) -> torch.Tensor:
    """Blended two-branch noise-prediction loss at one shared timestep.

    `p` is any callable (z_t, t, c) -> noise estimate operating on the same
    array shape as z0.  With alpha = 1 this is bitwise the single-branch
    loss on the positive chain; a missing negative conditioning is an error
    whenever alpha < 1.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha < 1.0 and pair.c_neg is None:
        raise ValueError("negative conditioning is required when alpha < 1")
    z_pos, z_neg = diffuse_pair(z0, t, eps, s)
    loss = torch.zeros(())
    if alpha > 0.0:
        loss = loss + alpha * _mse(torch.as_tensor(eps.eps), p(z_pos.z, t, pair.c_pos))
    if alpha < 1.0:
        loss = loss + (1.0 - alpha) * _mse(torch.as_tensor(eps.eps_neg), p(z_neg.z, t, pair.c_neg))
    return loss


class BeatDiffusionModel(BaseEstimator):
    """Dance-feature conditioned latent diffusion generator.

    fit() trains the denoiser and both conditioning encoders jointly on
    (latent, feature-sequence) pairs; latents are expected pre-scaled to
    roughly unit std.  generate_latent() runs the full reverse chain under
    the positive conditioning of one sequence.
    """

    def __init__(self, alpha: float = 0.1, mode: str = "PN", T: int = 1000,
                 beta_start: float = 1e-4, beta_end: float = 0.02,
                 batch_size: int = 32, lr: float = 1e-4, epochs: int = 10,
                 max_steps: int = 0, grad_clip: float = 1.0, ema_decay: float = 0.0,
                 widths: tuple[int, ...] = (16, 32, 64, 64), res_units: int = 2,
                 time_dim: int = 64, cross_attention: bool = False,
                 d_p: int = 64, d_q: int = 32, visual_frozen: bool = False,
                 seed: int = 0, verbose: bool = False):
        self.alpha = alpha
        self.mode = mode
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.max_steps = max_steps
        self.grad_clip = grad_clip
        self.ema_decay = ema_decay
        self.widths = widths
        self.res_units = res_units
        self.time_dim = time_dim
        self.cross_attention = cross_attention
        self.d_p = d_p
        self.d_q = d_q
        self.visual_frozen = visual_frozen
        self.seed = seed
        self.verbose = verbose

    # -- construction --------------------------------------------------------

    def _effective(self) -> tuple[str, float, bool, bool]:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        variant, forced_alpha, mask_v, mask_m = MODES[self.mode]
        alpha = self.alpha if forced_alpha is None else forced_alpha
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return variant, alpha, mask_v, mask_m

    def _build(self, d_v: int, n_joints: int, latent_channels: int) -> None:
        from .denoiser import ConditionalUNet

        variant, _, mask_v, mask_m = self._effective()
        torch.manual_seed(self.seed)
        self.visual_ = VisualRhythmEncoder(d_v=d_v, d_p=self.d_p)
        self.motion_ = MotionEncoder(n_joints=n_joints, d_q=self.d_q)
        self.cond_encoder_ = ConditionEncoder(self.visual_, self.motion_,
                                              mask_visual=mask_v, mask_motion=mask_m)
        self.denoiser_ = ConditionalUNet(
            in_channels=latent_channels, widths=tuple(self.widths),
            res_units=self.res_units, time_dim=self.time_dim,
            cond_dim=self.d_p + self.d_q, cross_attention=self.cross_attention)
        self.schedule_ = build_linear_schedule(self.T, self.beta_start, self.beta_end)
        self.variant_ = variant
        self.history_ = []
        self.epochs_run_ = 0
        self.latent_scale_ = 1.0
        self._init_optimizer()
        self._ema = None
        if self.ema_decay > 0.0:
            self._ema = {k: v.detach().clone()
                         for k, v in self.denoiser_.state_dict().items()}

    def _trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = list(self.denoiser_.parameters()) + list(self.motion_.parameters())
        if not self.visual_frozen:
            params += list(self.visual_.parameters())
        return params

    def _init_optimizer(self) -> None:
        self._optimizer = torch.optim.RMSprop(self._trainable_parameters(), lr=self.lr)

    def _check_fitted(self):
        if not hasattr(self, "denoiser_"):
            raise NotFittedError("BeatDiffusionModel is not fitted; call fit first")

    # -- training ------------------------------------------------------------

    def fit(self, latents, seqs: list[FeatureSequence], log_file=None,
            checkpoint_dir=None, start_epoch: int = 0):
        """Train on pre-encoded latents (N, C, 32, 32) and their sequences.

        With start_epoch > 0 the existing modules and optimizer state are
        kept and training continues; per-epoch seeding makes the resumed
        trajectory identical to an uninterrupted run.
        """
        z0 = torch.as_tensor(np.asarray(latents, dtype=np.float32))
        if z0.dim() != 4:
            raise ValueError(f"latents must be (N, C, H, W), got {tuple(z0.shape)}")
        if len(z0) == 0 or len(seqs) != len(z0):
            raise ValueError("latents and feature sequences must be non-empty and aligned")
        variant, alpha, _, _ = self._effective()
        if variant == "random" and len(seqs) < 2:
            raise ValueError("mode RN needs at least 2 clips to draw negatives from")
        if start_epoch == 0:
            self._build(d_v=seqs[0].frames.shape[1], n_joints=seqs[0].poses.shape[1],
                        latent_channels=z0.shape[1])
        else:
            self._check_fitted()
        self.denoiser_.train()
        self.cond_encoder_.train()

        frames_fwd = torch.stack([torch.as_tensor(s.frames, dtype=torch.float32) for s in seqs])
        poses_fwd = torch.stack([torch.as_tensor(s.poses, dtype=torch.float32) for s in seqs])
        if variant == "reverse":
            rev = [reverse_sequence(s) for s in seqs]
            frames_rev = torch.stack([torch.as_tensor(s.frames, dtype=torch.float32) for s in rev])
            poses_rev = torch.stack([torch.as_tensor(s.poses, dtype=torch.float32) for s in rev])

        sqrt_ab = torch.sqrt(torch.as_tensor(self.schedule_.abar, dtype=torch.float32))
        sqrt_1mab = torch.sqrt(1.0 - torch.as_tensor(self.schedule_.abar, dtype=torch.float32))

        n = len(z0)
        step = self.epochs_run_ * ((n + self.batch_size - 1) // self.batch_size) if start_epoch else 0
        log_fh = open(log_file, "a") if log_file else None
        try:
            for epoch in range(start_epoch, self.epochs):
                rng = np.random.default_rng((self.seed, epoch))
                order = rng.permutation(n)
                for lo in range(0, n, self.batch_size):
                    if self.max_steps and step >= self.max_steps:
                        break
                    idx = torch.as_tensor(order[lo:lo + self.batch_size], dtype=torch.long)
                    t_vec = rng.integers(1, self.T + 1, size=len(idx))
                    eps = torch.as_tensor(
                        rng.standard_normal((len(idx), *z0.shape[1:])), dtype=torch.float32)
                    t_idx = torch.as_tensor(t_vec - 1, dtype=torch.long)
                    ca = sqrt_ab[t_idx][:, None, None, None]
                    cn = sqrt_1mab[t_idx][:, None, None, None]
                    batch_z0 = z0[idx]
                    t_batch = torch.as_tensor(t_vec, dtype=torch.long)

                    c_pos = None
                    if alpha > 0.0 or variant == "negated":
                        c_pos = self.cond_encoder_(frames_fwd[idx], poses_fwd[idx])
                    c_neg = None
                    if alpha < 1.0:
                        if variant == "reverse":
                            c_neg = self.cond_encoder_(frames_rev[idx], poses_rev[idx])
                        elif variant == "negated":
                            c_neg = -c_pos
                        elif variant == "random":
                            off = rng.integers(1, n, size=len(idx))
                            other = torch.as_tensor((order[lo:lo + self.batch_size] + off) % n,
                                                    dtype=torch.long)
                            c_neg = self.cond_encoder_(frames_fwd[other], poses_fwd[other])
                        else:
                            raise ValueError(
                                f"variant {variant!r} provides no negative conditioning")

                    t0 = time.monotonic()
                    self._optimizer.zero_grad()
                    loss = torch.zeros(())
                    loss_pos = loss_neg = 0.0
                    if alpha > 0.0:
                        pred = self.denoiser_(ca * batch_z0 + cn * eps, t_batch, c_pos)
                        lpos = _mse(eps, pred)
                        loss = loss + alpha * lpos
                        loss_pos = float(lpos.detach())
                    if alpha < 1.0:
                        pred = self.denoiser_(ca * batch_z0 - cn * eps, t_batch, c_neg)
                        lneg = _mse(-eps, pred)
                        loss = loss + (1.0 - alpha) * lneg
                        loss_neg = float(lneg.detach())
                    if not torch.isfinite(loss):
                        raise RuntimeError(
                            f"training diverged at epoch {epoch} step {step}: loss "
                            f"{float(loss.detach())}; last finite checkpoint retained")
                    loss.backward()
                    if self.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(self._trainable_parameters(),
                                                       self.grad_clip)
                    self._optimizer.step()
                    if self._ema is not None:
                        with torch.no_grad():
                            for k, v in self.denoiser_.state_dict().items():
                                self._ema[k].mul_(self.ema_decay).add_(
                                    v, alpha=1.0 - self.ema_decay)
                    step += 1
                    record = {"epoch": epoch, "step": step, "loss": float(loss.detach()),
                              "loss_pos": loss_pos, "loss_neg": loss_neg,
                              "lr": self.lr,
                              "wall_ms": 1000.0 * (time.monotonic() - t0)}
                    self.history_.append(record)
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                self.epochs_run_ = epoch + 1
                if self.verbose:
                    recent = [r["loss"] for r in self.history_ if r["epoch"] == epoch]
                    print(f"diffusion epoch {epoch}: loss {np.mean(recent):.5f}")
                if checkpoint_dir is not None:
                    save_model(Path(checkpoint_dir) / "checkpoint.npz", self)
                if self.max_steps and step >= self.max_steps:
                    break
        finally:
            if log_fh:
                log_fh.close()
        return self

    # -- generation ------------------------------------------------------------

    def _denoiser_fn(self, c: torch.Tensor):
        net = self.denoiser_
        if self._ema is not None:
            net = self._ema_net()
        net.eval()

        def fn(z, t, cond):
            zt = torch.as_tensor(np.asarray(z), dtype=torch.float32)
            squeeze = zt.dim() == 3
            if squeeze:
                zt = zt[None]
            with torch.no_grad():
                out = net(zt, t, cond)
            out = out[0] if squeeze else out
            return out.numpy().astype(np.float64)

        return fn

    def _ema_net(self):
        from .denoiser import ConditionalUNet

        net = ConditionalUNet(
            in_channels=self.denoiser_.in_channels, widths=self.widths,
            res_units=self.res_units, time_dim=self.time_dim,
            cond_dim=self.d_p + self.d_q, cross_attention=self.cross_attention)
        net.load_state_dict(self._ema)
        return net

    def generate_latent(self, seq: FeatureSequence, seed: int = 0,
                        latent_shape: tuple[int, ...] | None = None) -> LatentSample:
        """Sample one clean latent under the sequence's positive conditioning."""
        self._check_fitted()
        with torch.no_grad():
            c = self.cond_encoder_.encode_sequence(seq)
        shape = latent_shape or (self.denoiser_.in_channels, 32, 32)
        return sample(self._denoiser_fn(c), c, self.schedule_, shape, seed)

    def generate_latents(self, seqs: list[FeatureSequence], seed: int = 0,
                         latent_shape: tuple[int, ...] | None = None) -> np.ndarray:
        """Batched reverse chains; clip i uses its own noise stream (seed, i)."""
        self._check_fitted()
        shape = latent_shape or (self.denoiser_.in_channels, 32, 32)
        with torch.no_grad():
            conds = torch.stack([self.cond_encoder_.encode_sequence(s) for s in seqs])
        rngs = [np.random.default_rng((seed, i)) for i in range(len(seqs))]
        z = torch.as_tensor(
            np.stack([r.standard_normal(shape) for r in rngs]), dtype=torch.float32)
        s = self.schedule_
        net = self._ema_net() if self._ema is not None else self.denoiser_
        net.eval()
        with torch.no_grad():
            for t in range(s.T, 0, -1):
                eps_pred = net(z, t, conds)
                beta_t = float(s.beta[t - 1])
                cn = float(np.sqrt(1.0 - s.abar[t - 1]))
                z = (z - (beta_t / cn) * eps_pred) / float(np.sqrt(s.a[t - 1]))
                if t > 1:
                    noise = np.stack([r.standard_normal(shape) for r in rngs])
                    z = z + float(np.sqrt(beta_t)) * torch.as_tensor(noise, dtype=torch.float32)
        return z.numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoint round trip and manifest-level train/generate
# ---------------------------------------------------------------------------

def save_model(path, model: BeatDiffusionModel, vae_path: str | None = None,
               latent_scale: float | None = None) -> None:
    model._check_fitted()
    arrays = {}
    arrays.update(ckpt_io.state_to_arrays("denoiser", model.denoiser_))
    arrays.update(ckpt_io.state_to_arrays("visual", model.visual_))
    arrays.update(ckpt_io.state_to_arrays("motion", model.motion_))
    for i, (p, state) in enumerate(model._optimizer.state.items()):
        del p
        for slot, value in state.items():
            arrays[f"optim.{i}.{slot}"] = value.detach().cpu().numpy() \
                if torch.is_tensor(value) else np.asarray(value)
    if model._ema is not None:
        arrays.update({f"ema.{k}": v.numpy() for k, v in model._ema.items()})
    meta = {
        "kind": "diffusion",
        "epoch": model.epochs_run_,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in model.get_params().items()},
        "schedule": {"T": model.schedule_.T, "beta_start": model.schedule_.beta_start,
                     "beta_end": model.schedule_.beta_end},
        "latent_scale": latent_scale if latent_scale is not None else model.latent_scale_,
        "vae_path": vae_path,
        "dims": {"d_v": model.visual_.d_v, "n_joints": model.motion_.n_joints,
                 "latent_channels": model.denoiser_.in_channels},
    }
    ckpt_io.save_container(path, arrays, meta)


def load_model(path) -> tuple[BeatDiffusionModel, dict]:
    """Rebuild a trained model (modules + optimizer state) from its container."""
    arrays, meta = ckpt_io.load_container(path)
    if meta.get("kind") != "diffusion":
        raise ValueError(f"{path}: not a diffusion checkpoint (kind={meta.get('kind')!r})")
    cfg = dict(meta["config"])
    cfg["widths"] = tuple(cfg["widths"])
    model = BeatDiffusionModel(**cfg)
    dims = meta["dims"]
    model._build(d_v=dims["d_v"], n_joints=dims["n_joints"],
                 latent_channels=dims["latent_channels"])
    model.denoiser_.load_state_dict(ckpt_io.arrays_to_state("denoiser", arrays))
    model.visual_.load_state_dict(ckpt_io.arrays_to_state("visual", arrays))
    model.motion_.load_state_dict(ckpt_io.arrays_to_state("motion", arrays))
    params = model._trainable_parameters()
    state = {}
    for i, p in enumerate(params):
        slots = {}
        for key in ("square_avg", "step"):
            name = f"optim.{i}.{key}"
            if name in arrays:
                slots[key] = torch.as_tensor(arrays[name])
        if slots:
            state[p] = slots
    model._optimizer.state.update(state)
    if any(k.startswith("ema.") for k in arrays):
        model._ema = {k[len("ema."):]: torch.as_tensor(v)
                      for k, v in arrays.items() if k.startswith("ema.")}
    model.epochs_run_ = int(meta["epoch"])
    model.latent_scale_ = float(meta.get("latent_scale", 1.0))
    return model, meta


def encode_corpus(vae: SpectrogramVAE, mels: list[MelSpectrogram]) -> np.ndarray:
    """VAE-encode spectrograms and rescale to roughly unit std for diffusion."""
    latents = vae.transform(np.stack([m.values for m in mels]))
    return latents / vae.latent_scale_


def train(mels: list[MelSpectrogram], seqs: list[FeatureSequence],
          cfg: TrainConfig, vae: SpectrogramVAE, out_dir=None,
          resume_from=None, vae_path: str | None = None,
          **model_kwargs) -> BeatDiffusionModel:
    """Train a diffusion model on (spectrogram, sequence) pairs.

    Latents are encoded with the given fitted VAE and scaled by its corpus
    latent scale.  Writes per-epoch checkpoints and a line-delimited
    training log when out_dir is set; resume_from continues a previous run
    and reproduces the uninterrupted trajectory.
    """
    if not mels:
        raise ValueError("cannot train on an empty dataset")
    latents = encode_corpus(vae, mels)
    start_epoch = 0
    if resume_from is not None:
        model, meta = load_model(resume_from)
        start_epoch = int(meta["epoch"])
        model.epochs = cfg.epochs
    else:
        model = BeatDiffusionModel(
            alpha=cfg.alpha, mode=cfg.mode, T=cfg.T, beta_start=cfg.beta_start,
            beta_end=cfg.beta_end, batch_size=cfg.batch_size, lr=cfg.lr,
            epochs=cfg.epochs, max_steps=cfg.max_steps, grad_clip=cfg.grad_clip,
            ema_decay=cfg.ema_decay, seed=cfg.seed, **model_kwargs)
    log_file = checkpoint_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = out_dir / "train_log.jsonl"
        checkpoint_dir = out_dir
    model.latent_scale_ = vae.latent_scale_
    model.fit(latents, seqs, log_file=log_file, checkpoint_dir=checkpoint_dir,
              start_epoch=start_epoch)
    model.latent_scale_ = vae.latent_scale_
    if out_dir is not None:
        save_model(out_dir / "checkpoint.npz", model, vae_path=vae_path,
                   latent_scale=vae.latent_scale_)
    return model


def generate(model: BeatDiffusionModel, vae: SpectrogramVAE, seq: FeatureSequence,
             steps: int | None = None, seed: int = 0,
             griffin_lim_iters: int = 64, log_max: float = DEFAULT_LOG_MAX) -> Waveform:
    """Synthesize one 5 s clip from a feature sequence, positive conditioning only.

    `steps` must match the trained schedule length (the sampler is the plain
    ancestral chain; accelerated step reduction is out of scope), so reduced
    desk-scale runs train with a reduced T.
    """
    model._check_fitted()
    if steps is not None and steps != model.schedule_.T:
        raise ValueError(
            f"sampler steps {steps} do not match the checkpoint schedule T={model.schedule_.T}")
    latent = model.generate_latent(seq, seed=seed)
    z = latent.z * model.latent_scale_
    mel = vae.decode(LatentSample(z=z, t=0, branch=CLEAN), norm_min=0.0, norm_max=log_max)
    return mel_to_wav(mel, iterations=griffin_lim_iters)


def generate_many(model: BeatDiffusionModel, vae: SpectrogramVAE,
                  seqs: list[FeatureSequence], seed: int = 0,
                  griffin_lim_iters: int = 64,
                  log_max: float = DEFAULT_LOG_MAX) -> list[Waveform]:
    """Batched generation; clip i is driven by its own noise stream (seed, i)."""
    latents = model.generate_latents(seqs, seed=seed) * model.latent_scale_
    values = vae.inverse_transform(latents)
    return [mel_to_wav(MelSpectrogram(values=v, norm_min=0.0, norm_max=log_max),
                       iterations=griffin_lim_iters) for v in values]
