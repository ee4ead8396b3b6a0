"""Rhythm conditioning: feature sequences, encoders, and the synthetic corpus.

A clip's conditioning is built from two per-frame streams: visual-rhythm
feature vectors and 2-D pose keypoints.  Playing the sequence forward gives
the positive conditioning; the negative conditioning comes from a variant
rule, by default the time-reversed sequence.  The encoders are small
trainable stand-ins for the pretrained video/pose backbones of full-scale
systems: a temporal convolution net over the feature stream and a
graph-plus-temporal convolution net over the joint graph.  Both are trained
jointly through the diffusion objective.

Precomputed real features can be ingested through the same array container
(frames of shape F x d_v, poses of shape F x J x 2, any dims).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .audio import SAMPLE_RATE, Waveform
from .validation import check_finite

__all__ = [
    "FeatureSequence", "ConditionPair", "reverse_sequence",
    "VisualRhythmEncoder", "MotionEncoder", "ConditionEncoder",
    "make_condition_pair", "synth_rhythm_sequence", "click_times",
    "write_features", "read_features",
]

VARIANTS = ("reverse", "random", "negated", "none")

_FEAT_MAGIC = 6579558.0  # "ftr" packed as an exactly representable float
_FEAT_VERSION = 1.0


@dataclass
class FeatureSequence:
    """Per-frame conditioning streams for one clip."""

    frames: np.ndarray  # (F, d_v) visual-rhythm features
    poses: np.ndarray   # (F, J, 2) keypoints
    fps: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.frames.ndim != 2 or self.poses.ndim != 3 or self.poses.shape[2] != 2:
            raise ValueError("frames must be (F, d_v) and poses (F, J, 2)")
        if self.frames.shape[0] != self.poses.shape[0]:
            raise ValueError(
                f"frames ({self.frames.shape[0]}) and poses ({self.poses.shape[0]}) disagree on F")
        if self.frames.shape[0] < 2:
            raise ValueError("a feature sequence needs at least 2 frames")
        check_finite(self.frames, "visual features")
        check_finite(self.poses, "pose keypoints")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ConditionPair:
    """Positive and (optionally) negative conditioning vectors."""

    c_pos: object  # torch tensor or numpy array, shape (d_c,) or (B, d_c)
    c_neg: object = None
    variant: str = "reverse"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown conditioning variant {self.variant!r}")
        if self.variant == "none":
            if self.c_neg is not None:
                raise ValueError("variant 'none' must not carry negative conditioning")
        elif self.c_neg is None:
            raise ValueError(f"variant {self.variant!r} requires negative conditioning")
        elif tuple(np.shape(self.c_pos)) != tuple(np.shape(self.c_neg)):
            raise ValueError("positive and negative conditioning must share a dimension")


def reverse_sequence(seq: FeatureSequence) -> FeatureSequence:
    """Time-reverse both streams; an exact involution."""
    return FeatureSequence(frames=seq.frames[::-1].copy(),
                           poses=seq.poses[::-1].copy(), fps=seq.fps)


def _chain_adjacency(n_joints: int) -> torch.Tensor:
    """Normalized chain-skeleton adjacency with self loops, D^-1/2 (A+I) D^-1/2."""
    a = np.eye(n_joints)
    for j in range(n_joints - 1):
        a[j, j + 1] = a[j + 1, j] = 1.0
    d = a.sum(axis=1)
    norm = np.diag(1.0 / np.sqrt(d))
    return torch.tensor(norm @ a @ norm, dtype=torch.float32)


class VisualRhythmEncoder(nn.Module):
    """Temporal convolution + mean pool over the visual feature stream.

    Replicate padding keeps the embedding of a constant-in-time sequence
    independent of its length.
    """

    def __init__(self, d_v: int = 64, d_p: int = 64, hidden: int = 64, kernel: int = 5):
        super().__init__()
        self.d_v, self.d_p, self.kernel = d_v, d_p, kernel
        pad = kernel // 2
        self.conv1 = nn.Conv1d(d_v, hidden, kernel, padding=pad, padding_mode="replicate")
        self.conv2 = nn.Conv1d(hidden, d_p, kernel, padding=pad, padding_mode="replicate")
        self.act = nn.SiLU()

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (B, F, d_v) -> (B, d_p)
        if frames.shape[-1] != self.d_v:
            raise ValueError(f"expected {self.d_v} visual features per frame, got {frames.shape[-1]}")
        if frames.shape[1] < self.kernel:
            raise ValueError(f"sequence length {frames.shape[1]} shorter than kernel {self.kernel}")
        h = frames.transpose(1, 2)
        h = self.act(self.conv1(h))
        h = self.act(self.conv2(h))
        return h.mean(dim=2)


class MotionEncoder(nn.Module):
    """Graph convolution over a fixed joint chain, then temporal conv + pool.

    Keypoints are centered per frame before anything else, so a global
    translation of the skeleton never changes the embedding.
    """

    def __init__(self, n_joints: int = 8, d_q: int = 32, hidden: int = 32, kernel: int = 5):
        super().__init__()
        self.n_joints, self.d_q, self.kernel = n_joints, d_q, kernel
        self.register_buffer("adjacency", _chain_adjacency(n_joints))
        self.joint_proj = nn.Linear(2, hidden)
        self.graph_proj = nn.Linear(hidden, hidden)
        pad = kernel // 2
        self.temporal = nn.Conv1d(hidden, d_q, kernel, padding=pad, padding_mode="replicate")
        self.act = nn.SiLU()

    def forward(self, poses: torch.Tensor) -> torch.Tensor:
        # poses: (B, F, J, 2) -> (B, d_q)
        if poses.shape[2] != self.n_joints:
            raise ValueError(f"expected {self.n_joints} joints, got {poses.shape[2]}")
        if poses.shape[1] < self.kernel:
            raise ValueError(f"sequence length {poses.shape[1]} shorter than kernel {self.kernel}")
        centered = poses - poses.mean(dim=2, keepdim=True)
        h = self.act(self.joint_proj(centered))               # (B, F, J, h)
        h = torch.einsum("jk,bfkh->bfjh", self.adjacency, h)
        h = self.act(self.graph_proj(h))
        h = h.mean(dim=2)                                     # (B, F, h)
        h = self.act(self.temporal(h.transpose(1, 2)))        # (B, d_q, F)
        return h.mean(dim=2)


def _l2_normalize(v: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return v / torch.clamp(v.norm(dim=-1, keepdim=True), min=eps)


class ConditionEncoder(nn.Module):
    """Concatenate L2-normalized visual and motion embeddings into c.

    mask_visual / mask_motion zero one half of the vector, which is how the
    single-stream ablations are realized without changing the dimension.
    """

    def __init__(self, visual: VisualRhythmEncoder, motion: MotionEncoder,
                 mask_visual: bool = False, mask_motion: bool = False):
        super().__init__()
        if mask_visual and mask_motion:
            raise ValueError("cannot mask both conditioning streams")
        self.visual = visual
        self.motion = motion
        self.mask_visual = mask_visual
        self.mask_motion = mask_motion

    @property
    def dim(self) -> int:
        return self.visual.d_p + self.motion.d_q

    def forward(self, frames: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        p = _l2_normalize(self.visual(frames))
        q = _l2_normalize(self.motion(poses))
        if self.mask_visual:
            p = torch.zeros_like(p)
        if self.mask_motion:
            q = torch.zeros_like(q)
        return torch.cat([p, q], dim=-1)

    def encode_sequence(self, seq: FeatureSequence) -> torch.Tensor:
        frames = torch.as_tensor(seq.frames, dtype=torch.float32).unsqueeze(0)
        poses = torch.as_tensor(seq.poses, dtype=torch.float32).unsqueeze(0)
        return self.forward(frames, poses).squeeze(0)


def make_condition_pair(
    seq: FeatureSequence,
    variant: str,
    encoder: ConditionEncoder,
    rng: Optional[np.random.Generator] = None,
    pool: Optional[list[FeatureSequence]] = None,
) -> ConditionPair:
    """Build (c+, c-) for one clip under the given negative-conditioning rule.

    reverse: encode the time-reversed sequence.
    random:  encode a different sequence drawn from `pool`.
    negated: exactly -c+.
    none:    no negative conditioning (single-branch ablation input).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown conditioning variant {variant!r}")
    c_pos = encoder.encode_sequence(seq)
    if variant == "none":
        return ConditionPair(c_pos=c_pos, c_neg=None, variant=variant)
    if variant == "reverse":
        c_neg = encoder.encode_sequence(reverse_sequence(seq))
    elif variant == "negated":
        c_neg = -c_pos
    else:  # random
        if not pool:
            raise ValueError("variant 'random' needs a non-empty pool of other sequences")
        if rng is None:
            raise ValueError("variant 'random' needs an rng")
        other = pool[int(rng.integers(len(pool)))]
        c_neg = encoder.encode_sequence(other)
    return ConditionPair(c_pos=c_pos, c_neg=c_neg, variant=variant)


# ---------------------------------------------------------------------------
# Synthetic rhythm corpus
# ---------------------------------------------------------------------------

# Corpus-level feature dictionary: real video embeddings share one space
# across clips, so the projection directions are fixed constants while
# per-clip character comes from seeded jitter.
_DICT_RNG_SEED = 927151


def click_times(bpm: float, duration: float) -> np.ndarray:
    """Beat instants k * 60/bpm that fall inside the clip."""
    period = 60.0 / bpm
    n = int(np.floor(duration / period - 1e-9)) + 1
    times = np.arange(n) * period
    return times[times < duration - 1e-9]


def _beat_pulse(t: np.ndarray, beats: np.ndarray, attack: float, decay: float) -> np.ndarray:
    """Sum of asymmetric attack/decay bumps peaking exactly at the beats."""
    pulse = np.zeros_like(t)
    for b in beats:
        d = t - b
        pulse += np.where(d < 0, np.exp(d / attack), np.exp(-d / decay))
    return pulse


def synth_rhythm_sequence(
    bpm: float,
    duration: float = 5.0,
    fps: float = 30.0,
    seed: int = 0,
    d_v: int = 64,
    n_joints: int = 8,
) -> tuple[FeatureSequence, Waveform]:
    """Generate a paired (dance features, click-track audio) clip.

    The audio is a click train on the beat grid over a stationary seeded
    harmonic bed.  Poses bounce with an asymmetric attack/decay pulse whose
    peaks sit on the beats (sharp hit, slow recovery), so time reversal
    genuinely changes the temporal signature.  Visual features are a fixed
    corpus-level projection of the same pulse plus seeded jitter.
    Deterministic given the seed.
    """
    if not 60.0 <= bpm <= 240.0:
        raise ValueError(f"bpm {bpm} outside [60, 240]")
    if not 4.9 <= duration <= 5.1:
        raise ValueError(f"duration {duration} outside [4.9, 5.1] s")
    rng = np.random.default_rng(seed)
    beats = click_times(bpm, duration)

    # Audio: damped-sine clicks + constant-amplitude harmonic bed.
    n = int(round(duration * SAMPLE_RATE))
    ts = np.arange(n) / SAMPLE_RATE
    audio = np.zeros(n)
    click_freq = rng.uniform(1200.0, 2400.0)
    click_len = int(0.03 * SAMPLE_RATE)
    k = np.arange(click_len)
    click = np.exp(-k / (0.006 * SAMPLE_RATE)) * np.sin(2 * np.pi * click_freq * k / SAMPLE_RATE)
    for b in beats:
        start = int(round(b * SAMPLE_RATE))
        stop = min(start + click_len, n)
        audio[start:stop] += click[: stop - start]
    base_freq = rng.uniform(160.0, 320.0)
    for harmonic, amp in ((1, 0.06), (2, 0.035), (3, 0.02)):
        audio += amp * np.sin(2 * np.pi * base_freq * harmonic * ts + rng.uniform(0, 2 * np.pi))
    audio = audio / np.max(np.abs(audio)) * 0.95

    # Poses: beat-locked bounce with per-joint seeded amplitude/phase jitter.
    n_frames = int(round(duration * fps))
    ft = np.arange(n_frames) / fps
    period = 60.0 / bpm
    pulse = _beat_pulse(ft, beats, attack=0.04, decay=min(0.15, 0.35 * period))
    base = rng.uniform(-1.0, 1.0, size=(n_joints, 2))
    amp = rng.uniform(0.3, 0.6, size=n_joints)
    phase_jitter = rng.uniform(-0.3, 0.3, size=n_joints) / fps
    poses = np.empty((n_frames, n_joints, 2))
    for j in range(n_joints):
        pj = _beat_pulse(ft - phase_jitter[j], beats, attack=0.04, decay=min(0.15, 0.35 * period))
        poses[:, j, 0] = base[j, 0] + 0.1 * amp[j] * pj
        poses[:, j, 1] = base[j, 1] - amp[j] * pj

    # Visual features: corpus-level directions mixing the pulse and its rest.
    dict_rng = np.random.default_rng(_DICT_RNG_SEED)
    u_hit = dict_rng.standard_normal(d_v)
    u_hit /= np.linalg.norm(u_hit)
    u_rest = dict_rng.standard_normal(d_v)
    u_rest /= np.linalg.norm(u_rest)
    gain = rng.uniform(0.8, 1.2)
    frames = (gain * np.outer(pulse, u_hit)
              + np.outer(1.0 - np.clip(pulse, 0.0, 1.0), u_rest)
              + 0.02 * rng.standard_normal((n_frames, d_v)))

    seq = FeatureSequence(frames=frames, poses=poses, fps=fps)
    return seq, Waveform(samples=audio, sample_rate=SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Feature array container: little-endian float32 with shape headers
# ---------------------------------------------------------------------------

def write_features(path, seq: FeatureSequence) -> None:
    """Persist one clip's streams: [magic, version, fps, n_arrays] then, per
    array, [ndim, dims...] followed by the flat float32 data."""
    parts = [np.array([_FEAT_MAGIC, _FEAT_VERSION, seq.fps, 2.0], dtype="<f4")]
    for arr in (seq.frames, seq.poses):
        parts.append(np.array([arr.ndim, *arr.shape], dtype="<f4"))
        parts.append(arr.astype("<f4").ravel())
    Path(path).write_bytes(b"".join(p.tobytes() for p in parts))


def read_features(path) -> FeatureSequence:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if len(raw) < 4 or raw[0] != _FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature container")
    if raw[1] != _FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature container version {raw[1]}")
    fps, n_arrays = float(raw[2]), int(raw[3])
    if n_arrays != 2:
        raise ValueError(f"{path}: expected 2 arrays, header says {n_arrays}")
    arrays = []
    pos = 4
    for _ in range(n_arrays):
        ndim = int(raw[pos])
        dims = tuple(int(d) for d in raw[pos + 1: pos + 1 + ndim])
        pos += 1 + ndim
        size = int(np.prod(dims))
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated feature container")
        arrays.append(raw[pos: pos + size].astype(np.float64).reshape(dims))
        pos += size
    return FeatureSequence(frames=arrays[0], poses=arrays[1], fps=fps)
