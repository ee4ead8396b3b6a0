"""Rhythm-synchronized music generation with dual-branch latent diffusion.

Pipeline: audio clips become normalized mel-spectrogram images, a small VAE
compresses them to 32x32 latents, and a conditional U-Net is trained with a
bi-directional noise-prediction objective over paired forward diffusions
that add mirrored noise (+eps / -eps) from a shared start.  Positive
conditioning comes from forward-played dance features, negative conditioning
from a variant rule (time reversal by default); inference uses the positive
conditioning only.  A rhythm-alignment evaluation suite (onset detection,
beat coverage/hit scores, Frechet audio distance) closes the loop.
"""

from .schedule import NoiseSchedule, build_linear_schedule, marginal_coeffs
from .diffusion import LatentSample, NoisePair, diffuse_pair, reverse_step, sample
from .audio import (MelSpectrogram, MelSpectrogramCodec, Waveform, mel_to_wav,
                    read_mel, read_wav, wav_to_mel, write_mel, write_wav)
from .vae import SpectrogramVAE, load_vae, save_vae
from .conditioning import (ConditionEncoder, ConditionPair, FeatureSequence,
                           MotionEncoder, VisualRhythmEncoder, make_condition_pair,
                           reverse_sequence, synth_rhythm_sequence)
from .denoiser import ConditionalUNet, predict_noise, time_embed
from .training import (BeatDiffusionModel, TrainConfig, bidirectional_loss,
                       generate, generate_many, load_model, save_model, train)
from .metrics import (AlignmentResult, BeatVector, EmbeddingStats, align_beats,
                      aggregate_scores, detect_onsets, embedding_stats,
                      evaluate_corpus, frechet_distance, harmonic_f1, toy_embedder)
from .config import ExperimentConfig, load_config, resolve_config

__version__ = "0.1.0"
