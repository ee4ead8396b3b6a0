"""Dataset manifests and the synthetic corpus builder.

A manifest is line-delimited JSON, one record per clip with paths relative
to the manifest's directory so run directories stay relocatable:

    {"id": "clip0000", "bpm": 120.0, "seed": 7, "wav": "wav/clip0000.wav",
     "features": "feat/clip0000.ftr"}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, read_wav, write_wav
from .conditioning import (FeatureSequence, read_features, synth_rhythm_sequence,
                           write_features)

__all__ = ["ClipRecord", "write_manifest", "read_manifest", "build_corpus",
           "load_clip", "load_corpus"]


@dataclass(frozen=True)
class ClipRecord:
    id: str
    bpm: float
    seed: int
    wav: str
    features: str


def write_manifest(path, records: list[ClipRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


def read_manifest(path) -> list[ClipRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(ClipRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: bad manifest record ({e})") from e
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


def build_corpus(out_dir, n: int, bpms: list[float], seed: int,
                 duration: float = 5.0, fps: float = 30.0,
                 d_v: int = 64, n_joints: int = 8) -> list[ClipRecord]:
    """Materialize n synthetic clips and their manifest under out_dir.

    Clip i draws its bpm and synthesis jitter from its own stream (seed, i),
    so the corpus is reproducible and insensitive to n.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    if not bpms:
        raise ValueError("need at least one bpm to sample from")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "feat").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        bpm = float(bpms[int(rng.integers(len(bpms)))])
        clip_seed = int(rng.integers(2 ** 31))
        seq, wave = synth_rhythm_sequence(bpm, duration=duration, fps=fps,
                                          seed=clip_seed, d_v=d_v, n_joints=n_joints)
        clip_id = f"clip{i:04d}"
        wav_rel = f"wav/{clip_id}.wav"
        feat_rel = f"feat/{clip_id}.ftr"
        write_wav(out_dir / wav_rel, wave)
        write_features(out_dir / feat_rel, seq)
        records.append(ClipRecord(id=clip_id, bpm=bpm, seed=clip_seed,
                                  wav=wav_rel, features=feat_rel))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def load_clip(record: ClipRecord, root) -> tuple[FeatureSequence, Waveform]:
    root = Path(root)
    return read_features(root / record.features), read_wav(root / record.wav)


def load_corpus(manifest_path) -> tuple[list[ClipRecord], list[FeatureSequence], list[Waveform]]:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    root = manifest_path.parent
    seqs, waves = [], []
    for r in records:
        seq, wave = load_clip(r, root)
        seqs.append(seq)
        waves.append(wave)
    return records, seqs, waves
