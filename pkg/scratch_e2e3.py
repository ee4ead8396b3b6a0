import sys
import time
from pathlib import Path
import numpy as np
from beatdiff.audio import wav_to_mel, write_wav
from beatdiff.conditioning import synth_rhythm_sequence, click_times, write_features
from beatdiff.metrics import evaluate_corpus
from beatdiff.training import BeatDiffusionModel, generate_many, save_model
from beatdiff.vae import SpectrogramVAE, save_vae

out = Path(sys.argv[1])
n_train, n_hold, max_steps = int(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4])
ema = float(sys.argv[5]) if len(sys.argv) > 5 else 0.0
out.mkdir(parents=True, exist_ok=True)

bpms = [90.0, 120.0, 150.0]
clips = []
for i in range(n_train + n_hold):
    seq, w = synth_rhythm_sequence(bpms[i % 3], 5.0, 30.0, seed=1000 + i)
    clips.append((bpms[i % 3], seq, w))
mels = [wav_to_mel(w) for _, _, w in clips]
X = np.stack([m.values for m in mels[:n_train]])

t0 = time.monotonic()
vae = SpectrogramVAE(base_channels=8, epochs=30, batch_size=8, lr=2e-3,
                     target_mse=0.005, seed=0)
vae.fit(X)
save_vae(out / "vae.npz", vae)
print(f"vae: {time.monotonic()-t0:.0f}s, {len(vae.history_)} epochs, "
      f"mse {vae.history_[-1]['mse']:.5f}", flush=True)

latents = vae.transform(X) / vae.latent_scale_
t0 = time.monotonic()
model = BeatDiffusionModel(alpha=0.1, mode="PN", T=200, beta_start=1e-4,
                           beta_end=0.1, batch_size=16, lr=2e-4, epochs=100000,
                           max_steps=max_steps, ema_decay=ema, seed=0)
model.fit(latents, [s for _, s, _ in clips[:n_train]])
model.latent_scale_ = vae.latent_scale_
save_model(out / "diff.npz", model, vae_path=str(out / "vae.npz"))
losses = [r["loss"] for r in model.history_]
k = len(losses) // 10
print(f"diffusion: {time.monotonic()-t0:.0f}s {len(losses)} steps; "
      f"loss deciles {[round(float(np.mean(losses[i*k:(i+1)*k])), 4) for i in range(10)]}",
      flush=True)

hold = clips[n_train:]
for i, (bpm, seq, w) in enumerate(hold):
    write_wav(out / f"gt{i:02d}_{int(bpm)}.wav", w)
    write_features(out / f"seq{i:02d}.ftr", seq)
waves = generate_many(model, vae, [s for _, s, _ in hold], seed=99)
for i, (bpm, _, _) in enumerate(hold):
    write_wav(out / f"gen{i:02d}_{int(bpm)}.wav", waves[i])
report = evaluate_corpus([w for _, _, w in hold], waves,
                         gt_beats=[click_times(b, 5.0) for b, _, _ in hold])
print("aggregate:", {k: round(v, 2) for k, v in report["aggregate"].items()})
for row in report["per_clip"]:
    print(row, flush=True)
