import sys
import time
import numpy as np
from beatdiff.audio import wav_to_mel
from beatdiff.conditioning import synth_rhythm_sequence, click_times
from beatdiff.metrics import evaluate_corpus
from beatdiff.training import BeatDiffusionModel, generate_many
from beatdiff.vae import SpectrogramVAE

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 48
n_hold = int(sys.argv[2]) if len(sys.argv) > 2 else 12
max_steps = int(sys.argv[3]) if len(sys.argv) > 3 else 600
vae_epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 12

t0 = time.monotonic()
bpms = [90.0, 120.0, 150.0]
rng = np.random.default_rng(7)
clips = []
for i in range(n_train + n_hold):
    bpm = bpms[i % 3]
    seq, w = synth_rhythm_sequence(bpm, 5.0, 30.0, seed=1000 + i)
    clips.append((bpm, seq, w))
print(f"synth {len(clips)} clips: {time.monotonic()-t0:.1f}s")

t0 = time.monotonic()
mels = [wav_to_mel(w) for _, _, w in clips]
print(f"mels: {time.monotonic()-t0:.1f}s")

X = np.stack([m.values for m in mels[:n_train]])
t0 = time.monotonic()
vae = SpectrogramVAE(base_channels=8, epochs=vae_epochs, batch_size=8, lr=1e-3,
                     target_mse=0.004, seed=0, verbose=True)
vae.fit(X)
print(f"vae fit: {time.monotonic()-t0:.1f}s, latent_scale {vae.latent_scale_:.3f}")
Xh = np.stack([m.values for m in mels[n_train:]])
print("held-out recon mse:", vae.reconstruction_mse(Xh))

latents = vae.transform(X) / vae.latent_scale_
print("latent std:", latents.std())

t0 = time.monotonic()
model = BeatDiffusionModel(alpha=0.1, mode="PN", T=200, batch_size=16, lr=2e-4,
                           epochs=10000, max_steps=max_steps, seed=0, verbose=False)
model.fit(latents, [seq for _, seq, _ in clips[:n_train]])
model.latent_scale_ = vae.latent_scale_
dt = time.monotonic() - t0
steps = len(model.history_)
print(f"diffusion fit: {dt:.1f}s for {steps} steps ({dt/steps*1000:.0f} ms/step), "
      f"loss {np.mean([r['loss'] for r in model.history_[-20:]]):.4f} "
      f"(first {np.mean([r['loss'] for r in model.history_[:20]]):.4f})")

t0 = time.monotonic()
hold = clips[n_train:]
waves = generate_many(model, vae, [seq for _, seq, _ in hold], seed=99)
print(f"generate {len(waves)} clips: {time.monotonic()-t0:.1f}s")

report = evaluate_corpus([w for _, _, w in hold], waves,
                         gt_beats=[click_times(bpm, 5.0) for bpm, _, _ in hold])
print("aggregate:", {k: round(v, 2) for k, v in report["aggregate"].items()})
for row in report["per_clip"][:6]:
    print(row)
