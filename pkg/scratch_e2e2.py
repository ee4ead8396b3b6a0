import sys
import time
import numpy as np
import torch
from beatdiff.audio import wav_to_mel
from beatdiff.conditioning import synth_rhythm_sequence, click_times
from beatdiff.metrics import evaluate_corpus
from beatdiff.training import BeatDiffusionModel, generate_many
from beatdiff.vae import SpectrogramVAE

n_train, n_hold, max_steps, vae_epochs, beta_end, lr, mode, alpha, seed = (
    int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4]),
    float(sys.argv[5]), float(sys.argv[6]), sys.argv[7], float(sys.argv[8]),
    int(sys.argv[9]))

bpms = [90.0, 120.0, 150.0]
clips = []
for i in range(n_train + n_hold):
    bpm = bpms[i % 3]
    seq, w = synth_rhythm_sequence(bpm, 5.0, 30.0, seed=1000 + i)
    clips.append((bpm, seq, w))
mels = [wav_to_mel(w) for _, _, w in clips]
X = np.stack([m.values for m in mels[:n_train]])

t0 = time.monotonic()
vae = SpectrogramVAE(base_channels=8, epochs=vae_epochs, batch_size=8, lr=1e-3,
                     target_mse=0.006, seed=0)
vae.fit(X)
print(f"vae: {time.monotonic()-t0:.0f}s, {vae.epochs} cap, ran {len(vae.history_)} "
      f"epochs, final mse {vae.history_[-1]['mse']:.5f}", flush=True)

latents = vae.transform(X) / vae.latent_scale_

t0 = time.monotonic()
model = BeatDiffusionModel(alpha=alpha, mode=mode, T=200, beta_start=1e-4,
                           beta_end=beta_end, batch_size=16, lr=lr, epochs=100000,
                           max_steps=max_steps, seed=seed)
model.fit(latents, [seq for _, seq, _ in clips[:n_train]])
model.latent_scale_ = vae.latent_scale_
dt = time.monotonic() - t0
print(f"diffusion: {dt:.0f}s {len(model.history_)} steps, "
      f"loss {np.mean([r['loss'] for r in model.history_[-30:]]):.4f}", flush=True)

# conditioning response diagnostic: same z_T, different class conditioning
hold = clips[n_train:]
seq90 = next(s for b, s, _ in hold if b == 90.0)
seq150 = next(s for b, s, _ in hold if b == 150.0)
with torch.no_grad():
    c90 = model.cond_encoder_.encode_sequence(seq90)
    c150 = model.cond_encoder_.encode_sequence(seq150)
    z = torch.randn(1, 1, 32, 32)
    e90 = model.denoiser_(z, 100, c90)
    e150 = model.denoiser_(z, 100, c150)
print(f"cond response at t=100: {float((e90-e150).abs().mean()):.5f} "
      f"(output scale {float(e90.abs().mean()):.3f})", flush=True)

t0 = time.monotonic()
waves = generate_many(model, vae, [s for _, s, _ in hold], seed=99)
report = evaluate_corpus([w for _, _, w in hold], waves,
                         gt_beats=[click_times(b, 5.0) for b, _, _ in hold])
print(f"generate+eval: {time.monotonic()-t0:.0f}s", flush=True)
print("aggregate:", {k: round(v, 2) for k, v in report["aggregate"].items()})
for row in report["per_clip"]:
    print(row)
