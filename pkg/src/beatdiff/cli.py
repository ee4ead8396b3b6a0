"""Command-line entry points tying the pipeline into reproducible runs.

Subcommands: synth-data, train-vae, train-diffusion, generate, evaluate,
sweep-alpha.  Every run directory receives the resolved configuration (with
per-key provenance), the seed, and schema versions, which is enough to
re-run the command identically.  Contract violations exit nonzero with a
one-line diagnostic.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from sklearn.exceptions import NotFittedError

from .audio import wav_to_mel, read_wav, write_wav
from .config import ExperimentConfig, echo_config, resolve_config
from .data import build_corpus, load_corpus, read_manifest
from .metrics import evaluate_corpus
from .training import TrainConfig, generate_many, load_model, train
from .vae import SpectrogramVAE, load_vae, save_vae

REPORT_SCHEMA_VERSION = 1


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _resolve(args) -> tuple[ExperimentConfig, dict[str, str]]:
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("seed", str(args.seed))
    return resolve_config(file_path=getattr(args, "config", None), overrides=overrides)


def _write_run_stamp(out_dir: Path, command: str, cfg: ExperimentConfig,
                     provenance: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, provenance, out_dir / "config.resolved")
    (out_dir / "run.json").write_text(json.dumps({
        "command": command,
        "seed": cfg.seed,
        "schema_versions": {"checkpoint": 1, "report": REPORT_SCHEMA_VERSION},
    }, indent=2) + "\n")


def cmd_synth_data(args) -> int:
    cfg, provenance = _resolve(args)
    bpms = [float(b) for b in args.bpms.split(",") if b.strip()]
    out_dir = Path(args.out)
    records = build_corpus(out_dir, n=args.n, bpms=bpms, seed=cfg.seed,
                           duration=args.duration, fps=cfg.conditioning.fps,
                           d_v=cfg.conditioning.d_v, n_joints=cfg.conditioning.joints)
    _write_run_stamp(out_dir, "synth-data", cfg, provenance)
    print(f"wrote {len(records)} clips under {out_dir}")
    return 0


def _load_mels(manifest_path):
    records, seqs, waves = load_corpus(manifest_path)
    return records, seqs, [wav_to_mel(w) for w in waves]


def cmd_train_vae(args) -> int:
    cfg, provenance = _resolve(args)
    out_dir = Path(args.out)
    records, _, mels = _load_mels(args.data)
    X = np.stack([m.values for m in mels])
    n_val = int(round(args.holdout * len(X)))
    X_train, X_val = (X[:-n_val], X[-n_val:]) if n_val else (X, None)
    vae = SpectrogramVAE(
        latent_channels=cfg.vae.latent_channels, base_channels=cfg.vae.base_channels,
        epochs=cfg.vae.epochs, batch_size=cfg.vae.batch_size, lr=cfg.vae.lr,
        kl_weight=cfg.vae.kl_weight, target_mse=cfg.vae.target_mse,
        seed=cfg.seed, verbose=args.verbose)
    vae.fit(X_train, X_val=X_val)
    _write_run_stamp(out_dir, "train-vae", cfg, provenance)
    save_vae(out_dir / "vae.npz", vae)
    with open(out_dir / "vae_log.jsonl", "w") as f:
        for entry in vae.history_:
            f.write(json.dumps(entry) + "\n")
    final = vae.history_[-1]
    print(f"trained VAE on {len(X_train)} clips ({len(records)} total): "
          f"mse {final['mse']:.5f}" +
          (f", held-out mse {final['val_mse']:.5f}" if "val_mse" in final else ""))
    return 0


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        alpha=cfg.train.alpha, mode=cfg.train.mode, T=cfg.schedule.T,
        beta_start=cfg.schedule.beta_start, beta_end=cfg.schedule.beta_end,
        batch_size=cfg.train.batch_size, lr=cfg.train.lr, epochs=cfg.train.epochs,
        max_steps=cfg.train.max_steps, grad_clip=cfg.train.grad_clip,
        ema_decay=cfg.train.ema_decay, seed=cfg.seed)


def _model_kwargs(cfg: ExperimentConfig) -> dict:
    return dict(widths=tuple(cfg.denoiser.widths), res_units=cfg.denoiser.res_units,
                time_dim=cfg.denoiser.time_dim, cross_attention=cfg.denoiser.cross_attention,
                d_p=cfg.conditioning.d_p, d_q=cfg.conditioning.d_q,
                visual_frozen=cfg.conditioning.visual_frozen)


def cmd_train_diffusion(args) -> int:
    cfg, provenance = _resolve(args)
    out_dir = Path(args.out)
    _, seqs, mels = _load_mels(args.data)
    vae = load_vae(args.vae)
    _write_run_stamp(out_dir, "train-diffusion", cfg, provenance)
    model = train(mels, seqs, _train_config(cfg), vae, out_dir=out_dir,
                  resume_from=args.resume, vae_path=str(args.vae),
                  **({} if args.resume else _model_kwargs(cfg)))
    final_losses = [r["loss"] for r in model.history_[-10:]]
    print(f"trained diffusion ({cfg.train.mode}, alpha={model._effective()[1]}) "
          f"for {model.epochs_run_} epochs; recent loss {np.mean(final_losses):.5f}")
    return 0


def _resolve_vae_path(args_vae, ckpt_path, meta) -> Path:
    if args_vae:
        return Path(args_vae)
    stored = meta.get("vae_path")
    if stored:
        cand = Path(stored)
        if cand.exists():
            return cand
        sibling = Path(ckpt_path).parent / Path(stored).name
        if sibling.exists():
            return sibling
    raise ValueError("cannot locate the VAE checkpoint; pass --vae explicitly")


def cmd_generate(args) -> int:
    cfg, provenance = _resolve(args)
    model, meta = load_model(args.ckpt)
    vae = load_vae(_resolve_vae_path(args.vae, args.ckpt, meta))
    if args.steps is not None and args.steps != model.schedule_.T:
        raise ValueError(f"sampler steps {args.steps} do not match the checkpoint "
                         f"schedule T={model.schedule_.T}")
    manifest_path = Path(args.data)
    records, seqs, _ = load_corpus(manifest_path)
    out_dir = Path(args.out)
    _write_run_stamp(out_dir, "generate", cfg, provenance)
    waves = generate_many(model, vae, seqs, seed=cfg.seed,
                          griffin_lim_iters=cfg.audio.griffin_lim_iters,
                          log_max=cfg.audio.log_max)
    for record, wave in zip(records, waves):
        write_wav(out_dir / f"{record.id}.wav", wave)
    print(f"generated {len(waves)} clips into {out_dir}")
    return 0


def _evaluate_manifest_vs_dir(ref_manifest, gen_dir, cfg: ExperimentConfig) -> dict:
    records = read_manifest(ref_manifest)
    root = Path(ref_manifest).parent
    gen_dir = Path(gen_dir)
    gt_waves, gen_waves, ids = [], [], []
    for r in records:
        gen_path = gen_dir / f"{r.id}.wav"
        if not gen_path.exists():
            raise ValueError(f"missing generated clip {gen_path}")
        gt_waves.append(read_wav(root / r.wav))
        gen_waves.append(read_wav(gen_path))
        ids.append(r.id)
    report = evaluate_corpus(gt_waves, gen_waves, ids=ids, window=cfg.eval.window,
                             sensitivity=cfg.eval.sensitivity,
                             embed_dim=cfg.eval.embed_dim)
    report["schema_version"] = REPORT_SCHEMA_VERSION
    return report


def _write_report(report: dict, out_json: Path) -> None:
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(report, indent=2) + "\n")
    agg = report["aggregate"]
    with open(out_json.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "B_t", "B_g", "B_a", "bcs", "bhs", "f1",
                         "BCS", "CSD", "BHS", "HSD", "F1", "FAD"])
        for row in report["per_clip"]:
            writer.writerow([row["id"], row["B_t"], row["B_g"], row["B_a"],
                             f"{row['bcs']:.6f}", f"{row['bhs']:.6f}", f"{row['f1']:.6f}",
                             "", "", "", "", "", ""])
        writer.writerow(["__aggregate__", "", "", "", "", "", "",
                         f"{agg['BCS']:.4f}", f"{agg['CSD']:.4f}", f"{agg['BHS']:.4f}",
                         f"{agg['HSD']:.4f}", f"{agg['F1']:.4f}", f"{agg['FAD']:.6f}"])


def cmd_evaluate(args) -> int:
    cfg, provenance = _resolve(args)
    report = _evaluate_manifest_vs_dir(args.ref, args.gen, cfg)
    out_json = Path(args.out)
    _write_report(report, out_json)
    _write_run_stamp(out_json.parent, "evaluate", cfg, provenance)
    agg = report["aggregate"]
    print("BCS {BCS:.2f}  CSD {CSD:.2f}  BHS {BHS:.2f}  HSD {HSD:.2f}  "
          "F1 {F1:.2f}  FAD {FAD:.4f}".format(**agg))
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg, provenance = _resolve(args)
    alphas = ([float(a) for a in args.alphas.split(",") if a.strip()]
              if args.alphas else [round(0.1 * i, 1) for i in range(11)])
    out_dir = Path(args.out)
    _write_run_stamp(out_dir, "sweep-alpha", cfg, provenance)
    _, seqs, mels = _load_mels(args.data)
    eval_manifest = args.eval_data or args.data
    vae = load_vae(args.vae)
    rows = []
    for alpha in alphas:
        run_dir = out_dir / f"alpha_{alpha:g}"
        tc = _train_config(cfg)
        tc.alpha = alpha
        tc.__post_init__()
        model = train(mels, seqs, tc, vae, out_dir=run_dir, vae_path=str(args.vae),
                      **_model_kwargs(cfg))
        records, eval_seqs, _ = load_corpus(eval_manifest)
        waves = generate_many(model, vae, eval_seqs, seed=cfg.seed,
                              griffin_lim_iters=cfg.audio.griffin_lim_iters,
                              log_max=cfg.audio.log_max)
        gen_dir = run_dir / "generated"
        gen_dir.mkdir(parents=True, exist_ok=True)
        for record, wave in zip(records, waves):
            write_wav(gen_dir / f"{record.id}.wav", wave)
        report = _evaluate_manifest_vs_dir(eval_manifest, gen_dir, cfg)
        _write_report(report, run_dir / "report.json")
        row = {"alpha": alpha, **{k: report["aggregate"][k]
                                  for k in ("BCS", "CSD", "BHS", "HSD", "F1", "FAD")}}
        rows.append(row)
        print("alpha {alpha:.1f}: BCS {BCS:.2f}  CSD {CSD:.2f}  BHS {BHS:.2f}  "
              "HSD {HSD:.2f}  F1 {F1:.2f}  FAD {FAD:.4f}".format(**row))
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beatdiff",
        description="rhythm-synchronized music generation with dual-branch latent diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (flat key = value)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, help="override the run seed")

    p = sub.add_parser("synth-data", help="materialize a synthetic clip corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--bpms", default="90,120,150")
    p.add_argument("--duration", type=float, default=5.0)
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-vae", help="train the spectrogram autoencoder")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", type=float, default=0.0,
                   help="fraction of clips held out for validation")
    p.add_argument("--verbose", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-diffusion", help="train the conditional diffusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True, help="trained VAE checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    common(p)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("generate", help="synthesize audio for a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vae", help="VAE checkpoint (default: path stored in ckpt)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="sampler steps; must equal schedule T")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated clips against a manifest")
    p.add_argument("--ref", required=True, help="reference manifest")
    p.add_argument("--gen", required=True, help="directory of generated <id>.wav")
    p.add_argument("--out", required=True, help="report JSON path (CSV twin alongside)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="train and evaluate across an alpha grid")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", help="manifest for evaluation (default: --data)")
    p.add_argument("--alphas", help="comma list (default 0.0..1.0 step 0.1)")
    common(p)
    p.set_defaults(func=cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotFittedError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
