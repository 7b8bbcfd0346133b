"""End-to-end desk-scale experiment: toy data, GAN pretraining, inversion
training with and without the delta branch, held-out evaluation.

    python -m egain.smoke WORKDIR [--seed N]
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from egain.imagecore import make_toy_faces
from egain.metrics import evaluate_dataset
from egain.trainer import (
    TrainConfig,
    load_checkpoint,
    pretrain_gan,
    read_log,
    smoothed,
    train_inversion,
    with_overrides,
)

TRAIN_FACES = 64
HELDOUT_FACES = 16
HELDOUT_SEED_OFFSET = 10_000


def run_smoke(workdir, seed: int = 7, resolution: int = 32, gan_steps: int = 2000,
              steps: int = 500, modes=("internal", "off")) -> dict:
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    train = make_toy_faces(TRAIN_FACES, resolution, seed, work / "data_train")
    heldout = make_toy_faces(HELDOUT_FACES, resolution, seed + HELDOUT_SEED_OFFSET,
                             work / "data_heldout")
    base = TrainConfig(resolution=resolution, seed=seed, gan_steps=gan_steps, steps=steps)
    pretrain_gan(train, base, out=work / "gan.ckpt", log_path=work / "gan_log.jsonl")
    t_gan = time.perf_counter() - t0

    result = {"workdir": str(work), "gan_seconds": t_gan, "modes": {}}
    for mode in modes:
        cfg = with_overrides(base, fusion_mode=mode)
        out = work / f"inv_{mode}"
        out.mkdir(exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
        # each mode starts from the same saved generator
        gan_copy = load_checkpoint(work / "gan.ckpt")
        bundle = train_inversion(train, cfg, gan_copy, out=out / "model.ckpt",
                                 log_path=out / "train_log.jsonl")
        report, _ = evaluate_dataset(heldout, bundle.model(), out=out)
        totals = [r["total"] for r in read_log(out / "train_log.jsonl")]
        sm = smoothed(totals, 10)
        result["modes"][mode] = {
            "metrics_csv": str(out / "metrics.csv"),
            "mean": report.mean(),
            "loss_step10": float(sm[9]) if len(sm) >= 10 else float(sm[-1]),
            "loss_final": float(sm[-1]),
        }
    result["seconds"] = time.perf_counter() - t0
    (work / "smoke_summary.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--gan-steps", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_smoke(args.workdir, args.seed, gan_steps=args.gan_steps, steps=args.steps)
    print(json.dumps(res, indent=2))
    return res


if __name__ == "__main__":
    main()
