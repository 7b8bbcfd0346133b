"""Command-line entry point: ``egain <subcommand> ...``.

Subcommands: make-data, pretrain, train, invert, evaluate, compare.
Exit codes: 0 success, 1 runtime or partial failure, 2 invalid input, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from egain.errors import EgainError, ValidationError
from egain.imagecore import (
    DatasetManifest,
    check_resolution,
    load_image,
    make_toy_faces,
    save_image,
)
from egain.metrics import COLUMNS, IdentityModel, MetricReport, evaluate_dataset
from egain.trainer import (
    FUSION_MODES,
    TrainConfig,
    invert,
    load_checkpoint,
    pretrain_gan,
    train_inversion,
)

log = logging.getLogger("egain")

SEED_ENV = "EGAIN_SEED"
RESOLVED_CONFIG = "config.resolved.json"
GRID_MAX = 8
PASS_RATE = 0.9


def _read_config_file(path) -> dict:
    path = Path(path)
    _require(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            if sys.version_info >= (3, 11):
                import tomllib
            else:
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing input: {path}")
    return path


def resolve_config(args, manifest: DatasetManifest | None = None) -> TrainConfig:
    """Defaults < dataset resolution < config file < $EGAIN_SEED < command-line flags."""
    doc = TrainConfig().to_dict()
    if manifest is not None:
        doc["resolution"] = manifest.resolution
    if getattr(args, "config", None):
        file_doc = _read_config_file(args.config)
        if isinstance(file_doc.get("weights"), dict):
            doc["weights"] = {**doc["weights"], **file_doc.pop("weights")}
        doc.update(file_doc)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            doc["seed"] = int(env_seed)
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    known = {f.name for f in fields(TrainConfig)}
    for key, value in vars(args).items():
        if key in known and value is not None:
            doc[key] = value
    return TrainConfig.from_dict(doc)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_make_data(args) -> int:
    check_resolution(args.resolution)
    manifest = make_toy_faces(args.n, args.resolution, args.seed, args.out)
    print(f"wrote {len(manifest)} images and {manifest.root / 'manifest.json'}")
    return 0


def cmd_pretrain(args) -> int:
    manifest = DatasetManifest.from_file(_require(args.data))
    cfg = resolve_config(args, manifest)
    out = _out_dir(args.out)
    _write_json(out / RESOLVED_CONFIG, cfg.to_dict())
    pretrain_gan(manifest, cfg, out=out / "gan.ckpt", log_path=out / "gan_log.jsonl")
    print(f"wrote {out / 'gan.ckpt'}")
    return 0


def cmd_train(args) -> int:
    manifest = DatasetManifest.from_file(_require(args.data))
    gan = load_checkpoint(_require(args.gan))
    cfg = resolve_config(args, manifest)
    out = _out_dir(args.out)
    _write_json(out / RESOLVED_CONFIG, cfg.to_dict())
    train_inversion(manifest, cfg, gan, out=out / "model.ckpt", log_path=out / "train_log.jsonl")
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def _load_model(path):
    bundle = load_checkpoint(_require(path))
    return bundle.model().eval(), bundle.config


def cmd_invert(args) -> int:
    model, cfg = _load_model(args.model)
    image = _require(args.image)
    with PILImage.open(image) as im:
        size = im.size
    if size != (cfg.resolution, cfg.resolution):
        raise ValidationError(
            f"image is {size[0]}x{size[1]}, model expects {cfg.resolution}x{cfg.resolution}"
        )
    x = load_image(image, cfg.resolution)
    w_b, _, y0, y = invert(x, model)
    out = _out_dir(args.out)
    save_image(y0, out / "y0.png")
    save_image(y, out / "y.png")
    # delta lies in [-2, 2]; (delta + 2) / 4 maps it onto [0, 1], which is delta / 2 in [-1, 1]
    save_image(np.clip((x - y0) / 2, -1, 1), out / "delta.png")
    _write_json(out / "codes.json", {"shape": list(w_b.shape), "w_b": w_b.tolist()})
    _write_json(out / RESOLVED_CONFIG, {"model": str(args.model), "image": str(args.image),
                                        "config": cfg.to_dict()})
    print(f"wrote y0.png, y.png, delta.png, codes.json to {out}")
    return 0


def preview_grid(triples) -> np.ndarray:
    """Rows: originals, initial reconstructions, final reconstructions."""
    rows = [np.concatenate([t[k] for t in triples], axis=1) for k in range(3)]
    return np.concatenate(rows, axis=0)


def cmd_evaluate(args) -> int:
    manifest = DatasetManifest.from_file(_require(args.data))
    if args.model == "identity":
        model, cfg_doc = IdentityModel(), None
    else:
        model, cfg = _load_model(args.model)
        cfg_doc = cfg.to_dict()
        if cfg.resolution != manifest.resolution:
            raise ValidationError(
                f"model is {cfg.resolution}px, dataset is {manifest.resolution}px"
            )
    out = _out_dir(args.out)
    k = max(1, min(args.grid, GRID_MAX))
    report, kept = evaluate_dataset(manifest, model, out=out, keep_images=k)
    if kept:
        save_image(preview_grid(kept), out / "grid.png")
    _write_json(out / RESOLVED_CONFIG, {"model": str(args.model), "data": str(args.data),
                                        "grid": k, "config": cfg_doc})
    rate = report.success_rate()
    mean = report.mean()
    print(f"{len(report.rows)}/{report.total} images scored"
          + "".join(f"  {c} {mean[c]:.4f}" for c in COLUMNS if c in mean))
    if report.failed:
        print("failed: " + ", ".join(report.failed), file=sys.stderr)
    return 0 if rate >= PASS_RATE else 1


def compare_reports(reports: dict[str, MetricReport]):
    """Mean table plus, per column, the labels holding the best (highest) value."""
    ids = None
    for label, rep in reports.items():
        these = sorted(rep.ids)
        if ids is None:
            ids = these
        elif these != ids:
            raise ValidationError(f"report {label} covers different image ids")
    means = {label: rep.mean() for label, rep in reports.items()}
    best = {}
    for c in COLUMNS:
        top = max(m[c] for m in means.values())
        best[c] = [label for label, m in means.items() if m[c] == top]
    return means, best


def format_comparison(means, best) -> tuple[str, str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("report",) + COLUMNS)
    for label, m in means.items():
        w.writerow([label] + [repr(m[c]) for c in COLUMNS])
    w.writerow(["best"] + [";".join(best[c]) for c in COLUMNS])

    cells = [["report", *COLUMNS]]
    for label, m in means.items():
        cells.append([label] + [f"{m[c]:.4f}" + ("*" if label in best[c] else " ") for c in COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    lines = ["  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i])
                       for i, cell in enumerate(row)) for row in cells]
    lines.append("* best in column")
    return buf.getvalue(), "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise ValidationError("compare needs at least two reports")
    reports = {}
    for path in args.reports:
        _require(path)
        label = str(path)
        if label in reports:  # the same file listed twice still gets its own row
            label = f"{path} ({sum(k.startswith(str(path)) for k in reports) + 1})"
        try:
            reports[label] = MetricReport.load(path)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed report {path}: {exc}") from exc
    means, best = compare_reports(reports)
    table_csv, table_txt = format_comparison(means, best)
    if args.out:
        out = _out_dir(args.out)
        (out / "compare.csv").write_text(table_csv)
        (out / "compare.txt").write_text(table_txt)
    print(table_txt, end="")
    return 0


def _add_training_flags(p):
    p.add_argument("--config", help="TOML or JSON file with config keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="egain", description="Wavelet GAN inversion with delta fusion.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render the procedural toy-face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", help="adversarially pretrain the generator")
    p.add_argument("--data", required=True, help="dataset dir or manifest.json")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.add_argument("--gan-steps", dest="gan_steps", type=int)
    p.add_argument("--gan-lr", dest="gan_learning_rate", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the inversion encoders on a frozen generator")
    p.add_argument("--data", required=True)
    p.add_argument("--gan", required=True, help="checkpoint written by pretrain")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.add_argument("--fusion", dest="fusion_mode", choices=FUSION_MODES)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invert", help="invert one image with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("evaluate", help="score a model on a dataset")
    p.add_argument("--model", required=True, help="model checkpoint, or 'identity'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=GRID_MAX, help="images in the preview grid")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="tabulate metrics.json reports side by side")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except EgainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
