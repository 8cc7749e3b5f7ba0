"""Command-line entry point.

Subcommands: gen (synthetic corpus), pretrain (training run), eval
(zeroshot / ground / probe), ablate (scale-toggle matrix). Exit codes:
0 success, 2 usage error, 3 runtime failure. Every output directory gets
one manifest.json describing how to re-derive its contents; commands
refuse to write into a non-empty directory unless --force is given.
"""

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from qsvlm import checkpoint as ckpt_io
from qsvlm import data as data_mod
from qsvlm.config import ConfigError, TrainConfig, config_to_ini, load_config
from qsvlm.evaluation import (
    aggregate_ablation,
    default_class_prompts,
    evaluate_grounding,
    format_ablation_table,
    linear_probe,
    model_from_checkpoint,
    run_ablation,
    upsample_heatmap,
    zero_shot_classify,
)
from qsvlm.training import NonFiniteLossError, configure_threads, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def corpus_content_hash(corpus_dir: Path) -> str:
    """Content hash over the corpus data files, ordered by relative path.

    manifest.json is excluded: it records command metadata (timestamps,
    absolute paths), not corpus content.
    """
    corpus_dir = Path(corpus_dir)
    h = hashlib.sha256()
    for path in sorted(p for p in corpus_dir.rglob("*") if p.is_file()):
        if path.name == "manifest.json":
            continue
        h.update(str(path.relative_to(corpus_dir)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise RuntimeError(
                f"output directory {out} is not empty; pass --force to overwrite"
            )
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, command: str, args: dict, seed: int,
                   config_text: str = "", config_path: str = "",
                   corpus_hash: str = "") -> None:
    manifest = {
        "command": command,
        "args": {k: str(v) for k, v in args.items()},
        "seed": seed,
        "config_path": config_path,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "corpus_hash": corpus_hash,
        "out_dir": str(out),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_train_config(path) -> tuple[TrainConfig, str]:
    if path is None:
        config = TrainConfig()
        return config, config_to_ini(config)
    text = Path(path).read_text()
    return load_config(path), text


def cmd_gen(args) -> int:
    config, config_text = _load_train_config(args.config)
    out = Path(args.out)
    prepare_out_dir(out, args.force)
    samples = data_mod.generate_corpus(args.n, config.data, args.seed)
    data_mod.save_corpus(samples, out, config.data, args.seed)
    write_manifest(out, "gen", vars(args), args.seed, config_text,
                   str(args.config or ""), corpus_content_hash(out))
    print(f"wrote {len(samples)} samples to {out}")
    print(f"corpus hash {corpus_content_hash(out)}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config, config_text = _load_train_config(args.config)
    samples = data_mod.load_corpus(args.data)
    out = Path(args.out)
    prepare_out_dir(out, args.force)

    resume = None
    if args.resume:
        resume = ckpt_io.load_checkpoint(args.resume)
        config = replace(resume.config, steps=config.steps)
    try:
        ckpt, records = train(config, samples, out_dir=out, resume=resume)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for key, value in exc.components.items():
            print(f"  {key} = {value}", file=sys.stderr)
        return EXIT_RUNTIME
    ckpt_path = out / "checkpoint.qsvlm"
    ckpt_io.save_checkpoint(ckpt, ckpt_path)
    (out / "config.ini").write_text(config_to_ini(config))
    write_manifest(out, "pretrain", vars(args), config.seed, config_text,
                   str(args.config or ""),
                   corpus_content_hash(Path(args.data)))
    last = records[-1]["total"] if records else float("nan")
    print(f"trained {ckpt.step} steps; final total loss {last:.4f}")
    print(f"checkpoint {ckpt_path}")
    print(f"checkpoint hash {ckpt_io.checkpoint_hash(ckpt)}")
    return EXIT_OK


def _write_overlay(image: np.ndarray, heatmap: np.ndarray, box, patch_size: int,
                   path: Path) -> None:
    """Grayscale base with heatmap-red blend and the ground-truth box outline."""
    from PIL import Image, ImageDraw

    base = np.clip(image[0] * 255.0, 0, 255).astype(np.uint8)
    heat = upsample_heatmap(heatmap, patch_size)
    lo, hi = heat.min(), heat.max()
    heat01 = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    rgb = np.stack([base, base, base], axis=-1).astype(np.float64)
    rgb[..., 0] = np.clip(rgb[..., 0] * 0.5 + 255.0 * 0.7 * heat01, 0, 255)
    img = Image.fromarray(rgb.astype(np.uint8), mode="RGB")
    if box is not None:
        draw = ImageDraw.Draw(img)
        draw.rectangle([box[0], box[1], box[2] - 1, box[3] - 1], outline=(0, 255, 0))
    img.save(path)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text).strip("_")


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    samples = data_mod.load_corpus(args.data)
    image_size = data_mod.corpus_image_size(args.data)
    if image_size != ckpt.config.encoder.image_size:
        raise RuntimeError(
            f"corpus image size {image_size} does not match checkpoint encoder "
            f"image size {ckpt.config.encoder.image_size}"
        )
    model = model_from_checkpoint(ckpt)
    out = Path(args.out)
    prepare_out_dir(out, args.force)

    if args.task == "zeroshot":
        prompts = default_class_prompts()
        report, _ = zero_shot_classify(model, samples, prompts)
        result = report.as_record()
    elif args.task == "ground":
        report, results = evaluate_grounding(model, samples, mode=args.mode,
                                             threshold_k=args.threshold_k,
                                             limit=args.limit)
        overlays = out / "overlays"
        overlays.mkdir(exist_ok=True)
        seen: dict[str, int] = {}
        for res in results:
            slug = _slug(res.sentence)
            seen[slug] = seen.get(slug, 0) + 1
            name = f"{slug}_{seen[slug]:03d}.png"
            _write_overlay(res.image, res.heatmap, res.gt_box,
                           ckpt.config.encoder.patch_size, overlays / name)
        result = report.as_record()
    elif args.task == "probe":
        split = len(samples) // 2
        if split < 2:
            raise RuntimeError("probe needs at least 4 samples to split")
        rows = {}
        for fraction in args.fractions:
            rows[str(fraction)] = linear_probe(model, samples[:split], samples[split:],
                                               fraction, seed=ckpt.config.seed)
        result = {"task": "probe", "auc_by_fraction": rows}
        for fraction, auc in rows.items():
            print(f"fraction {fraction}: auc {auc:.4f}")
    else:  # pragma: no cover - argparse restricts choices
        raise RuntimeError(f"unknown task {args.task}")

    with open(out / "report.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    write_manifest(out, f"eval:{args.task}", vars(args), ckpt.config.seed,
                   corpus_hash=corpus_content_hash(Path(args.data)))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    config, config_text = _load_train_config(args.config)
    samples = data_mod.load_corpus(args.data)
    out = Path(args.out)
    prepare_out_dir(out, args.force)

    n = len(samples)
    train_end = int(n * 0.6)
    probe_end = int(n * 0.8)
    train_samples = samples[:train_end]
    probe_train = samples[train_end:probe_end]
    eval_samples = samples[probe_end:]
    prompts = default_class_prompts()
    seeds = [config.seed + i for i in range(args.seeds)]
    tables = run_ablation(config, train_samples, probe_train, eval_samples,
                          eval_samples, prompts, seeds,
                          probe_fraction=args.probe_fraction)

    failures = 0
    rows_total = 0
    for seed, rows in tables.items():
        text = format_ablation_table(rows)
        (out / f"ablation_seed_{seed}.txt").write_text(text + "\n")
        with open(out / f"ablation_seed_{seed}.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row.__dict__, sort_keys=True) + "\n")
        rows_total += len(rows)
        failures += sum(1 for r in rows if r.error is not None)
        print(f"seed {seed}")
        print(text)
    agg = aggregate_ablation(tables)
    (out / "ablation_aggregate.txt").write_text(format_ablation_table(agg) + "\n")
    with open(out / "ablation_aggregate.jsonl", "w") as fh:
        for row in agg:
            fh.write(json.dumps(row.__dict__, sort_keys=True) + "\n")
    print("aggregate over seeds")
    print(format_ablation_table(agg))
    write_manifest(out, "ablate", vars(args), config.seed, config_text,
                   str(args.config or ""), corpus_content_hash(Path(args.data)))
    if failures == rows_total:
        print("error: every ablation row failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsvlm",
                                     description="quad-scale vision-language pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--n", type=int, required=True, help="number of samples")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", default=None, help="INI config (data section)")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(fn=cmd_gen)

    pre = sub.add_parser("pretrain", help="run the four-scale training loop")
    pre.add_argument("--config", default=None)
    pre.add_argument("--data", required=True, help="corpus directory")
    pre.add_argument("--out", required=True)
    pre.add_argument("--resume", default=None, help="checkpoint to resume from")
    pre.add_argument("--force", action="store_true")
    pre.set_defaults(fn=cmd_pretrain)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--task", choices=("zeroshot", "ground", "probe"), required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--limit", type=int, default=None)
    ev.add_argument("--mode", choices=("cosine", "attention"), default="cosine")
    ev.add_argument("--threshold-k", dest="threshold_k", type=float, default=1.0)
    ev.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate", help="run the 7-row scale-toggle matrix")
    ab.add_argument("--config", default=None)
    ab.add_argument("--data", required=True)
    ab.add_argument("--seeds", type=int, default=1, help="number of seeds")
    ab.add_argument("--probe-fraction", dest="probe_fraction", type=float, default=0.1)
    ab.add_argument("--out", required=True)
    ab.add_argument("--force", action="store_true")
    ab.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "n", None) is not None and args.n < 1:
        parser.error("--n must be >= 1")
    if getattr(args, "seeds", None) is not None and args.seeds < 1:
        parser.error("--seeds must be >= 1")
    configure_threads()
    try:
        return args.fn(args)
    except (ConfigError, ckpt_io.CheckpointError, RuntimeError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
