"""Command-line entry point: ``sanpose <command> [--config FILE] [--set key=value ...] --out DIR``.

Every command resolves its settings from built-in defaults, then the YAML file, then the
``--set`` overrides, then ``--seed``. The resolved settings are written to ``<out>/config.yaml``
and passing that file back through ``--config`` repeats the run exactly.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import reid
from .config import build, parse_overrides, read_file, write_echo
from .data import (SynthConfig, _decode, colorize_labels, encode_semantic_onehot, image_to_tensor,
                   load_dataset, load_tensors, synth_generate, tensor_to_image)
from .errors import ConfigError, DataError, MissingFileError, SanError, SizeMismatchError
from .generator import generate
from .losses import FeatureExtractor
from .trainer import TrainConfig, evaluate_generator, load_generator, make_config, probe_pairs, train

log = logging.getLogger("sanpose")


@dataclass(frozen=True)
class GenerateConfig:
    checkpoint: str = ""
    data: str = ""
    split: str = "test"
    pairs: tuple = ()          # "<id>_<pose>:<id>_<pose>" names from the split
    triples: tuple = ()        # [source image, target map, target mask(, source map, source mask)] paths
    num_pairs: int = 8         # random probe pairs when neither list is given
    seed: int = 0


@dataclass(frozen=True)
class EvaluateConfig:
    checkpoint: str = ""
    data: str = ""
    split: str = "test"
    probe_pairs: int = 128
    extractor_seed: int = 4321
    extractor_channels: tuple = (16, 32, 64)
    batch_size: int = 64


@dataclass(frozen=True)
class AugmentConfig:
    data: str = ""
    split: str = "train"
    checkpoint: str = ""
    factor: int = 2
    seed: int = 0


@dataclass(frozen=True)
class ReidTrainConfig:
    data: str = ""
    split: str = "train"
    alpha: int = 1
    generator_checkpoint: str = ""
    channels: int = 16
    embed_dim: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class ReidEvalConfig:
    data: str = ""
    train_split: str = "train"
    test_split: str = "test"
    alpha: int = 1
    generator_checkpoint: str = ""
    metric_kind: str = "euclidean"
    seeds: tuple = (0, 1, 2)
    queries_per_id: int = 2
    channels: int = 16
    embed_dim: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3


def _embed_cfg(cfg, seed: int) -> reid.EmbedderConfig:
    return reid.EmbedderConfig(channels=cfg.channels, embed_dim=cfg.embed_dim, epochs=cfg.epochs,
                               batch_size=cfg.batch_size, lr=cfg.lr, seed=seed)


def _require(value: str, key: str) -> str:
    if not value:
        raise ConfigError(f"missing required setting {key!r} (use --set {key}=...)")
    return value


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---- commands -------------------------------------------------------------------


def cmd_synth(cfg: SynthConfig, out: Path, args) -> None:
    manifest = synth_generate(cfg, out)
    log.info("wrote %d train records under %s", len(manifest.records), out)


def cmd_train(cfg: TrainConfig, out: Path, args) -> None:
    _require(cfg.data, "data")

    def progress(epoch, ev):
        log.info("epoch %d  %s", epoch, "  ".join(f"{k}={v:.4f}" for k, v in ev.items() if k != "n_pairs"))

    final = train(cfg, out, resume=args.resume, progress=progress)
    log.info("final checkpoint %s", final)


def _sheet(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    h, w = rows[0][0].shape[:2]
    cols = max(len(r) for r in rows)
    sheet = np.full((len(rows) * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y:y + h, x:x + w] = tile
    return sheet


def _mask_tile(mask: np.ndarray) -> np.ndarray:
    return np.repeat((np.asarray(mask) > 0).astype(np.uint8)[..., None] * 255, 3, axis=2)


def cmd_generate(cfg: GenerateConfig, out: Path, args) -> None:
    """Contact sheet with one row per request: source | target map | target mask | output [| truth]."""
    gen, run_cfg = load_generator(_require(cfg.checkpoint, "checkpoint"))
    num_labels = gen.config.num_labels
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.triples:
        for k, triple in enumerate(cfg.triples):
            if len(triple) not in (3, 5):
                raise ConfigError(f"triple {k} must list [source image, target map, target mask] "
                                  "optionally followed by [source map, source mask]")
            paths = [Path(p) for p in triple]
            for p in paths:
                if not p.is_file():
                    raise MissingFileError(f"file not found: {p}")
            with Image.open(paths[0]) as im:
                src_rgb = np.asarray(im.convert("RGB"))
            tgt_lab, tgt_mask, *src_extra = (_decode(p) for p in paths[1:])
            sizes = {a.shape[:2] for a in (src_rgb, tgt_lab, tgt_mask, *src_extra)}
            if len(sizes) > 1:
                raise SizeMismatchError(f"triple {k}: spatial sizes disagree: {sorted(sizes)}")
            if src_extra:
                src_lab, src_mask = src_extra
            else:
                # no source parsing: treat the whole picture as unlabelled foreground
                src_lab, src_mask = np.zeros(src_rgb.shape[:2], np.int64), np.ones(src_rgb.shape[:2])

            def onehot(lab):
                return torch.from_numpy(encode_semantic_onehot(lab, num_labels)).float()[None]

            def binary(m):
                return torch.from_numpy((np.asarray(m) > 0).astype(np.float32))[None, None]

            batch = {"img_src": image_to_tensor(src_rgb)[None], "mask_src": binary(src_mask),
                     "sem_src": onehot(src_lab), "mask_tgt": binary(tgt_mask), "sem_tgt": onehot(tgt_lab)}
            with torch.no_grad():
                fake = tensor_to_image(generate(gen, batch, run_cfg.disable_mask)[0])
            Image.fromarray(fake).save(out / "images" / f"triple_{k:03d}.png")
            rows.append([src_rgb, colorize_labels(tgt_lab, num_labels), _mask_tile(tgt_mask), fake])
    else:
        manifest = load_dataset(_require(cfg.data, "data"), cfg.split)
        data = load_tensors(manifest)
        if cfg.pairs:
            index = {name: i for i, name in enumerate(data.names)}
            src, tgt = [], []
            for item in cfg.pairs:
                a, sep, b = str(item).partition(":")
                if not sep:
                    raise ConfigError(f"pair {item!r} is not '<source>:<target>'")
                for name in (a, b):
                    if name not in index:
                        raise DataError(f"record {name!r} not in {manifest.split_dir}")
                src.append(index[a])
                tgt.append(index[b])
        else:
            src, tgt = probe_pairs(manifest, cfg.seed, cfg.num_pairs)
        batch = data.inputs(src, tgt)
        with torch.no_grad():
            fakes = generate(gen, batch, run_cfg.disable_mask)
        for i, j, fake in zip(src, tgt, fakes):
            fake = tensor_to_image(fake)
            Image.fromarray(fake).save(out / "images" / f"{data.names[i]}__{data.names[j]}.png")
            rows.append([tensor_to_image(data.images[i]),
                         colorize_labels(data.labels[j].numpy(), num_labels),
                         _mask_tile(data.masks[j, 0].numpy()), fake, tensor_to_image(data.images[j])])
    if not rows:
        raise ConfigError("nothing to generate")
    Image.fromarray(_sheet(rows)).save(out / "sheet.png")
    log.info("wrote %d rows to %s", len(rows), out / "sheet.png")


def cmd_evaluate(cfg: EvaluateConfig, out: Path, args) -> None:
    gen, run_cfg = load_generator(_require(cfg.checkpoint, "checkpoint"))
    manifest = load_dataset(_require(cfg.data, "data"), cfg.split)
    extractor = FeatureExtractor(cfg.extractor_channels, seed=cfg.extractor_seed)
    ev = evaluate_generator(gen, manifest, load_tensors(manifest), extractor, cfg.extractor_seed,
                            cfg.probe_pairs, run_cfg.disable_mask, cfg.batch_size)
    report = {
        "fid": ev["fid"],
        "lpips_mean": ev["lpips"],
        "mask_lpips_mean": ev["mask_lpips"],
        "masked_l1_mean": ev["masked_l1"],
        "n_pairs": ev["n_pairs"],
        "extractor_seed": cfg.extractor_seed,
    }
    _write_json(out / "report.json", report)
    log.info("%s", report)


def cmd_augment(cfg: AugmentConfig, out: Path, args) -> None:
    manifest = load_dataset(_require(cfg.data, "data"), cfg.split)
    if cfg.factor > 1:
        _require(cfg.checkpoint, "checkpoint")
    result = reid.augment(manifest, cfg.checkpoint or None, cfg.factor, cfg.seed, out)
    if result is manifest:
        log.info("factor 1: nothing to add, %s left as is", manifest.split_dir)
    else:
        log.info("wrote %d records to %s", len(result.records), out / cfg.split)


def cmd_reid_train(cfg: ReidTrainConfig, out: Path, args) -> None:
    manifest = load_dataset(_require(cfg.data, "data"), cfg.split)
    if cfg.alpha > 1:
        manifest = reid.augment(manifest, _require(cfg.generator_checkpoint, "generator_checkpoint"),
                                cfg.alpha, cfg.seed, out / "augmented")
    model, info = reid.train_ide(manifest, _embed_cfg(cfg, cfg.seed))
    reid.save_embedder(out / "embedder.ckpt", model, manifest.identities())
    _write_json(out / "train_info.json", info)
    log.info("%s", info)


def cmd_reid_eval(cfg: ReidEvalConfig, out: Path, args) -> None:
    root = _require(cfg.data, "data")
    train_m, test_m = load_dataset(root, cfg.train_split), load_dataset(root, cfg.test_split)
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    per_seed = []
    for seed in cfg.seeds:
        res = reid.run_protocol(train_m, test_m, _embed_cfg(cfg, int(seed)), alpha=cfg.alpha,
                                generator_ckpt=cfg.generator_checkpoint or None,
                                metric_kind=cfg.metric_kind, work_dir=out / "work",
                                queries_per_id=cfg.queries_per_id)
        per_seed.append({"seed": int(seed), **res})
        log.info("seed %d  %s", seed, res)
    report = {"metric_kind": cfg.metric_kind, "alpha": cfg.alpha, "seeds": [int(s) for s in cfg.seeds],
              "per_seed": per_seed}
    for key in ("rank1", "rank5", "rank10", "mAP"):
        report[key] = float(np.mean([r[key] for r in per_seed]))
    _write_json(out / "reid_report.json", report)


COMMANDS = {
    "synth": (SynthConfig, cmd_synth, "render the procedural train/test dataset"),
    "train": (TrainConfig, cmd_train, "train the pose-transfer GAN"),
    "generate": (GenerateConfig, cmd_generate, "render pose-transfer contact sheets"),
    "evaluate": (EvaluateConfig, cmd_evaluate, "FID / LPIPS / mask-LPIPS report for a checkpoint"),
    "reid-train": (ReidTrainConfig, cmd_reid_train, "train an identity-classification embedder"),
    "reid-eval": (ReidEvalConfig, cmd_reid_eval, "multi-seed re-identification experiment"),
    "augment": (AugmentConfig, cmd_augment, "add generated poses to a training split"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML file of settings")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
    return parser


def resolve(command: str, config_path, overrides, seed):
    cls = COMMANDS[command][0]
    file_layer = read_file(config_path)
    override_layer = parse_overrides(overrides)
    seed_layer = {} if seed is None else {"seed": seed}
    if seed is not None and "seed" not in {f for f in cls.__dataclass_fields__}:
        raise ConfigError(f"{command} has no seed setting; use --set seeds=[...]")
    if cls is TrainConfig:
        preset = {**file_layer, **override_layer}.get("preset", "synthetic")
        return make_config(preset, file_layer, override_layer, seed_layer)
    return build(cls, file_layer, override_layer, seed_layer)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.command, args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_echo(cfg, out / "config.yaml")
        COMMANDS[args.command][1](cfg, out, args)
    except SanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
