"""Command-line entry point: `sucode <verb> [flags]`.

Verbs: synth, train, enhance, eval, ablate {codebook-size, mask, classes},
inspect.  Exit codes: 0 success, 1 domain error, 2 usage error.  Log level
comes from SUCODE_LOG_LEVEL in {debug, info, warn}.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace

import numpy as np

from . import synth
from .config import RunConfig, parse_config, with_overrides
from .data import (dataset_ids, load_image, load_mask, save_image, save_mask,
                   triplet_paths)
from .errors import SucodeError
from .checkpoint import load_checkpoint
from .metrics import EvalRow, evaluate_dataset
from .quantize import downsample_mask, usage_stats
from .trainer import (build_components, build_inference_components, enhance,
                      load_component, run_stage, to_tensor)

log = logging.getLogger("sucode")


def _setup_logging() -> None:
    level = os.environ.get("SUCODE_LOG_LEVEL", "info").lower()
    mapping = {"debug": logging.DEBUG, "info": logging.INFO,
               "warn": logging.WARNING}
    logging.basicConfig(level=mapping.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> RunConfig:
    config = parse_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = with_overrides(config, seed=args.seed)
    return config


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = _load_config(args)
    palette = synth.default_palette(args.classes)
    spec = synth.SceneSpec(size=args.size, object_count=args.objects,
                           palette=palette, seed=config.seed)
    params = synth.DegradationParams()
    rows = synth.build_dataset(args.count, spec, params, args.out)
    log.info("wrote %d triplets under %s", len(rows), args.out)
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    bundle = run_stage(args.stage, config, args.data,
                       init_from=args.init_from, out_dir=args.out,
                       max_steps=args.max_steps, epochs=args.epochs)
    log.info("stage %d finished; checkpoint has %d arrays",
             args.stage, len(bundle.manifest))
    return 0


def cmd_enhance(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    comps = build_inference_components(bundle)
    os.makedirs(args.out, exist_ok=True)
    if os.path.isdir(args.input):
        names = sorted(n for n in os.listdir(args.input) if n.endswith(".png"))
        paths = [os.path.join(args.input, n) for n in names]
    else:
        paths = [args.input]
    for path in paths:
        img = load_image(path)
        out = enhance(img, bundle, comps)
        save_image(out, os.path.join(args.out, os.path.basename(path)))
    log.info("enhanced %d image(s) into %s", len(paths), args.out)
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dataset(args.pred, args.ref)
    text = report.to_json() if args.json else report.to_csv()
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# ablation harnesses
# ---------------------------------------------------------------------------

def _train_all_stages(config: RunConfig, data_root: str, out_dir: str) -> str:
    ckpt = None
    for stage in (1, 2, 3):
        stage_dir = os.path.join(out_dir, f"stage{stage}")
        run_stage(stage, config, data_root, init_from=ckpt, out_dir=stage_dir)
        ckpt = os.path.join(stage_dir, "checkpoint")
    return ckpt


def _eval_enhanced(ckpt_path: str, test_root: str, out_dir: str) -> EvalRow:
    bundle = load_checkpoint(ckpt_path)
    comps = build_inference_components(bundle)
    pred_dir = os.path.join(out_dir, "pred")
    os.makedirs(pred_dir, exist_ok=True)
    for sample_id in dataset_ids(test_root):
        raw_path, _, _ = triplet_paths(test_root, sample_id)
        out = enhance(load_image(raw_path), bundle, comps)
        save_image(out, os.path.join(pred_dir, f"{sample_id}.png"))
    report = evaluate_dataset(pred_dir, os.path.join(test_root, "ref"))
    _write_text(os.path.join(out_dir, "report.csv"), report.to_csv())
    return report.aggregate()


def _ablation_table(rows: list[tuple[str, EvalRow]]) -> str:
    lines = ["variant,psnr,ssim,uciqe,uiqm"]
    for name, row in rows:
        lines.append(f"{name},{row.psnr:.6f},{row.ssim:.6f},"
                     f"{row.uciqe:.6f},{row.uiqm:.6f}")
    return "\n".join(lines) + "\n"


def _copy_dataset(src: str, dst: str, perturb_range=None, remap=None,
                  seed: int = 0) -> None:
    for sub in ("raw", "mask", "ref"):
        os.makedirs(os.path.join(dst, sub), exist_ok=True)
    rows = []
    for i, sample_id in enumerate(dataset_ids(src)):
        raw_path, mask_path, ref_path = triplet_paths(src, sample_id)
        shutil.copyfile(raw_path, os.path.join(dst, "raw", f"{sample_id}.png"))
        if ref_path:
            shutil.copyfile(ref_path, os.path.join(dst, "ref", f"{sample_id}.png"))
        radius = 0
        if mask_path:
            mask = load_mask(mask_path)
            if perturb_range is not None:
                mask = synth.perturb_mask(mask, perturb_range, seed=seed + i)
                radius = perturb_range[1]
            if remap is not None:
                mask = synth.remap_mask_classes(mask, remap)
            save_mask(mask, os.path.join(dst, "mask", f"{sample_id}.png"))
        rows.append((sample_id, seed + i, radius))
    synth.write_manifest(rows, os.path.join(dst, "manifest.txt"))


def _parse_range(text: str) -> tuple[int, int]:
    if "-" in text:
        lo, hi = text.split("-", 1)
        return int(lo), int(hi)
    value = int(text)
    return value, value


def cmd_ablate(args) -> int:
    config = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    rows: list[tuple[str, EvalRow]] = []

    if args.kind == "codebook-size":
        for cell in args.grid:
            n, dim = (int(v) for v in cell.lower().split("x"))
            variant = with_overrides(config, codebook_entries=n, embed_dim=dim)
            work = os.path.join(args.out, f"grid_{n}x{dim}")
            ckpt = _train_all_stages(variant, args.data, work)
            rows.append((f"{n}x{dim}", _eval_enhanced(ckpt, args.test_data, work)))
        table_name = "ablation_codebook_size.csv"
    elif args.kind == "mask":
        for cell in args.ranges:
            rng = _parse_range(cell)
            work = os.path.join(args.out, f"range_{rng[0]}_{rng[1]}")
            data_dir = os.path.join(work, "data")
            _copy_dataset(args.data, data_dir, perturb_range=rng,
                          seed=config.seed)
            ckpt = _train_all_stages(config, data_dir, work)
            rows.append((f"{rng[0]}-{rng[1]}",
                         _eval_enhanced(ckpt, args.test_data, work)))
        table_name = "ablation_mask.csv"
    else:  # classes
        schemes = {"8": None, "6": synth.MERGE_8_TO_6, "4": synth.MERGE_8_TO_4}
        class_counts = {"8": 8, "6": 6, "4": 4}
        for scheme in args.schemes:
            if scheme not in schemes:
                raise SucodeError(f"unknown merge scheme {scheme!r}")
            remap = schemes[scheme]
            work = os.path.join(args.out, f"classes_{scheme}")
            data_dir = os.path.join(work, "data")
            identity = {c: c for c in range(config.class_count)}
            _copy_dataset(args.data, data_dir,
                          remap=remap if remap is not None else identity,
                          seed=config.seed)
            variant = with_overrides(config,
                                     class_count=class_counts[scheme])
            ckpt = _train_all_stages(variant, data_dir, work)
            rows.append((scheme, _eval_enhanced(ckpt, args.test_data, work)))
        table_name = "ablation_classes.csv"

    table = _ablation_table(rows)
    _write_text(os.path.join(args.out, table_name), table)
    sys.stdout.write(table)
    return 0


def cmd_inspect(args) -> int:
    import torch

    bundle = load_checkpoint(args.ckpt)
    config = bundle.config_snapshot
    os.makedirs(args.out, exist_ok=True)

    from .trainer import bundle_has
    stage1 = bundle_has(bundle, "enc_q")
    comps = build_components(config, stage=1 if stage1 else 2)
    names = ("codebooks", "enc_q", "dec_q") if stage1 else \
        ("codebooks", "enc_r", "wpred", "dec_r")
    for name in names:
        load_component(name, comps[name], bundle)
    for module in comps.values():
        module.eval()
        module.requires_grad_(False)

    # usage statistics over the dataset
    books = comps["codebooks"]
    results = []
    with torch.no_grad():
        for sample_id in dataset_ids(args.data):
            raw_path, mask_path, _ = triplet_paths(args.data, sample_id)
            raw = load_image(raw_path)
            enc = comps["enc_q"] if stage1 else comps["enc_r"]
            z = enc(to_tensor(raw))
            if stage1 and mask_path:
                mask = load_mask(mask_path)
                mask_lr = downsample_mask(torch.from_numpy(mask).long(),
                                          config.downsample_factor)
                results.append(books.quantize_with_mask(z, mask_lr.unsqueeze(0)))
            else:
                # attribute each location to its dominant predicted class
                hard = comps["wpred"](z).argmax(dim=1)
                results.append(books.quantize_with_mask(z, hard))
    stats = usage_stats(results, books.class_count, books.entries)
    lines = ["class,used_entries,perplexity"]
    for c in range(books.class_count):
        used = int((stats.counts[c] > 0).sum())
        lines.append(f"{c},{used},{float(stats.perplexity_per_class[c]):.4f}")
    _write_text(os.path.join(args.out, "usage.csv"), "\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")

    # decode a small grid of the most used entries per class
    dec = comps["dec_q"] if stage1 else comps["dec_r"]
    tile = 4
    with torch.no_grad():
        for c in range(books.class_count):
            order = torch.argsort(stats.counts[c], descending=True)[:16]
            tiles = []
            for j in order.tolist():
                z = books.books[c, j].view(1, -1, 1, 1).repeat(1, 1, tile, tile)
                out = dec(z)
                if isinstance(out, tuple):
                    out = out[0]
                tiles.append(out[0].clamp(0, 1))
            grid = torch.cat([torch.cat(tiles[i * 4:(i + 1) * 4], dim=2)
                              for i in range(4)], dim=1)
            save_image(grid.permute(1, 2, 0).numpy(),
                       os.path.join(args.out, f"codebook_class{c}.png"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sucode")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic triplet dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--objects", type=int, default=6)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", dest="init_from", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance images with a stage-3 checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score a directory of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation harness")
    ab = p.add_subparsers(dest="kind", required=True)
    for kind in ("codebook-size", "mask", "classes"):
        q = ab.add_parser(kind)
        common(q)
        q.add_argument("--data", required=True)
        q.add_argument("--test-data", dest="test_data", required=True)
        q.add_argument("--out", required=True)
        if kind == "codebook-size":
            q.add_argument("--grid", nargs="+", required=True,
                           metavar="NxDIM")
        elif kind == "mask":
            q.add_argument("--ranges", nargs="+", required=True,
                           metavar="LO-HI")
        else:
            q.add_argument("--schemes", nargs="+", required=True,
                           choices=("8", "6", "4"))
        q.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump codebook usage stats and grids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def dispatch(argv: list[str]) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except SucodeError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
