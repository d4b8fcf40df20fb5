"""Pilot run for the toy end-to-end protocol; prints the threshold numbers."""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sucode.config import RunConfig
from sucode.data import load_image, load_mask, dataset_ids, triplet_paths
from sucode.metrics import psnr, ssim
from sucode.synth import SceneSpec, DegradationParams, build_dataset, default_palette
from sucode.trainer import (build_inference_components, enhance,
                            reconstruct_stage1, run_stage)
from sucode.checkpoint import load_checkpoint

ROOT = sys.argv[1] if len(sys.argv) > 1 else "/tmp/sucode_pilot"
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 40


def main():
    t0 = time.time()
    cfg = RunConfig(class_count=3, codebook_entries=32, embed_dim=16,
                    image_size=64, epochs=EPOCHS, batch_size=4, seed=7,
                    lr_generator=3e-4, lr_discriminator=1e-4)
    palette = default_palette(3)
    params = DegradationParams()
    train_root = os.path.join(ROOT, "train")
    test_root = os.path.join(ROOT, "test")
    if not os.path.isdir(train_root):
        build_dataset(200, SceneSpec(size=64, object_count=5, palette=palette,
                                     seed=cfg.seed), params, train_root)
        build_dataset(32, SceneSpec(size=64, object_count=5, palette=palette,
                                    seed=cfg.seed + 1000), params, test_root)
    print(f"[pilot] data ready {time.time()-t0:.0f}s", flush=True)

    ckpt = None
    for stage in (1, 2, 3):
        out = os.path.join(ROOT, f"s{stage}")
        done = os.path.join(out, "checkpoint")
        if not os.path.isdir(done):
            run_stage(stage, cfg, train_root, init_from=ckpt, out_dir=out)
        ckpt = done
        print(f"[pilot] stage {stage} done {time.time()-t0:.0f}s", flush=True)

    b1 = load_checkpoint(os.path.join(ROOT, "s1", "checkpoint"))
    b3 = load_checkpoint(os.path.join(ROOT, "s3", "checkpoint"))

    recon_clean, recon_raw = [], []
    raw_psnr, enh_psnr, raw_ssim, enh_ssim = [], [], [], []
    comps3 = build_inference_components(b3)
    for sid in dataset_ids(test_root):
        raw_p, mask_p, ref_p = triplet_paths(test_root, sid)
        raw = load_image(raw_p)
        ref = load_image(ref_p)
        mask = load_mask(mask_p)
        rc = reconstruct_stage1(ref, mask, b1)
        rr = reconstruct_stage1(raw, mask, b1)
        recon_clean.append(psnr(rc, ref))
        recon_raw.append(psnr(rr, raw))
        out = enhance(raw, b3, comps3)
        raw_psnr.append(psnr(raw, ref))
        enh_psnr.append(psnr(out, ref))
        raw_ssim.append(ssim(raw, ref))
        enh_ssim.append(ssim(out, ref))

    print(f"[pilot] stage1 recon PSNR clean  = {np.mean(recon_clean):.3f}")
    print(f"[pilot] stage1 recon PSNR raw    = {np.mean(recon_raw):.3f}")
    print(f"[pilot] raw-vs-clean  PSNR = {np.mean(raw_psnr):.3f}  SSIM = {np.mean(raw_ssim):.4f}")
    print(f"[pilot] enh-vs-clean  PSNR = {np.mean(enh_psnr):.3f}  SSIM = {np.mean(enh_ssim):.4f}")
    print(f"[pilot] PSNR gain = {np.mean(enh_psnr)-np.mean(raw_psnr):.3f}  "
          f"SSIM gain = {np.mean(enh_ssim)-np.mean(raw_ssim):.4f}")
    print(f"[pilot] total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
