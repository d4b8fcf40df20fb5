"""Quick probe: stage-1 recon quality vs base width at fixed short budget."""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import sucode.networks as networks
from sucode.config import RunConfig
from sucode.data import load_image, load_mask, dataset_ids, triplet_paths
from sucode.metrics import psnr
from sucode.synth import SceneSpec, DegradationParams, build_dataset, default_palette
from sucode.trainer import reconstruct_stage1, run_stage

BASE = int(sys.argv[1]) if len(sys.argv) > 1 else 16
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 12
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-4
DISC_LR = float(sys.argv[4]) if len(sys.argv) > 4 else 4e-4
PHI_W = float(sys.argv[5]) if len(sys.argv) > 5 else 1.0
ROOT = f"/tmp/capprobe_{BASE}_{LR}_{DISC_LR}_{PHI_W}"

networks.base_width = lambda embed_dim: BASE
import sucode.trainer as trainer
trainer.base_width = networks.base_width
import sucode.losses as losses
_orig_phi = losses.PerceptualExtractor.__init__
def _patched(self, seed=0, widths=(16, 32, 64, 64), stage_weights=None):
    _orig_phi(self, seed=seed, widths=widths,
              stage_weights=(PHI_W,) * 4)
losses.PerceptualExtractor.__init__ = _patched


def main():
    t0 = time.time()
    cfg = RunConfig(class_count=3, codebook_entries=32, embed_dim=16,
                    image_size=64, epochs=EPOCHS, batch_size=4, seed=7,
                    lr_generator=LR, lr_discriminator=DISC_LR)
    palette = default_palette(3)
    params = DegradationParams()
    train_root = os.path.join(ROOT, "train")
    test_root = os.path.join(ROOT, "test")
    if not os.path.isdir(train_root):
        build_dataset(200, SceneSpec(size=64, object_count=5, palette=palette,
                                     seed=cfg.seed), params, train_root)
        build_dataset(24, SceneSpec(size=64, object_count=5, palette=palette,
                                    seed=cfg.seed + 1000), params, test_root)
    b1 = run_stage(1, cfg, train_root)
    print(f"[probe base={BASE} lr={LR} dlr={DISC_LR} phiw={PHI_W}] stage1 done {time.time()-t0:.0f}s", flush=True)
    rc, rr = [], []
    for sid in dataset_ids(test_root):
        raw_p, mask_p, ref_p = triplet_paths(test_root, sid)
        mask = load_mask(mask_p)
        ref = load_image(ref_p)
        raw = load_image(raw_p)
        rc.append(psnr(reconstruct_stage1(ref, mask, b1), ref))
        rr.append(psnr(reconstruct_stage1(raw, mask, b1), raw))
    print(f"[probe base={BASE} lr={LR} dlr={DISC_LR} phiw={PHI_W}] recon clean {np.mean(rc):.2f} dB, "
          f"recon raw {np.mean(rr):.2f} dB, {time.time()-t0:.0f}s total",
          flush=True)


if __name__ == "__main__":
    main()
