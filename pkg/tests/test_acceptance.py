"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`.  Criterion 8 trains the
full three-stage toy protocol (200 triplets, 40 epochs per stage, CPU) and
dominates the runtime; criterion 7 reuses its checkpoints.
"""

import os
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from sucode.checkpoint import load_checkpoint
from sucode.cli import _eval_enhanced, _train_all_stages, dispatch
from sucode.config import RunConfig, with_overrides
from sucode.data import dataset_ids, load_image, load_mask, triplet_paths
from sucode.metrics import psnr, ssim, uciqe, uiqm
from sucode.networks import (FrequencyAwareFusion, SpectralPair,
                             WeightPredictor, spectral_decompose,
                             spectral_reconstruct)
from sucode.quantize import (CodebookSet, aggregate_weighted, straight_through)
from sucode.synth import (DegradationParams, SceneSpec, build_dataset,
                          default_palette)
from sucode.trainer import (build_inference_components, enhance,
                            reconstruct_stage1, run_stage)

from conftest import brute_force_nearest

TOY_SEED = 7


def _report(num, text):
    print(f"\n[acceptance] criterion {num:02d} PASS — {text}")


# ---------------------------------------------------------------------------
# the toy end-to-end protocol (criteria 7 and 8 share it)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def toy_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_e2e")
    # desk-scale recipe: the paper's rates assume ~80k steps; the pinned
    # 2000-step toy budget converges at 3x the generator rate with the
    # discriminator slowed so it cannot overpower 200 samples
    config = RunConfig(class_count=3, codebook_entries=32, embed_dim=16,
                       image_size=64, epochs=40, batch_size=4, seed=TOY_SEED,
                       lr_generator=3e-4, lr_discriminator=1e-4)
    palette = default_palette(3)
    params = DegradationParams()
    train_root = str(root / "train")
    test_root = str(root / "test")
    build_dataset(200, SceneSpec(size=64, object_count=5, palette=palette,
                                 seed=TOY_SEED), params, train_root)
    build_dataset(32, SceneSpec(size=64, object_count=5, palette=palette,
                                seed=TOY_SEED + 1000), params, test_root)
    started = time.time()
    bundles = {}
    ckpt = None
    for stage in (1, 2, 3):
        out = root / f"s{stage}"
        bundles[stage] = run_stage(stage, config, train_root,
                                   init_from=ckpt, out_dir=str(out))
        ckpt = str(out / "checkpoint")
    return {
        "config": config,
        "train": train_root,
        "test": test_root,
        "bundles": bundles,
        "train_seconds": time.time() - started,
    }


def test_criterion_01_quantizer_oracle_suite():
    rng = np.random.default_rng(101)
    started = time.time()
    for _ in range(200):
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        c = int(rng.integers(1, 5))
        n = int(rng.integers(2, 17))
        nz = int(rng.integers(1, 9))
        books = CodebookSet(c, n, nz, seed=int(rng.integers(0, 10000)))
        z = rng.standard_normal((h, w, nz)).astype(np.float32)
        mask = rng.integers(0, c, (h, w))
        z_t = torch.from_numpy(z).permute(2, 0, 1)
        res = books.quantize_with_mask(z_t, torch.from_numpy(mask))
        per_class = books.quantize_per_class(z_t)
        for cls in range(c):
            expected = brute_force_nearest(z, books.books[cls].detach().numpy())
            sel = mask == cls
            assert np.array_equal(res.indices.numpy()[sel], expected[sel])
            got = per_class[cls].permute(1, 2, 0).detach().numpy()
            assert np.array_equal(
                got, books.books[cls].detach().numpy()[expected])
    elapsed = time.time() - started
    assert elapsed < 10.0, f"oracle suite took {elapsed:.1f}s"
    _report(1, f"200 random instances match brute force ({elapsed:.1f}s)")


def test_criterion_02_straight_through_gradient():
    torch.manual_seed(202)
    encoder = nn.Sequential(
        nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(8, 6, 3, stride=2, padding=1),
    ).double()
    books = CodebookSet(2, 8, 6, seed=202).double()
    decoder = nn.Conv2d(6, 3, 1).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    mask = torch.randint(0, 2, (1, 4, 4))
    target = torch.rand(1, 3, 4, 4, dtype=torch.float64)

    def loss_fn():
        z = encoder(x)
        res = books.quantize_with_mask(z, mask)
        out = decoder(straight_through(z, res.z_q))
        return (out - target).abs().mean()

    loss = loss_fn()
    params = [p for p in encoder.parameters()]
    grads = torch.autograd.grad(loss, params)

    # finite differences honor the sg structure: the quantization offset
    # z_q - z is captured once at the baseline and held constant, exactly
    # what the straight-through surrogate differentiates through
    with torch.no_grad():
        z0 = encoder(x)
        offset0 = books.quantize_with_mask(z0, mask).z_q - z0

    def surrogate_loss():
        z = encoder(x)
        out = decoder(z + offset0)
        return (out - target).abs().mean()

    rng = np.random.default_rng(2)
    step = 1e-5
    checked = 0
    for p, g in zip(params, grads):
        count = max(1, p.numel() // 100)
        for flat in rng.choice(p.numel(), size=count, replace=False):
            idx = np.unravel_index(int(flat), p.shape)
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + step
                up = float(surrogate_loss())
                p[idx] = orig - step
                down = float(surrogate_loss())
                p[idx] = orig
            fd = (up - down) / (2 * step)
            analytic = float(g[idx])
            scale = max(abs(analytic), abs(fd), 1e-8)
            assert abs(analytic - fd) / scale < 1e-3, (idx, analytic, fd)
            checked += 1
    # the quantizer itself passes gradients as the identity
    z = encoder(x)
    res = books.quantize_with_mask(z, mask)
    out = straight_through(z, res.z_q)
    cotangent = torch.randn_like(out)
    g_out, g_z = torch.autograd.grad((out * cotangent).sum(), [out, z])
    assert torch.equal(g_out, g_z)
    _report(2, f"encoder FD agreement on {checked} sampled parameters; "
               "quantizer backward is the identity")


def test_criterion_03_vq_loss_routing():
    torch.manual_seed(303)
    books = CodebookSet(2, 6, 4, seed=303).double()
    z = torch.randn(4, 5, 5, dtype=torch.float64, requires_grad=True)
    mask = torch.randint(0, 2, (5, 5))
    res = books.quantize_with_mask(z, mask)

    g_books, g_z = torch.autograd.grad(res.codebook_term, [books.books, z],
                                       retain_graph=True, allow_unused=True)
    assert g_books is not None and float(g_books.abs().sum()) > 0
    assert g_z is None or float(g_z.abs().sum()) == 0
    g_books2, g_z2 = torch.autograd.grad(res.commit_term, [books.books, z],
                                         retain_graph=True, allow_unused=True)
    assert g_z2 is not None and float(g_z2.abs().sum()) > 0
    assert g_books2 is None or float(g_books2.abs().sum()) == 0

    # finite differences with the stop-gradient arguments frozen at baseline
    z0 = z.detach().clone()
    zq0 = res.z_q.detach().clone()
    cls0 = res.class_of_location.reshape(-1)
    idx0 = res.indices.reshape(-1)
    step = 1e-4

    def codebook_term_of(b):
        zq = b[cls0, idx0].reshape(5, 5, 4).permute(2, 0, 1)
        return float(((z0 - zq) ** 2).mean())

    rng = np.random.default_rng(3)
    for _ in range(6):
        c = int(rng.integers(0, 2))
        n = int(rng.integers(0, 6))
        d = int(rng.integers(0, 4))
        up = books.books.detach().clone()
        dn = books.books.detach().clone()
        up[c, n, d] += step
        dn[c, n, d] -= step
        fd = (codebook_term_of(up) - codebook_term_of(dn)) / (2 * step)
        analytic = float(g_books[c, n, d])
        assert abs(analytic - fd) <= 1e-4 * max(1.0, abs(fd))

    def commit_term_of(zz):
        return float(((zz - zq0) ** 2).mean())

    for _ in range(6):
        d = int(rng.integers(0, 4))
        i = int(rng.integers(0, 5))
        j = int(rng.integers(0, 5))
        up, dn = z0.clone(), z0.clone()
        up[d, i, j] += step
        dn[d, i, j] -= step
        fd = (commit_term_of(up) - commit_term_of(dn)) / (2 * step)
        analytic = float(g_z2[d, i, j])
        assert abs(analytic - fd) <= 1e-4 * max(1.0, abs(fd))
    _report(3, "codebook perturbations reach only the codebook term, "
               "encoder perturbations only commit+semantic")


def test_criterion_04_spectral_round_trip_and_phase():
    torch.manual_seed(404)
    for _ in range(100):
        h = int(torch.randint(4, 17, (1,)))
        w = int(torch.randint(4, 17, (1,)))
        ch = int(torch.randint(1, 5, (1,)))
        f = torch.randn(1, ch, h, w)
        back = spectral_reconstruct(spectral_decompose(f), (h, w))
        assert float((back - f).abs().max()) < 1e-5
    faff = FrequencyAwareFusion(6)
    fused = torch.randn(1, 6, 8, 8)
    with torch.no_grad():
        _, magnitude, phase, _ = faff.frequency_features(fused)
    expected = spectral_decompose(fused).phase
    significant = magnitude > 1e-6
    assert torch.equal(phase[significant], expected[significant])
    _report(4, "100 round trips within 1e-5; fusion phase untouched")


def test_criterion_05_faff_gamma_zero():
    torch.manual_seed(505)
    faff = FrequencyAwareFusion(8)
    assert torch.equal(faff.gamma, torch.zeros(8))
    f_r, f_e = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
    with torch.no_grad():
        fused = faff.fuse_inputs(f_r, f_e)
        modulated = faff.fused_features(f_r, f_e)
    assert torch.equal(modulated, fused)
    _report(5, "gamma=0 keeps the fused feature bit-identical")


def test_criterion_06_aggregation_invariants():
    torch.manual_seed(606)
    maps = [torch.randn(1, 6, 8, 8) for _ in range(4)]
    one_hot = torch.zeros(1, 4, 8, 8)
    one_hot[:, 2] = 1.0
    assert torch.equal(aggregate_weighted(maps, one_hot), maps[2])
    wp = WeightPredictor(16, class_count=4)
    for _ in range(10):
        with torch.no_grad():
            w = wp(torch.randn(2, 16, 8, 8) * 5)
        assert bool((w >= 0).all())
        assert float((w.sum(dim=1) - 1).abs().max()) < 1e-6
    _report(6, "one-hot aggregation exact; predicted weights on the simplex")


def test_criterion_07_freeze_protocol(toy_pipeline):
    b1, b2, b3 = (toy_pipeline["bundles"][s] for s in (1, 2, 3))
    classes = toy_pipeline["config"].class_count
    for c in range(classes):
        key = f"codebook/{c}"
        assert np.array_equal(b1.arrays[key], b2.arrays[key])
        assert np.array_equal(b2.arrays[key], b3.arrays[key])
        assert b2.manifest[key].frozen and b3.manifest[key].frozen
    for name in b2.names("wpred/") + b2.names("dec_r/") + b2.names("gcam/"):
        assert np.array_equal(b2.arrays[name], b3.arrays[name]), name
        assert b3.manifest[name].frozen, name
    _report(7, "stage-2 leaves codebooks, stage-3 leaves codebooks + "
               "weight predictor + raw decoder bit-identical")


def test_criterion_08_toy_end_to_end(toy_pipeline):
    config = toy_pipeline["config"]
    test_root = toy_pipeline["test"]
    b1 = toy_pipeline["bundles"][1]
    b3 = toy_pipeline["bundles"][3]
    comps3 = build_inference_components(b3)

    recon_clean, raw_psnr, enh_psnr, raw_ssim, enh_ssim = [], [], [], [], []
    for sample_id in dataset_ids(test_root):
        raw_path, mask_path, ref_path = triplet_paths(test_root, sample_id)
        raw = load_image(raw_path)
        ref = load_image(ref_path)
        mask = load_mask(mask_path)
        recon = reconstruct_stage1(ref, mask, b1)
        recon_clean.append(psnr(recon, ref))
        out = enhance(raw, b3, comps3)
        raw_psnr.append(psnr(raw, ref))
        enh_psnr.append(psnr(out, ref))
        raw_ssim.append(ssim(raw, ref))
        enh_ssim.append(ssim(out, ref))

    recon_db = float(np.mean(recon_clean))
    gain_db = float(np.mean(enh_psnr) - np.mean(raw_psnr))
    gain_ssim = float(np.mean(enh_ssim) - np.mean(raw_ssim))
    minutes = toy_pipeline["train_seconds"] / 60.0
    assert minutes < 60.0, f"training took {minutes:.1f} min"
    assert recon_db >= 20.0, f"stage-1 recon on clean: {recon_db:.2f} dB"
    assert gain_db >= 2.0, f"PSNR gain {gain_db:.2f} dB"
    assert gain_ssim >= 0.03, f"SSIM gain {gain_ssim:.4f}"
    _report(8, f"recon {recon_db:.2f} dB; gains +{gain_db:.2f} dB / "
               f"+{gain_ssim:.3f} SSIM; {minutes:.1f} min of training")


@pytest.fixture(scope="module")
def micro_ablation(tmp_path_factory):
    """A C=8 micro dataset + config small enough to retrain in seconds."""
    root = tmp_path_factory.mktemp("ablate")
    palette = default_palette(8)
    params = DegradationParams()
    train_root = str(root / "train")
    test_root = str(root / "test")
    build_dataset(6, SceneSpec(size=64, object_count=5, palette=palette,
                               seed=31), params, train_root)
    build_dataset(3, SceneSpec(size=64, object_count=5, palette=palette,
                               seed=77), params, test_root)
    cfg_path = root / "micro.cfg"
    cfg_path.write_text(
        "class_count = 8\ncodebook_entries = 16\nembed_dim = 16\n"
        "image_size = 64\nepochs = 1\nbatch_size = 4\nseed = 13\n"
    )
    config = RunConfig(class_count=8, codebook_entries=16, embed_dim=16,
                       image_size=64, epochs=1, batch_size=4, seed=13)
    return {"root": root, "train": train_root, "test": test_root,
            "cfg_path": str(cfg_path), "config": config}


def test_criterion_09_ablation_functional(micro_ablation):
    cfg = micro_ablation["config"]
    root = micro_ablation["root"]

    # direct (unperturbed) pipeline and eval row
    direct_dir = str(root / "direct")
    ckpt = _train_all_stages(cfg, micro_ablation["train"], direct_dir)
    direct_row = _eval_enhanced(ckpt, micro_ablation["test"],
                                str(root / "direct_eval"))

    out_mask = root / "ab_mask"
    code = dispatch(["ablate", "mask", "--config", micro_ablation["cfg_path"],
                     "--data", micro_ablation["train"],
                     "--test-data", micro_ablation["test"],
                     "--out", str(out_mask), "--ranges", "0"])
    assert code == 0
    table = (out_mask / "ablation_mask.csv").read_text().splitlines()
    cells = table[1].split(",")
    assert cells[0] == "0-0"
    assert cells[1] == f"{direct_row.psnr:.6f}"
    assert cells[2] == f"{direct_row.ssim:.6f}"

    out_cls = root / "ab_classes"
    code = dispatch(["ablate", "classes", "--config",
                     micro_ablation["cfg_path"],
                     "--data", micro_ablation["train"],
                     "--test-data", micro_ablation["test"],
                     "--out", str(out_cls), "--schemes", "8"])
    assert code == 0
    table = (out_cls / "ablation_classes.csv").read_text().splitlines()
    cells = table[1].split(",")
    assert cells[0] == "8"
    assert cells[1] == f"{direct_row.psnr:.6f}"
    assert cells[2] == f"{direct_row.ssim:.6f}"
    _report(9, "mask range (0,0) and identity class merge reproduce the "
               "baseline eval row exactly")


def test_criterion_10_metric_identities(tmp_path):
    rng = np.random.default_rng(10)
    from sucode.data import save_image
    images = {f"{i}": rng.random((16, 16, 3)) for i in range(3)}
    for sub in ("pred", "ref"):
        (tmp_path / sub).mkdir()
        for name, img in images.items():
            save_image(img, str(tmp_path / sub / f"{name}.png"))
    from sucode.metrics import evaluate_dataset
    report = evaluate_dataset(str(tmp_path / "pred"), str(tmp_path / "ref"))
    agg = report.aggregate()
    assert agg.psnr == pytest.approx(100.0)
    assert agg.ssim == pytest.approx(1.0)

    gray = np.full((16, 16, 3), 0.5)
    assert uciqe(gray) == pytest.approx(0.0, abs=1e-9)
    assert uiqm(gray) == pytest.approx(0.0, abs=1e-9)

    from test_metrics import _uciqe_oracle, _uiqm_oracle
    img = rng.random((16, 16, 3))
    assert uciqe(img) == pytest.approx(_uciqe_oracle(img), abs=1e-6)
    assert uiqm(img) == pytest.approx(_uiqm_oracle(img), abs=1e-6)
    _report(10, "PSNR cap, SSIM identity, degenerate closed forms and "
                "independent oracle recomputation all hold")


def test_criterion_11_reproducibility(tmp_path):
    spec = SceneSpec(size=64, object_count=4, palette=default_palette(3),
                     seed=23)
    params = DegradationParams()
    build_dataset(6, spec, params, str(tmp_path / "a"))
    build_dataset(6, spec, params, str(tmp_path / "b"))
    for sub in ("raw", "mask", "ref"):
        for name in sorted(os.listdir(tmp_path / "a" / sub)):
            assert (tmp_path / "a" / sub / name).read_bytes() == \
                (tmp_path / "b" / sub / name).read_bytes()

    config = RunConfig(class_count=3, codebook_entries=16, embed_dim=16,
                       image_size=64, epochs=3, batch_size=4, seed=29)
    traces = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        run_stage(1, config, str(tmp_path / "a"), out_dir=str(out),
                  max_steps=5)
        lines = (out / "metrics.csv").read_text().strip().splitlines()[1:]
        traces.append([[float(v) for v in ln.split(",")] for ln in lines])
    assert len(traces[0]) == len(traces[1]) == 5
    for a, b in zip(*traces):
        for x, y in zip(a, b):
            assert abs(x - y) <= 1e-6 * max(1.0, abs(x))
    _report(11, "identical seeds give byte-equal datasets and matching "
                "5-step loss traces")
