"""Three-stage training protocol, inference, and cost accounting.

Stage plans:

    stage 1  train {enc_q, dec_q, codebooks, disc}            freeze {}
    stage 2  train {enc_r, wpred, dec_r, disc}                freeze {codebooks}
    stage 3  train {enc_r, dec_e, faff, disc}                 freeze {codebooks,
                                                                      wpred, dec_r}

E_r is initialized from E_q at the start of stage 2; the discriminator is
re-initialized for every stage.  Frozen tensors never enter an optimizer and
are verified bit-identical at the end of a run.  The optimizer is Adam with
betas (0.5, 0.9); the adversarial weight ramps linearly from 0 over the first
10% of steps.
"""

from __future__ import annotations

import math
import os
import pickle
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import dataset_ids, load_image, load_mask, triplet_paths
from .errors import (CheckpointIncomplete, SampleInvalid, ShapeError,
                     StagePrereqError, TrainingDiverged)
from .losses import (LossReport, PerceptualExtractor, adversarial_losses,
                     code_loss, perceptual_loss, pixel_l1, semantic_term,
                     stage_total)
from .networks import (EnhanceDecoder, Encoder, ImageDecoder,
                       PatchDiscriminator, RawDecoder, WeightPredictor,
                       base_width)
from .quantize import (aggregate_weighted, downsample_mask, init_codebooks,
                       straight_through)
from .synth import remap_mask_classes

GEN_COMPONENTS = {1: ("enc_q", "dec_q"), 2: ("enc_r", "wpred", "dec_r"),
                  3: ("enc_r", "dec_e")}
MODEL_PREFIXES = ("codebook/", "enc_q/", "dec_q/", "enc_r/", "wpred/",
                  "dec_r/", "dec_e/", "disc/", "gcam/", "faff/")


@dataclass
class StagePlan:
    stage: int
    trainable: frozenset
    frozen: frozenset
    loss_formula: str


def stage_plan(stage: int) -> StagePlan:
    if stage == 1:
        return StagePlan(1, frozenset({"enc_q", "dec_q", "codebooks", "disc"}),
                         frozenset(), "stage1")
    if stage == 2:
        return StagePlan(2, frozenset({"enc_r", "wpred", "dec_r", "disc"}),
                         frozenset({"codebooks"}), "stage2")
    if stage == 3:
        return StagePlan(3, frozenset({"enc_r", "dec_e", "faff", "disc"}),
                         frozenset({"codebooks", "wpred", "dec_r"}), "stage3")
    raise StagePrereqError(f"unknown stage {stage}")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    perm: np.ndarray | None = None
    pos: int = 0
    rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))
    history: list[LossReport] = field(default_factory=list)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)) \
        .permute(2, 0, 1).unsqueeze(0)


def from_tensor(x: torch.Tensor) -> np.ndarray:
    return x.squeeze(0).permute(1, 2, 0).clamp(0, 1).cpu().numpy() \
        .astype(np.float32)


# ---------------------------------------------------------------------------
# component assembly and checkpoint plumbing
# ---------------------------------------------------------------------------

def _proj_channels(phi: PerceptualExtractor, factor: int) -> int:
    return phi.out_channels[phi.stage_for_factor(factor)]


def build_components(config: RunConfig, stage: int) -> dict[str, nn.Module]:
    """Fresh modules for a stage, deterministically initialized."""
    torch.manual_seed(config.seed * 1000 + stage)
    phi = PerceptualExtractor(seed=config.seed)
    proj_ch = _proj_channels(phi, config.downsample_factor)
    comps: dict[str, nn.Module] = {
        "codebooks": init_codebooks(config, seed=config.seed),
        "phi": phi,
    }
    if stage == 1:
        comps["enc_q"] = Encoder(config.embed_dim, config.downsample_factor,
                                 proj_ch=proj_ch)
        comps["dec_q"] = ImageDecoder(config.embed_dim, config.downsample_factor)
    if stage >= 2:
        comps["enc_r"] = Encoder(config.embed_dim, config.downsample_factor,
                                 proj_ch=proj_ch)
        comps["wpred"] = WeightPredictor(config.embed_dim, config.class_count)
        comps["dec_r"] = RawDecoder(config.embed_dim, config.downsample_factor)
    if stage == 3:
        comps["dec_e"] = EnhanceDecoder(config.embed_dim,
                                        config.downsample_factor,
                                        faff_scales=config.faff_scales)
    comps["disc"] = PatchDiscriminator(base=max(32, base_width(config.embed_dim)))
    return comps


def _module_arrays(prefix: str, module: nn.Module,
                   exclude: tuple[str, ...] = ()) -> dict[str, np.ndarray]:
    out = {}
    for key, tensor in module.state_dict().items():
        if any(key.startswith(e) for e in exclude):
            continue
        out[f"{prefix}/{key.replace('.', '/')}"] = \
            tensor.detach().cpu().numpy().copy()
    return out


def component_arrays(name: str, module: nn.Module) -> dict[str, np.ndarray]:
    """Flatten one component under its external checkpoint namespace."""
    if name == "codebooks":
        books = module.books.detach().cpu().numpy()
        return {f"codebook/{c}": books[c].copy() for c in range(books.shape[0])}
    if name == "dec_r":
        out = _module_arrays("dec_r", module, exclude=("gcams.",))
        for idx, block in enumerate(module.gcams):
            out.update(_module_arrays(f"gcam/{idx}", block))
        return out
    if name == "dec_e":
        out = _module_arrays("dec_e", module, exclude=("faffs.",))
        for scale, block in module.faffs.items():
            out.update(_module_arrays(f"faff/{scale}", block))
        return out
    return _module_arrays(name, module)


def _load_module(prefix: str, module: nn.Module, bundle: CheckpointBundle,
                 exclude: tuple[str, ...] = ()) -> None:
    state = module.state_dict()
    new_state = {}
    for key, tensor in state.items():
        if any(key.startswith(e) for e in exclude):
            new_state[key] = tensor
            continue
        name = f"{prefix}/{key.replace('.', '/')}"
        if name not in bundle.arrays:
            raise CheckpointIncomplete(f"missing array {name}")
        arr = bundle.arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            # 0-dim buffers (BatchNorm step counters) persist as shape (1,)
            if arr.size != tensor.numel():
                raise CheckpointIncomplete(
                    f"{name}: shape {arr.shape} != expected {tuple(tensor.shape)}"
                )
        new_state[key] = torch.from_numpy(arr.copy()).to(tensor.dtype) \
            .reshape(tensor.shape)
    module.load_state_dict(new_state)


def load_component(name: str, module: nn.Module, bundle: CheckpointBundle,
                   source: str | None = None) -> None:
    """Restore a component from its (possibly different) namespace."""
    source = source or name
    if name == "codebooks":
        books = []
        for c in range(module.class_count):
            key = f"codebook/{c}"
            if key not in bundle.arrays:
                raise CheckpointIncomplete(f"missing array {key}")
            books.append(torch.from_numpy(bundle.arrays[key].copy()))
        stacked = torch.stack(books).float()
        if stacked.shape != module.books.shape:
            raise CheckpointIncomplete(
                f"codebook shape {tuple(stacked.shape)} != "
                f"{tuple(module.books.shape)}"
            )
        with torch.no_grad():
            module.books.copy_(stacked)
        return
    if name == "dec_r":
        _load_module(source, module, bundle, exclude=("gcams.",))
        for idx, block in enumerate(module.gcams):
            _load_module(f"gcam/{idx}", block, bundle)
        return
    if name == "dec_e":
        _load_module(source, module, bundle, exclude=("faffs.",))
        for scale, block in module.faffs.items():
            _load_module(f"faff/{scale}", block, bundle)
        return
    _load_module(source, module, bundle)


def bundle_has(bundle: CheckpointBundle, name: str) -> bool:
    prefix = "codebook/" if name == "codebooks" else f"{name}/"
    return any(n.startswith(prefix) for n in bundle.manifest)


# ---------------------------------------------------------------------------
# dataset handling
# ---------------------------------------------------------------------------

@dataclass
class _Sample:
    id: str
    raw: np.ndarray
    mask: np.ndarray | None
    ref: np.ndarray | None


def _load_training_set(root: str, config: RunConfig, stage: int) -> list[_Sample]:
    ids = dataset_ids(root)
    if not ids:
        raise SampleInvalid(f"no samples under {root}")
    samples = []
    for sample_id in ids:
        raw_path, mask_path, ref_path = triplet_paths(root, sample_id)
        raw = load_image(raw_path)
        mask = load_mask(mask_path) if mask_path else None
        ref = load_image(ref_path) if ref_path else None
        if mask is not None and config.class_remap is not None:
            mask = remap_mask_classes(mask, config.class_remap)
        if stage in (1, 2) and mask is None:
            raise SampleInvalid(f"stage {stage} requires a mask for {sample_id}")
        if stage == 3 and ref is None:
            raise SampleInvalid(f"stage 3 requires a reference for {sample_id}")
        if mask is not None and mask.size and mask.max() >= config.class_count:
            raise SampleInvalid(
                f"{sample_id}: mask label {mask.max()} >= C={config.class_count}"
            )
        samples.append(_Sample(sample_id, raw, mask, ref))
    return samples


def _crop_batch(samples: list[_Sample], size: int,
                rng: np.random.Generator) -> tuple[torch.Tensor,
                                                   torch.Tensor | None,
                                                   torch.Tensor | None]:
    raws, masks, refs = [], [], []
    for s in samples:
        h, w = s.raw.shape[:2]
        if h < size or w < size:
            raise SampleInvalid(f"{s.id}: frame {h}x{w} smaller than {size}")
        top = int(rng.integers(0, h - size + 1)) if h > size else 0
        left = int(rng.integers(0, w - size + 1)) if w > size else 0
        sl = (slice(top, top + size), slice(left, left + size))
        raws.append(to_tensor(s.raw[sl]))
        masks.append(torch.from_numpy(s.mask[sl]) if s.mask is not None else None)
        refs.append(to_tensor(s.ref[sl]) if s.ref is not None else None)
    raw = torch.cat(raws, dim=0)
    mask = torch.stack(masks, dim=0) if masks[0] is not None else None
    ref = torch.cat(refs, dim=0) if refs[0] is not None else None
    return raw, mask, ref


# ---------------------------------------------------------------------------
# stage forwards
# ---------------------------------------------------------------------------

def stage1_forward(comps, x, mask, config, training=True):
    enc, dec, books = comps["enc_q"], comps["dec_q"], comps["codebooks"]
    z_hat = enc(x)
    f = config.downsample_factor
    mask_lr = torch.stack([downsample_mask(m, f) for m in mask], dim=0)
    result = books.quantize_with_mask(z_hat, mask_lr)
    z_dec = straight_through(z_hat, result.z_q) if training else result.z_q
    x_hat = dec(z_dec)
    return z_hat, result, z_dec, x_hat


def representation_forward(comps, x, training=True):
    """Shared stage-2/3 path: per-class quantization + weighted synthesis."""
    enc, wpred, books = comps["enc_r"], comps["wpred"], comps["codebooks"]
    z_hat = enc(x)
    codes = books.quantize_per_class(z_hat)
    weights = wpred(z_hat)
    z_mix_raw = aggregate_weighted(codes, weights)
    if training:
        maps = [straight_through(z_hat, c) for c in codes]
        z_mix = aggregate_weighted(maps, weights)
    else:
        z_mix = z_mix_raw
    commit = ((z_hat - z_mix_raw.detach()) ** 2).mean()
    codebook_term = ((z_hat.detach() - z_mix_raw) ** 2).mean()
    return z_hat, z_mix, commit, codebook_term


# ---------------------------------------------------------------------------
# run_stage
# ---------------------------------------------------------------------------

def _set_frozen(comps: dict, plan: StagePlan) -> None:
    for name in plan.frozen:
        if name == "codebooks":
            comps["codebooks"].freeze()
        elif name == "faff":
            continue  # serialized with dec_e; frozen only via dec_e
        elif name in comps:
            comps[name].requires_grad_(False)


def _gen_parameters(comps: dict, config: RunConfig, stage: int) -> list:
    names = list(GEN_COMPONENTS[stage])
    if stage == 3 and config.freeze_encoder_stage3:
        comps["enc_r"].requires_grad_(False)
        names.remove("enc_r")
    params = []
    if stage == 1:
        params.extend(comps["codebooks"].parameters())
    for name in names:
        params.extend(p for p in comps[name].parameters() if p.requires_grad)
    return params


def _snapshot_frozen(comps: dict, plan: StagePlan) -> dict[str, np.ndarray]:
    snap = {}
    for name in plan.frozen:
        if name == "faff":
            continue
        module = comps[name]
        for key, tensor in module.state_dict().items():
            snap[f"{name}.{key}"] = tensor.detach().cpu().numpy().copy()
    return snap


def _verify_frozen(comps: dict, snap: dict[str, np.ndarray]) -> None:
    for full_key, before in snap.items():
        name, key = full_key.split(".", 1)
        after = comps[name].state_dict()[key].detach().cpu().numpy()
        if not np.array_equal(before, after):
            raise RuntimeError(f"frozen tensor {full_key} changed during training")


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    params = [p for group in opt.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        state = opt.state.get(p)
        if not state:
            continue
        out[f"optim/{prefix}/{i}/step"] = np.asarray(
            [float(state["step"])], dtype=np.float64)
        out[f"optim/{prefix}/{i}/exp_avg"] = \
            state["exp_avg"].detach().cpu().numpy().copy()
        out[f"optim/{prefix}/{i}/exp_avg_sq"] = \
            state["exp_avg_sq"].detach().cpu().numpy().copy()
    return out


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer,
                       bundle: CheckpointBundle) -> None:
    params = [p for group in opt.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        key = f"optim/{prefix}/{i}/exp_avg"
        if key not in bundle.arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(
                float(bundle.arrays[f"optim/{prefix}/{i}/step"][0])),
            "exp_avg": torch.from_numpy(bundle.arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(
                bundle.arrays[f"optim/{prefix}/{i}/exp_avg_sq"].copy()),
        }


def _pack_rng(state: TrainState) -> bytes:
    return pickle.dumps({
        "numpy": state.rng.bit_generator.state,
        "torch": torch.get_rng_state().numpy().tobytes(),
    })


def _unpack_rng(blob: bytes, state: TrainState) -> None:
    payload = pickle.loads(blob)
    state.rng.bit_generator.state = payload["numpy"]
    torch.set_rng_state(torch.from_numpy(
        np.frombuffer(payload["torch"], dtype=np.uint8).copy()))


def make_checkpoint(comps: dict, config: RunConfig, stage: int,
                    plan: StagePlan, state: TrainState,
                    optimizers: dict[str, torch.optim.Optimizer] | None = None,
                    ) -> CheckpointBundle:
    bundle = CheckpointBundle(config_snapshot=config, rng_state=_pack_rng(state))

    def frozen_for(name: str) -> bool:
        return name in plan.frozen

    for name, module in comps.items():
        if name == "phi":
            continue  # derived from the seed, never stored
        for arr_name, arr in component_arrays(name, module).items():
            flag = frozen_for(name)
            if arr_name.startswith("faff/"):
                flag = frozen_for("faff") or frozen_for("dec_e")
            if arr_name.startswith("gcam/"):
                flag = frozen_for("dec_r")
            bundle.add(arr_name, arr, frozen=flag, stage_of_origin=stage)
    if optimizers:
        for prefix, opt in optimizers.items():
            for arr_name, arr in _optimizer_arrays(prefix, opt).items():
                bundle.add(arr_name, arr, stage_of_origin=stage)
    bundle.add("state/stage", np.asarray([stage], dtype=np.int64),
               stage_of_origin=stage)
    bundle.add("state/step", np.asarray([state.step], dtype=np.int64),
               stage_of_origin=stage)
    bundle.add("state/epoch", np.asarray([state.epoch], dtype=np.int64),
               stage_of_origin=stage)
    perm = state.perm if state.perm is not None else np.zeros(0, dtype=np.int64)
    bundle.add("state/perm", perm.astype(np.int64), stage_of_origin=stage)
    bundle.add("state/pos", np.asarray([state.pos], dtype=np.int64),
               stage_of_origin=stage)
    return bundle


def _init_from_bundle(comps: dict, stage: int, bundle: CheckpointBundle) -> None:
    """Seed a fresh stage from the previous stage's checkpoint."""
    prev_stage = int(bundle.arrays["state/stage"][0]) \
        if "state/stage" in bundle.arrays else stage - 1
    if prev_stage != stage - 1:
        raise StagePrereqError(
            f"stage {stage} expects a stage-{stage - 1} checkpoint, "
            f"got stage {prev_stage}"
        )
    if not bundle_has(bundle, "codebooks"):
        raise StagePrereqError("checkpoint has no codebooks")
    load_component("codebooks", comps["codebooks"], bundle)
    if stage == 2:
        if not bundle_has(bundle, "enc_q"):
            raise StagePrereqError("stage 2 needs enc_q from stage 1")
        load_component("enc_r", comps["enc_r"], bundle, source="enc_q")
    if stage == 3:
        for name in ("enc_r", "wpred", "dec_r"):
            if not bundle_has(bundle, name):
                raise StagePrereqError(f"stage 3 needs {name} from stage 2")
            load_component(name, comps[name], bundle)


def _resume_from_bundle(comps: dict, bundle: CheckpointBundle,
                        state: TrainState) -> None:
    for name in comps:
        if name == "phi":
            continue
        if bundle_has(bundle, name):
            load_component(name, comps[name], bundle)
    state.step = int(bundle.arrays["state/step"][0])
    state.epoch = int(bundle.arrays["state/epoch"][0])
    perm = bundle.arrays["state/perm"]
    state.perm = perm.copy() if perm.size else None
    state.pos = int(bundle.arrays["state/pos"][0])
    if bundle.rng_state:
        _unpack_rng(bundle.rng_state, state)


def run_stage(stage: int, config: RunConfig, dataset_root: str,
              init_from: str | None = None, out_dir: str | None = None,
              max_steps: int | None = None,
              epochs: int | None = None) -> CheckpointBundle:
    """Train one stage; returns (and optionally writes) its checkpoint."""
    plan = stage_plan(stage)
    epochs = config.epochs if epochs is None else epochs

    init_bundle = None
    if init_from is not None:
        init_bundle = load_checkpoint(init_from) \
            if isinstance(init_from, str) else init_from
    resume = (init_bundle is not None
              and "state/stage" in init_bundle.arrays
              and int(init_bundle.arrays["state/stage"][0]) == stage)
    if stage > 1 and init_bundle is None:
        raise StagePrereqError(
            f"stage {stage} requires a stage-{stage - 1} checkpoint (init_from)"
        )

    comps = build_components(config, stage)
    state = TrainState(rng=np.random.default_rng(config.seed * 7919 + stage))
    if resume:
        _resume_from_bundle(comps, init_bundle, state)
    elif init_bundle is not None:
        _init_from_bundle(comps, stage, init_bundle)

    _set_frozen(comps, plan)
    frozen_snapshot = _snapshot_frozen(comps, plan)

    gen_params = _gen_parameters(comps, config, stage)
    disc_params = list(comps["disc"].parameters())
    gen_opt = torch.optim.Adam(gen_params, lr=config.lr_generator,
                               betas=(0.5, 0.9))
    disc_opt = torch.optim.Adam(disc_params, lr=config.lr_discriminator,
                                betas=(0.5, 0.9))
    if resume:
        _restore_optimizer("gen", gen_opt, init_bundle)
        _restore_optimizer("disc", disc_opt, init_bundle)

    samples = _load_training_set(dataset_root, config, stage)
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, steps_per_epoch * epochs)
    warmup = max(1, int(0.1 * total_steps))
    lambda_adv = (config.lambda_adv_stage3 if stage == 3 else config.lambda_adv)

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.csv")
        append = resume and os.path.exists(log_path) \
            and os.path.getsize(log_path) > 0
        log_fh = open(log_path, "a" if append else "w")
        if not append:
            log_fh.write(LossReport.CSV_HEADER + "\n")

    for module in comps.values():
        module.train()
    comps["phi"].eval()

    last_good: CheckpointBundle | None = None

    def emit(bundle: CheckpointBundle) -> CheckpointBundle:
        if out_dir is not None:
            save_checkpoint(bundle, os.path.join(out_dir, "checkpoint"))
        return bundle

    def finish() -> CheckpointBundle:
        _verify_frozen(comps, frozen_snapshot)
        bundle = make_checkpoint(comps, config, stage, plan, state,
                                 {"gen": gen_opt, "disc": disc_opt})
        if log_fh is not None:
            log_fh.close()
        return emit(bundle)

    try:
        while state.epoch < epochs:
            if state.perm is None:
                state.perm = state.rng.permutation(n)
                state.pos = 0
            epoch_loss, epoch_batches = 0.0, 0
            while state.pos < n:
                if max_steps is not None and state.step >= max_steps:
                    return finish()
                ids = state.perm[state.pos:state.pos + config.batch_size]
                state.pos += config.batch_size
                batch = [samples[i] for i in ids]
                x, mask, ref = _crop_batch(batch, config.image_size, state.rng)

                report, gen_total, fake = _train_forward(
                    comps, config, stage, x, mask, ref, state.step,
                    lambda_adv * min(1.0, (state.step + 1) / warmup))
                if not torch.isfinite(gen_total):
                    if last_good is not None:
                        emit(last_good)
                    raise TrainingDiverged(
                        f"non-finite loss at step {state.step}")
                gen_opt.zero_grad(set_to_none=True)
                gen_total.backward()
                torch.nn.utils.clip_grad_norm_(gen_params, 1.0)
                gen_opt.step()

                real = ref if stage == 3 else x
                logits_real = comps["disc"](real)
                logits_fake = comps["disc"](fake.detach())
                _, disc_loss = adversarial_losses(logits_fake, logits_real)
                if not torch.isfinite(disc_loss):
                    if last_good is not None:
                        emit(last_good)
                    raise TrainingDiverged(
                        f"non-finite discriminator loss at step {state.step}")
                disc_opt.zero_grad(set_to_none=True)
                disc_loss.backward()
                torch.nn.utils.clip_grad_norm_(disc_params, 1.0)
                disc_opt.step()

                state.history.append(report)
                if log_fh is not None:
                    log_fh.write(report.csv_line() + "\n")
                epoch_loss += report.total
                epoch_batches += 1
                state.step += 1
            state.perm = None
            state.pos = 0
            state.epoch += 1
            mean_loss = epoch_loss / max(epoch_batches, 1)
            print(f"[stage {stage}] epoch {state.epoch}/{epochs} "
                  f"loss {mean_loss:.4f}")
            last_good = make_checkpoint(comps, config, stage, plan, state,
                                        {"gen": gen_opt, "disc": disc_opt})
        return finish()
    finally:
        if log_fh is not None and not log_fh.closed:
            log_fh.close()


def _train_forward(comps, config, stage, x, mask, ref, step, lambda_eff):
    """One generator forward; returns (report, differentiable total, fake)."""
    phi = comps["phi"]
    if stage == 1:
        z_hat, result, z_dec, x_hat = stage1_forward(comps, x, mask, config)
        target = x
        proj = comps["enc_q"].code_proj(z_dec)
        phi_x = phi.features(x)[phi.stage_for_factor(config.downsample_factor)]
        sem = semantic_term(proj, phi_x)
        commit, codebook = result.commit_term, result.codebook_term
        code = None
    elif stage == 2:
        z_hat, z_mix, commit, codebook = representation_forward(comps, x)
        x_hat = comps["dec_r"](z_mix)[0]
        target = x
        proj = comps["enc_r"].code_proj(z_mix)
        phi_x = phi.features(x)[phi.stage_for_factor(config.downsample_factor)]
        sem = semantic_term(proj, phi_x)
        code = None
    else:
        z_hat, z_mix, _, _ = representation_forward(comps, x)
        _, taps = comps["dec_r"](z_mix)
        x_hat = comps["dec_e"](z_mix, taps)
        target = ref
        # quantized representation of the reference, stop-gradient path
        with torch.no_grad():
            _, z_gt, _, _ = representation_forward(comps, ref, training=False)
        code = code_loss(z_hat, z_gt, config.beta)
        sem = None
        commit = codebook = None

    pix = pixel_l1(x_hat, target)
    per = perceptual_loss(x_hat, target, phi)
    logits_fake = comps["disc"](x_hat)
    # only the generator side is consumed here; the discriminator trains on
    # its own forward pass after the generator step
    gen_adv, _ = adversarial_losses(logits_fake, logits_fake.detach())

    def _f(t):
        return float(t.detach())

    if stage in (1, 2):
        total = (pix + per + lambda_eff * gen_adv + codebook
                 + config.beta * commit + config.lambda_s * sem)
        report = stage_total(
            stage, pixel=_f(pix), perceptual=_f(per),
            adversarial=_f(gen_adv), vq_commit=_f(commit),
            vq_codebook=_f(codebook), vq_semantic=_f(sem),
            beta=config.beta, lambda_s=config.lambda_s,
            lambda_adv=lambda_eff, step=step)
    else:
        total = pix + per + lambda_eff * gen_adv + code
        report = stage_total(
            stage, pixel=_f(pix), perceptual=_f(per),
            adversarial=_f(gen_adv), code=_f(code),
            lambda_adv=lambda_eff, step=step)
    return report, total, x_hat


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _require(bundle: CheckpointBundle, names: tuple[str, ...]) -> None:
    for name in names:
        if not bundle_has(bundle, name):
            raise CheckpointIncomplete(f"checkpoint missing component {name}")


def build_inference_components(bundle: CheckpointBundle) -> dict:
    if bundle.config_snapshot is None:
        raise CheckpointIncomplete("checkpoint has no config snapshot")
    config = bundle.config_snapshot
    _require(bundle, ("codebooks", "enc_r", "wpred", "dec_r", "dec_e"))
    comps = build_components(config, stage=3)
    for name in ("codebooks", "enc_r", "wpred", "dec_r", "dec_e"):
        load_component(name, comps[name], bundle)
    for module in comps.values():
        module.eval()
        module.requires_grad_(False)
    return comps


def enhance(raw: np.ndarray, bundle: CheckpointBundle,
            comps: dict | None = None) -> np.ndarray:
    """Run the full stage-3 inference pipeline on one image."""
    if comps is None:
        comps = build_inference_components(bundle)
    config = bundle.config_snapshot
    h, w = raw.shape[:2]
    f = config.downsample_factor
    if h % f or w % f:
        raise ShapeError(f"input {h}x{w} not divisible by factor {f}")
    with torch.no_grad():
        x = to_tensor(raw)
        _, z_mix, _, _ = representation_forward(comps, x, training=False)
        _, taps = comps["dec_r"](z_mix)
        out = comps["dec_e"](z_mix, taps)
    return from_tensor(out)


def reconstruct_stage1(raw: np.ndarray, mask: np.ndarray,
                       bundle: CheckpointBundle,
                       comps: dict | None = None) -> np.ndarray:
    """Stage-1 autoencoding of one frame (used by eval and inspect)."""
    if comps is None:
        if bundle.config_snapshot is None:
            raise CheckpointIncomplete("checkpoint has no config snapshot")
        _require(bundle, ("codebooks", "enc_q", "dec_q"))
        comps = build_components(bundle.config_snapshot, stage=1)
        for name in ("codebooks", "enc_q", "dec_q"):
            load_component(name, comps[name], bundle)
        for module in comps.values():
            module.eval()
            module.requires_grad_(False)
    config = bundle.config_snapshot
    with torch.no_grad():
        x = to_tensor(raw)
        mask_t = torch.from_numpy(np.ascontiguousarray(mask)).long()
        _, result, z_dec, x_hat = stage1_forward(
            comps, x, mask_t.unsqueeze(0), config, training=False)
    return from_tensor(x_hat)


# ---------------------------------------------------------------------------
# parameter / mult-add accounting
# ---------------------------------------------------------------------------

def module_cost(module: nn.Module, *inputs) -> tuple[int, int]:
    """Exact parameter count + conv/linear multiply-adds for one forward.

    Attention score products and codebook searches are excluded; only layers
    with declared kernel shapes (Conv2d, ConvTranspose2d, Linear) count.
    """
    params = sum(p.numel() for p in module.parameters())
    mult_adds = 0

    def hook(mod, args, output):
        nonlocal mult_adds
        if isinstance(mod, nn.Conv2d):
            kh, kw = mod.kernel_size
            mult_adds += output.numel() * (mod.in_channels // mod.groups) * kh * kw
        elif isinstance(mod, nn.ConvTranspose2d):
            kh, kw = mod.kernel_size
            mult_adds += args[0].numel() * (mod.out_channels // mod.groups) * kh * kw
        elif isinstance(mod, nn.Linear):
            mult_adds += (output.numel() // mod.out_features
                          * mod.in_features * mod.out_features)

    handles = [m.register_forward_hook(hook) for m in module.modules()]
    try:
        was_training = module.training
        module.eval()
        with torch.no_grad():
            module(*inputs)
        if was_training:
            module.train()
    finally:
        for h in handles:
            h.remove()
    return params, mult_adds


def count_cost(bundle: CheckpointBundle, input_size: int) -> tuple[int, int]:
    """Model parameter count and inference multiply-adds at `input_size`."""
    params = sum(
        int(np.prod(bundle.manifest[name].shape))
        for name in bundle.manifest
        if name.startswith(MODEL_PREFIXES)
    )
    if params == 0 or bundle.config_snapshot is None:
        return params, 0
    config = bundle.config_snapshot
    stage = 3 if bundle_has(bundle, "dec_e") else \
        (2 if bundle_has(bundle, "dec_r") else 1)
    comps = build_components(config, stage)
    x = torch.zeros(1, 3, input_size, input_size)
    mult_adds = 0
    if stage == 1:
        enc_p, enc_m = module_cost(comps["enc_q"], x)
        z = torch.zeros(1, config.embed_dim,
                        input_size // config.downsample_factor,
                        input_size // config.downsample_factor)
        _, dec_m = module_cost(comps["dec_q"], z)
        mult_adds = enc_m + dec_m
    else:
        _, enc_m = module_cost(comps["enc_r"], x)
        z = torch.zeros(1, config.embed_dim,
                        input_size // config.downsample_factor,
                        input_size // config.downsample_factor)
        _, w_m = module_cost(comps["wpred"], z)
        _, r_m = module_cost(comps["dec_r"], z)
        mult_adds = enc_m + w_m + r_m
        if stage == 3:
            with torch.no_grad():
                _, taps = comps["dec_r"](z)
            _, e_m = module_cost(comps["dec_e"], z, taps)
            mult_adds += e_m
    return params, mult_adds
