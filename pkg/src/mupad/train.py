"""The training loop: batched flow-matching with condition dropout, AdamW,
EMA, per-step loss logging, and periodic checkpoints.

Each step draws a batch of samples, noises their latents at a uniform t,
applies per-modality condition dropout, accumulates gradients sample by
sample, and takes one optimizer step. Frozen-encoder outputs and latents
are cached per sample, so the frozen stacks run once per dataset. Runs are
bit-deterministic given (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import conditioning as cond_mod
from . import flow
from .config import RunConfig
from .data import Dataset
from .model import ConditionSet, Denoiser
from .objectives import (AlignProjector, LossWeights, RepaProjector,
                         condition_dropout, total_loss)
from .storage import read_checkpoint, write_checkpoint
from .tensor import AdamW, Ema, Tensor, TensorError, finite_guard


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, checkpoint: str):
        super().__init__(f"non-finite loss at step {step}; last-good state at {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int
    first_loss_mean: float
    final_loss_mean: float


@dataclass
class _Item:
    """Per-(sample[,group]) caches of everything frozen across steps."""
    z0: np.ndarray
    image: np.ndarray
    cond_tokens: np.ndarray
    z_cls: np.ndarray
    teacher_grid: np.ndarray
    caption_ids: list[int]
    pathway: np.ndarray
    struct_image: np.ndarray | None = None


class TrainerState:
    """Model, projector, optimizer, and EMA bundled for checkpointing."""

    def __init__(self, config: RunConfig, vocab_size: int, teacher_dim: int = 32):
        self.config = config
        self.model = Denoiser(config.model_config(vocab_size), seed=config.seed)
        self.params: dict[str, Tensor] = dict(self.model.params)
        grid_side = self.model.config.latent_shape[1] // config.patch
        self.align_proj = None
        self.repa_proj = None
        if config.arm == "mupad":
            self.align_proj = AlignProjector(config.dim, teacher_dim, grid_side,
                                             seed=config.seed + 1)
            self.params.update(self.align_proj.parameters())
        elif config.arm == "repa":
            self.repa_proj = RepaProjector(config.dim, teacher_dim, seed=config.seed + 1)
            self.params.update(self.repa_proj.parameters())
        self.opt = AdamW(self.params, lr=config.lr, beta1=config.beta1,
                         beta2=config.beta2, weight_decay=config.weight_decay)
        self.ema = Ema(self.params, decay=config.ema_decay)
        self.step = 0

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            arrays[f"param.{name}"] = p.data
            arrays[f"adam.m.{name}"] = self.opt.m[name]
            arrays[f"adam.v.{name}"] = self.opt.v[name]
            arrays[f"ema.{name}"] = self.ema.shadow[name]
        arrays["adam.step"] = np.array([float(self.opt.step_count)])
        return arrays

    def save(self, path) -> None:
        write_checkpoint(path, self.config.serialize(), self.step, self.checkpoint_arrays())

    @staticmethod
    def load(path) -> "TrainerState":
        config_text, step, arrays = read_checkpoint(path)
        config = RunConfig.parse(config_text)
        vocab_size = arrays["param.text.table"].shape[0]
        state = TrainerState(config, vocab_size)
        state.step = step
        for name, p in state.params.items():
            p.data = arrays[f"param.{name}"].copy()
            state.opt.m[name] = arrays[f"adam.m.{name}"].copy()
            state.opt.v[name] = arrays[f"adam.v.{name}"].copy()
            state.ema.shadow[name] = arrays[f"ema.{name}"].copy()
        state.opt.step_count = int(arrays["adam.step"][0])
        return state


def _build_items(dataset: Dataset, config: RunConfig, vocab, cond_enc, teacher) -> list[_Item]:
    f = config.latent_factor
    items: list[_Item] = []
    for i in range(len(dataset)):
        image = dataset.image(i)
        caption_ids = vocab.tokenize(dataset.entries[i].caption)
        pathway = dataset.pathway(i)
        if config.task == "generate":
            tokens, z_cls = cond_enc.encode(image)
            items.append(_Item(z0=cond_mod.latent_encode(image, f), image=image,
                               cond_tokens=tokens, z_cls=z_cls,
                               teacher_grid=teacher.feature_grid(image),
                               caption_ids=caption_ids, pathway=pathway))
        else:
            for group in cond_mod.group_channels(dataset.multiplex(i)):
                tokens, z_cls = cond_enc.encode(group)
                items.append(_Item(z0=cond_mod.latent_encode(group, f), image=group,
                                   cond_tokens=tokens, z_cls=z_cls,
                                   teacher_grid=teacher.feature_grid(group),
                                   caption_ids=caption_ids, pathway=pathway,
                                   struct_image=image))
    return items


def train(config: RunConfig, manifest_path, out_dir, quiet: bool = True) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.serialize())

    vocab = cond_mod.TextVocab.load_default()
    cond_enc = cond_mod.condition_encoder()
    teacher = cond_mod.teacher_encoder()
    dataset = Dataset(manifest_path)
    items = _build_items(dataset, config, vocab, cond_enc, teacher)

    state = TrainerState(config, vocab_size=len(vocab))
    model = state.model
    weights = LossWeights(config.lambda_patch, config.lambda_cls, config.lambda_align)
    rng = np.random.default_rng(config.seed)
    want_features = config.arm in ("mupad", "repa")
    zshape = model.config.latent_shape
    factor = config.latent_factor

    log_path = out / "loss_log.tsv"
    log = open(log_path, "w")
    log.write("step\tpatch\tcls\talign\ttotal\n")
    totals: list[float] = []
    last_good = out / f"checkpoint_step{0:06d}.bin"
    state.save(last_good)

    inv_batch = Tensor(1.0 / config.batch)
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(items), size=config.batch)
        state.opt.zero_grad()
        sums = {"patch": 0.0, "cls": 0.0, "align": 0.0, "total": 0.0}
        try:
            # per-op guard suspended for throughput; a non-finite loss or
            # gradient still aborts the run at step granularity below
            with finite_guard(False):
                for i in idx:
                    item = items[int(i)]
                    t = float(rng.random())
                    eps = rng.standard_normal(item.z0.shape)
                    x_t, v_star = flow.interpolate(item.z0, eps, t)
                    struct = None
                    cond_tokens, z_cls = item.cond_tokens, item.z_cls
                    if config.task == "stain":
                        scales = 1.0 + 0.05 * (2.0 * rng.random(3) - 1.0)
                        shifts = 0.02 * (2.0 * rng.random(3) - 1.0)
                        aug = cond_mod.hed_augment(item.struct_image, scales, shifts)
                        struct = cond_mod.latent_encode(aug, factor)
                        cond_tokens, z_cls = cond_enc.encode(aug)
                    cond = ConditionSet(
                        rna_vector=item.pathway if config.task == "generate" else None,
                        text_tokens=model.embed_text_ids(item.caption_ids)
                        if (config.task == "generate" and item.caption_ids) else None,
                        image_tokens=cond_tokens, z_cls=z_cls)
                    cond = condition_dropout(cond, config.dropout, rng)
                    out_fwd = model.forward(x_t, t, cond, struct=struct,
                                            want_features=want_features)
                    loss, terms = total_loss(out_fwd, v_star, item.z_cls, weights,
                                             config.arm, align_proj=state.align_proj,
                                             repa_proj=state.repa_proj,
                                             teacher_grid=item.teacher_grid,
                                             align_layer=model.config.align_layer)
                    if not np.isfinite(loss.data):
                        raise TensorError(f"non-finite loss at step {step}")
                    (inv_batch * loss).backward()
                    for k in sums:
                        sums[k] += terms.get(k, 0.0) / config.batch
            state.opt.step()
            state.ema.update(state.params)
        except TensorError as err:
            log.close()
            aborted = out / "checkpoint_aborted.bin"
            state.save(aborted)
            raise TrainingAborted(step, str(last_good)) from err
        state.step = step
        totals.append(sums["patch"])
        log.write(f"{step}\t{sums['patch']:.6f}\t{sums['cls']:.6f}\t"
                  f"{sums['align']:.6f}\t{sums['total']:.6f}\n")
        log.flush()
        if not quiet and step % 100 == 0:
            print(f"step {step}: total {sums['total']:.4f}")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            last_good = out / f"checkpoint_step{step:06d}.bin"
            state.save(last_good)

    log.close()
    final = out / "checkpoint_final.bin"
    state.save(final)
    first = float(np.mean(totals[:100])) if totals else 0.0
    last = float(np.mean(totals[-100:])) if totals else 0.0
    return TrainResult(checkpoint=final, log_path=log_path, steps=config.steps,
                       first_loss_mean=first, final_loss_mean=last)
