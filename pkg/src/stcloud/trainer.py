"""Conditional-GAN + L1 objective, alternating optimisation and inference."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stcloud.errors import ContractError, TrainingFault
from stcloud.imagecore import MultispectralImage, denormalize, load_image
from stcloud.models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_generator,
    build_patchgan,
    forward,
    image_to_tensor,
    load_checkpoint,
    save_checkpoint,
)
from stcloud.pairforge import Manifest, TemporalGroup

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "d_loss", "g_gan", "g_l1", "g_total")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 100.0
    learning_rate: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 1
    steps: int = 1000
    seed: int = 0
    eval_every: int = 0
    d_widths: tuple[int, ...] = (64, 128, 256, 512)
    eval_split: str = "val"

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.steps <= 0:
            raise ContractError("steps must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


@dataclass(frozen=True)
class LossRecord:
    step: int
    d_loss: float
    g_gan_loss: float
    g_l1_loss: float
    g_total: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(v) for v in (self.d_loss, self.g_gan_loss, self.g_l1_loss, self.g_total)]


# -- losses ------------------------------------------------------------------


def d_loss_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-[log s(real) + log(1 - s(fake))] averaged over patches, via softplus."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def g_gan_from_logits(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def l1(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return (real - fake).abs().mean()


def _assert_no_target_in_condition(cond: torch.Tensor, real: torch.Tensor) -> None:
    if cond.untyped_storage().data_ptr() == real.untyped_storage().data_ptr():
        raise ContractError("discriminator conditioning must not contain the clear target")


def d_loss(D: nn.Module, cond: torch.Tensor, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    _assert_no_target_in_condition(cond, real)
    return d_loss_from_logits(D(cond, real), D(cond, fake.detach()))


def g_loss(D: nn.Module, cond: torch.Tensor, real: torch.Tensor, fake: torch.Tensor, lam: float):
    """Returns ``(g_gan, g_l1, total)`` with the non-saturating GAN term."""
    _assert_no_target_in_condition(cond, real)
    gan = g_gan_from_logits(D(cond, fake))
    rec = l1(real, fake)
    return gan, rec, gan + lam * rec


# -- data --------------------------------------------------------------------


def group_tensors(manifest: Manifest, group: TemporalGroup, channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(T, C, H, W) cloudy stack and (3, H, W) clear target, both in [-1, 1]."""
    cloudy = [load_image(manifest.resolve(z.path)) for z in group.cloudy]
    clear = load_image(manifest.resolve(group.clear.path))
    cond = torch.stack([image_to_tensor(img, channels) for img in cloudy])
    return cond, image_to_tensor(clear, 3)


class GroupData:
    """All groups of one split held in memory as tensors, served in seeded epoch order."""

    def __init__(self, manifest: Manifest, groups: list[TemporalGroup], channels: int, seed: int):
        if not groups:
            raise ContractError("no groups to train on")
        pairs = [group_tensors(manifest, g, channels) for g in groups]
        self.cond = torch.stack([c for c, _ in pairs])
        self.real = torch.stack([r for _, r in pairs])
        self.seed = seed

    def __len__(self):
        return self.cond.shape[0]

    def batches(self, batch_size: int):
        epoch = 0
        while True:
            order = list(range(len(self)))
            random.Random(self.seed * 1_000_003 + epoch).shuffle(order)
            for i in range(0, len(order) - batch_size + 1, batch_size):
                idx = torch.tensor(order[i : i + batch_size])
                yield self.cond[idx], self.real[idx]
            epoch += 1


# -- optimisation ------------------------------------------------------------


def make_optimizers(G: nn.Module, D: nn.Module, cfg: TrainConfig):
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    return opt_g, opt_d


def _check_finite(step: int, **values) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingFault(step, f"non-finite loss {bad}", snapshot=values)


def train_step(G, D, opt_g, opt_d, batch, cfg: TrainConfig, step: int = 0, update_d: bool = True) -> LossRecord:
    """One discriminator update followed by one generator update."""
    cond, real = batch
    G.train()
    D.train()
    fake = G(cond)

    d_val = d_loss(D, cond, real, fake)
    if update_d:
        opt_d.zero_grad(set_to_none=True)
        d_val.backward()
        opt_d.step()

    for p in D.parameters():
        p.requires_grad_(False)
    try:
        gan, rec, total = g_loss(D, cond, real, fake, cfg.lam)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
    finally:
        for p in D.parameters():
            p.requires_grad_(True)
    record = LossRecord(step, d_val.item(), gan.item(), rec.item(), total.item())
    _check_finite(step, d_loss=record.d_loss, g_gan=record.g_gan_loss, g_l1=record.g_l1_loss, g_total=record.g_total)
    opt_g.step()
    return record


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_models(spec: GeneratorSpec, cfg: TrainConfig, image_size: int):
    seed_everything(cfg.seed)
    G = build_generator(spec, image_size)
    D = build_patchgan(DiscriminatorSpec.for_generator(G.spec, cfg.d_widths))
    return G, D


def train(
    manifest: Manifest,
    spec: GeneratorSpec,
    cfg: TrainConfig,
    out_dir,
    eval_callback=None,
) -> Path:
    """Train on the train split and write ``checkpoint.ckpt`` + ``losses.csv`` under ``out_dir``.

    Every ``cfg.eval_every`` steps the validation split is scored and
    appended to ``eval.csv``.
    """
    if manifest.groups and manifest.groups[0].T != spec.T:
        raise ContractError(f"{manifest.kind} manifest has T={manifest.groups[0].T}; generator expects T={spec.T}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_groups = manifest.split("train")
    data = GroupData(manifest, train_groups, spec.in_channels, cfg.seed)
    side = data.cond.shape[-1]
    G, D = build_models(spec, cfg, side)
    opt_g, opt_d = make_optimizers(G, D, cfg)
    ckpt = out / "checkpoint.ckpt"
    extra = {"steps": cfg.steps, "seed": cfg.seed, "lam": cfg.lam}

    eval_rows = []
    batches = data.batches(cfg.batch_size)
    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_COLUMNS)
        for step in range(1, cfg.steps + 1):
            try:
                rec = train_step(G, D, opt_g, opt_d, next(batches), cfg, step)
            except TrainingFault as fault:
                save_checkpoint(out / "fault_snapshot.ckpt", G, D, extra)
                raise fault
            writer.writerow(rec.row())
            if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.steps:
                eval_rows.append(_evaluate_now(G, manifest, cfg, step, eval_callback))
                f.flush()
    save_checkpoint(ckpt, G, D, extra)
    if cfg.eval_every:
        eval_rows.append(_evaluate_now(G, manifest, cfg, cfg.steps, eval_callback))
        with open(out / "eval.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("step", "split", "mean_psnr", "mean_ssim", "n_samples"))
            writer.writerows(eval_rows)
    return ckpt


def _evaluate_now(G, manifest, cfg: TrainConfig, step, callback):
    from stcloud.evalsuite import evaluate_generator

    report = evaluate_generator(G, manifest, cfg.eval_split)
    log.info("step %d %s psnr=%.3f ssim=%.4f", step, cfg.eval_split, report.mean_psnr, report.mean_ssim)
    if callback is not None:
        callback(step, report)
    return (step, cfg.eval_split, repr(report.mean_psnr), repr(report.mean_ssim), report.n_samples)


def read_loss_log(path) -> list[LossRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        LossRecord(int(r["step"]), float(r["d_loss"]), float(r["g_gan"]), float(r["g_l1"]), float(r["g_total"]))
        for r in rows
    ]


def generate(G: nn.Module, cloudy: list[MultispectralImage]) -> MultispectralImage:
    """u8 RGB prediction from u8 cloudy inputs (most recent first)."""
    from stcloud.imagecore import normalize

    inputs = [normalize(img.select_channels(G.spec.in_channels)) for img in cloudy[: G.spec.T]]
    return denormalize(forward(G, inputs))


def infer(checkpoint, group: TemporalGroup, manifest: Manifest | None = None) -> MultispectralImage:
    G = load_checkpoint(checkpoint) if not isinstance(checkpoint, nn.Module) else checkpoint
    resolve = manifest.resolve if manifest is not None else Path
    cloudy = [load_image(resolve(z.path)) for z in group.cloudy]
    if len(cloudy) < G.spec.T:
        raise ContractError(f"group has {len(cloudy)} cloudy images; generator needs {G.spec.T}")
    return generate(G, cloudy)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
