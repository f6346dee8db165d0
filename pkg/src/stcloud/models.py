"""Generators (single U-Net, branched ResNet, branched U-Net) and the PatchGAN critic.

All generators take a stacked input of shape ``(N, T, C, H, W)`` in
[-1, 1] and return ``(N, 3, H, W)`` through a tanh.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from stcloud.errors import ContractError, CorruptionError, FormatError, ShapeError
from stcloud.imagecore import SIGNED, MultispectralImage, normalize

UNET_SINGLE = "unet_single"
BRANCHED_RESNET = "branched_resnet"
BRANCHED_UNET = "branched_unet"
KINDS = (UNET_SINGLE, BRANCHED_RESNET, BRANCHED_UNET)
UNET_WIDTH_MULTS = (1, 2, 4, 8, 8, 8, 8, 8)
MAX_WIDTH = 512
PAIRS = ((0, 1), (1, 2), (0, 2))


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = BRANCHED_RESNET
    in_channels: int = 4
    T: int = 3
    base_width: int = 64
    levels: int = 8
    res_blocks: int = 9
    branch_features: int = 32
    share_branch_weights: bool = False
    out_channels: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown generator kind {self.kind!r}")
        if self.in_channels not in (3, 4):
            raise ContractError(f"in_channels must be 3 or 4, got {self.in_channels}")
        if self.kind == UNET_SINGLE and self.T != 1:
            raise ContractError("unet_single takes exactly one input image (T=1)")
        if self.kind != UNET_SINGLE and self.T != 3:
            raise ContractError(f"{self.kind} takes exactly three input images (T=3), got T={self.T}")
        if self.out_channels != 3:
            raise ContractError("generators always emit 3 RGB channels")
        if not 1 <= self.levels <= len(UNET_WIDTH_MULTS):
            raise ContractError(f"levels must be in [1, {len(UNET_WIDTH_MULTS)}]")
        if self.base_width < 1 or self.res_blocks < 0 or self.branch_features < 1:
            raise ContractError("widths must be positive and res_blocks non-negative")

    def for_size(self, side: int) -> GeneratorSpec:
        """Reduce U-Net depth to ``floor(log2(side))`` for small inputs."""
        if side < 1:
            raise ShapeError(f"invalid side {side}")
        depth = int(math.floor(math.log2(side)))
        if self.kind != BRANCHED_RESNET and depth < self.levels:
            return replace(self, levels=max(depth, 1))
        return self

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> GeneratorSpec:
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("bool", bool):
                kwargs[f.name] = raw in ("True", "true", "1", "on")
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass(frozen=True)
class DiscriminatorSpec:
    cond_channels: int
    cand_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512)

    @classmethod
    def for_generator(cls, spec: GeneratorSpec, widths=(64, 128, 256, 512)) -> DiscriminatorSpec:
        return cls(spec.T * spec.in_channels, 3, tuple(widths))


# -- building blocks ---------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.BatchNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.BatchNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetPipeline(nn.Module):
    """7x7 entry conv, two stride-2 convs, residual blocks, two stride-1/2 convs, 7x7 exit conv."""

    def __init__(self, in_ch, out_ch, base_width=64, n_blocks=9):
        super().__init__()
        w = base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_ch, w, 7), nn.BatchNorm2d(w), nn.ReLU(True)]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(w * mult, w * mult * 2, 3, stride=2, padding=1),
                nn.BatchNorm2d(w * mult * 2),
                nn.ReLU(True),
            ]
        layers += [ResidualBlock(w * 4) for _ in range(n_blocks)]
        for mult in (4, 2):
            layers += [
                nn.ConvTranspose2d(w * mult, w * mult // 2, 3, stride=2, padding=1, output_padding=1),
                nn.BatchNorm2d(w * mult // 2),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, out_ch, 7), nn.Tanh()]
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _check_input(x: torch.Tensor, spec: GeneratorSpec, multiple: int) -> None:
    if x.dim() != 5:
        raise ContractError(f"generator input must be (N, T, C, H, W), got {tuple(x.shape)}")
    _, t, c, h, w = x.shape
    if t != spec.T:
        raise ContractError(f"expected {spec.T} input images, got {t}")
    if c != spec.in_channels:
        raise ContractError(f"expected {spec.in_channels} channels, got {c}")
    if h % multiple or w % multiple:
        raise ShapeError(f"input {h}x{w} not divisible by {multiple}")


class BranchedResnetGenerator(nn.Module):
    """Three per-image pipelines, three pairwise fusion pipelines, one final pipeline."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        if spec.kind != BRANCHED_RESNET:
            raise ContractError(f"spec kind {spec.kind!r} is not {BRANCHED_RESNET!r}")
        self.spec = spec
        f, w, n = spec.branch_features, spec.base_width, spec.res_blocks

        def branches(in_ch):
            if spec.share_branch_weights:
                shared = ResnetPipeline(in_ch, f, w, n)
                return nn.ModuleList([shared, shared, shared])
            return nn.ModuleList([ResnetPipeline(in_ch, f, w, n) for _ in range(3)])

        self.stage1 = branches(spec.in_channels)
        self.stage2 = branches(2 * f)
        self.stage3 = ResnetPipeline(3 * f, spec.out_channels, w, n)

    def stage1_features(self, x):
        return [self.stage1[i](x[:, i]) for i in range(3)]

    def stage2_inputs(self, feats):
        return [torch.cat([feats[a], feats[b]], dim=1) for a, b in PAIRS]

    def forward(self, x):
        _check_input(x, self.spec, 4)
        feats = self.stage1_features(x)
        fused = [self.stage2[i](z) for i, z in enumerate(self.stage2_inputs(feats))]
        return self.stage3(torch.cat(fused, dim=1))


def unet_widths(spec: GeneratorSpec) -> list[int]:
    return [min(spec.base_width * m, MAX_WIDTH) for m in UNET_WIDTH_MULTS[: spec.levels]]


class UnetEncoder(nn.Module):
    def __init__(self, in_ch, widths):
        super().__init__()
        blocks = []
        prev = in_ch
        for i, w in enumerate(widths):
            layers = [nn.Conv2d(prev, w, 4, stride=2, padding=1)]
            # the innermost map can be 1x1; batch statistics over one value are undefined
            if i < len(widths) - 1:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.ReLU(True))
            blocks.append(nn.Sequential(*layers))
            prev = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        acts = []
        for block in self.blocks:
            x = block(x)
            acts.append(x)
        return acts


class UnetGenerator(nn.Module):
    """Encoder/decoder with mirrored skips; ``n_branches`` separate encoders share one decoder.

    Decoder block ``k`` (1-based) consumes the previous decoder output
    concatenated with the encoder activations from level ``levels - k + 1``
    of every branch; block 1 consumes the concatenated bottlenecks.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        if spec.kind not in (UNET_SINGLE, BRANCHED_UNET):
            raise ContractError(f"spec kind {spec.kind!r} is not a U-Net")
        self.spec = spec
        self.n_branches = spec.T
        widths = unet_widths(spec)
        self.widths = widths
        L = spec.levels
        if spec.share_branch_weights and self.n_branches > 1:
            enc = UnetEncoder(spec.in_channels, widths)
            self.encoders = nn.ModuleList([enc] * self.n_branches)
        else:
            self.encoders = nn.ModuleList(
                [UnetEncoder(spec.in_channels, widths) for _ in range(self.n_branches)]
            )
        self.decoder_in_channels = []
        self.decoder_out_channels = []
        blocks = []
        for k in range(1, L + 1):
            skip = widths[L - k]
            in_ch = self.n_branches * skip if k == 1 else self.decoder_out_channels[-1] + self.n_branches * skip
            out_ch = widths[L - k - 1] if k < L else spec.out_channels
            layers = [nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)]
            if k < L:
                layers += [nn.BatchNorm2d(out_ch), nn.ReLU(True)]
            else:
                layers.append(nn.Tanh())
            blocks.append(nn.Sequential(*layers))
            self.decoder_in_channels.append(in_ch)
            self.decoder_out_channels.append(out_ch)
        self.decoder = nn.ModuleList(blocks)

    def forward(self, x):
        _check_input(x, self.spec, 2**self.spec.levels)
        acts = [enc(x[:, i]) for i, enc in enumerate(self.encoders)]
        L = self.spec.levels
        h = torch.cat([a[L - 1] for a in acts], dim=1)
        for k, block in enumerate(self.decoder, start=1):
            if k > 1:
                h = torch.cat([h] + [a[L - k] for a in acts], dim=1)
            h = block(h)
        return h


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN: scores (cloudy stack, candidate) pairs per ~70px patch."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        in_ch = spec.cond_channels + spec.cand_channels
        layers = [nn.Conv2d(in_ch, w[0], 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        for prev, cur in zip(w[:-2], w[1:-1]):
            layers += [nn.Conv2d(prev, cur, 4, stride=2, padding=1), nn.BatchNorm2d(cur), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(w[-2], w[-1], 4, stride=1, padding=1), nn.BatchNorm2d(w[-1]), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(w[-1], 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, cond, candidate):
        """``cond`` is (N, T, C, H, W) or (N, T*C, H, W); ``candidate`` is (N, 3, H, W)."""
        if cond.dim() == 5:
            cond = cond.flatten(1, 2)
        if candidate.shape[1] != self.spec.cand_channels:
            raise ContractError(f"candidate must have {self.spec.cand_channels} channels, got {candidate.shape[1]}")
        if cond.shape[1] != self.spec.cond_channels:
            raise ContractError(f"conditioning must have {self.spec.cond_channels} channels, got {cond.shape[1]}")
        if cond.shape[-2:] != candidate.shape[-2:]:
            raise ShapeError("conditioning and candidate spatial shapes differ")
        return self.model(torch.cat([cond, candidate], dim=1))


def patch_map_size(side: int, n_layers: int = 5) -> int:
    """Spatial size of the PatchGAN logit map: three stride-2 then two stride-1 4x4 convs, pad 1."""
    for i in range(n_layers):
        stride = 2 if i < n_layers - 2 else 1
        side = (side + 2 - 4) // stride + 1
    return side


def build_unet_single(spec: GeneratorSpec, image_size: int | None = None) -> UnetGenerator:
    if spec.kind != UNET_SINGLE:
        raise ContractError(f"spec kind {spec.kind!r} is not {UNET_SINGLE!r}")
    if image_size is not None:
        spec = spec.for_size(image_size)
    return UnetGenerator(spec)


def build_branched_unet(spec: GeneratorSpec, image_size: int | None = None) -> UnetGenerator:
    if spec.kind != BRANCHED_UNET:
        raise ContractError(f"spec kind {spec.kind!r} is not {BRANCHED_UNET!r}")
    if image_size is not None:
        spec = spec.for_size(image_size)
    return UnetGenerator(spec)


def build_branched_resnet(spec: GeneratorSpec, image_size: int | None = None) -> BranchedResnetGenerator:
    return BranchedResnetGenerator(spec)


def build_generator(spec: GeneratorSpec, image_size: int | None = None) -> nn.Module:
    builders = {
        UNET_SINGLE: build_unet_single,
        BRANCHED_RESNET: build_branched_resnet,
        BRANCHED_UNET: build_branched_unet,
    }
    return builders[spec.kind](spec, image_size)


def build_patchgan(spec: DiscriminatorSpec) -> PatchDiscriminator:
    if spec.cand_channels != 3:
        raise ContractError("PatchGAN candidates are 3-channel RGB images")
    if len(spec.widths) < 2:
        raise ContractError("PatchGAN needs at least two widths")
    return PatchDiscriminator(spec)


def count_parameters(model: nn.Module | None) -> int:
    """Number of distinct learnable scalars; shared modules count once."""
    if model is None:
        return 0
    return sum(p.numel() for p in model.parameters())


# -- image <-> tensor --------------------------------------------------------


def image_to_tensor(img: MultispectralImage, channels: int | None = None) -> torch.Tensor:
    """u8 or signed image -> (C, H, W) float32 tensor in [-1, 1].

    Every network input in the package goes through here so generators and
    the land-cover classifier see identically normalised data.
    """
    if img.dtype != SIGNED:
        img = normalize(img)
    arr = img.samples if channels is None else img.samples[:, :, :channels]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def tensor_to_image(t: torch.Tensor) -> MultispectralImage:
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return MultispectralImage(np.clip(arr, -1.0, 1.0), SIGNED)


def stack_inputs(images: list[MultispectralImage], channels: int) -> torch.Tensor:
    shapes = {img.shape[:2] for img in images}
    if len(shapes) != 1:
        raise ContractError(f"input images differ in shape: {sorted(shapes)}")
    return torch.stack([image_to_tensor(img, channels) for img in images])


def forward(model: nn.Module, inputs: list[MultispectralImage]) -> MultispectralImage:
    """Evaluation-mode generator pass on normalised images."""
    spec = model.spec
    if len(inputs) != spec.T:
        raise ContractError(f"expected {spec.T} inputs, got {len(inputs)}")
    for img in inputs:
        if img.dtype != SIGNED:
            raise ContractError("forward expects signed-float (normalised) images")
        if img.channels < spec.in_channels:
            raise ContractError(f"inputs need {spec.in_channels} channels, got {img.channels}")
    x = stack_inputs(inputs, spec.in_channels).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y = model(x)[0]
    finally:
        model.train(was_training)
    return tensor_to_image(y)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = "stcloud-checkpoint 1"
_TENSOR_HEAD = struct.Struct("<H")


def save_checkpoint(path, generator: nn.Module, discriminator: nn.Module | None = None, extra: dict | None = None) -> None:
    """Text header of ``key=value`` lines, blank line, then named little-endian f32 tensors."""
    state = {f"G.{k}": v for k, v in generator.state_dict().items()}
    if discriminator is not None:
        state.update({f"D.{k}": v for k, v in discriminator.state_dict().items()})
        state_widths = ",".join(str(w) for w in discriminator.spec.widths)
    header = [CHECKPOINT_MAGIC] + generator.spec.to_lines()
    if discriminator is not None:
        header.append(f"d_widths={state_widths}")
    for k, v in (extra or {}).items():
        header.append(f"extra.{k}={v}")
    header.append(f"tensors={len(state)}")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n\n").encode("utf-8"))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode("utf-8")
            f.write(_TENSOR_HEAD.pack(len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    split = data.find(b"\n\n")
    if split < 0 or not data.startswith(CHECKPOINT_MAGIC.encode()):
        raise FormatError(f"{path}: not a checkpoint")
    header = {}
    for line in data[:split].decode("utf-8").splitlines()[1:]:
        key, _, value = line.partition("=")
        header[key] = value
    pos = split + 2
    tensors = {}
    try:
        for _ in range(int(header["tensors"])):
            (n,) = _TENSOR_HEAD.unpack_from(data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            tensors[name] = arr
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptionError(f"{path}: truncated or malformed tensor payload") from exc
    if pos != len(data):
        raise CorruptionError(f"{path}: {len(data) - pos} trailing bytes")
    return header, tensors


def _load_state(module: nn.Module, prefix: str, tensors: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    wanted = {k: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(own) != {k[len(prefix):] for k in wanted}:
        raise ContractError(f"checkpoint tensors do not match the {prefix[:-1]} architecture")
    state = {}
    for k, v in own.items():
        arr = wanted[prefix + k]
        if tuple(arr.shape) != tuple(v.shape):
            raise ContractError(f"tensor {prefix + k} has shape {arr.shape}, expected {tuple(v.shape)}")
        state[k] = torch.from_numpy(arr.copy()).to(v.dtype)
    module.load_state_dict(state)


def load_checkpoint(path, expect: GeneratorSpec | None = None, with_discriminator: bool = False):
    """Rebuild the generator (and optionally discriminator) stored at ``path``.

    When ``expect`` is given the stored spec must match it before any weight
    is read.
    """
    header, tensors = read_checkpoint(path)
    spec = GeneratorSpec.from_mapping(header)
    if expect is not None and expect != spec:
        raise ContractError(f"checkpoint spec {asdict(spec)} differs from expected {asdict(expect)}")
    generator = UnetGenerator(spec) if spec.kind != BRANCHED_RESNET else BranchedResnetGenerator(spec)
    _load_state(generator, "G.", tensors)
    generator.eval()
    if not with_discriminator:
        return generator
    widths = tuple(int(w) for w in header["d_widths"].split(","))
    disc = build_patchgan(DiscriminatorSpec.for_generator(spec, widths))
    _load_state(disc, "D.", tensors)
    disc.eval()
    return generator, disc
