"""U-Net with strided-convolution downsampling and bilinear upsampling."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .exceptions import ArchitectureMismatchError, IndivisibleSizeError, InvalidConfigError

HEAD_PREFIX = "head."
CHECKPOINT_FORMAT = "polypssl-checkpoint/1"


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 64
    channel_multiplier: int = 2
    out_channels: int = 1
    norm: bool = True
    final_activation: str = "sigmoid"

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidConfigError("must be >= 1", "network", "depth")
        if self.base_channels < 1:
            raise InvalidConfigError("must be >= 1", "network", "base_channels")
        if self.channel_multiplier < 1:
            raise InvalidConfigError("must be >= 1", "network", "channel_multiplier")
        if self.out_channels not in (1, 3):
            raise InvalidConfigError("must be 1 or 3", "network", "out_channels")
        if self.final_activation not in ("none", "sigmoid"):
            raise InvalidConfigError("must be 'none' or 'sigmoid'", "network", "final_activation")

    @classmethod
    def inpainting(cls, **kw):
        return cls(out_channels=3, final_activation="none", **kw)

    @classmethod
    def segmentation(cls, **kw):
        return cls(out_channels=1, final_activation="sigmoid", **kw)

    def channels(self) -> list[int]:
        return [self.base_channels * self.channel_multiplier**i for i in range(self.depth + 1)]

    @property
    def divisor(self) -> int:
        return 2**self.depth

    def trunk_key(self):
        return (self.depth, self.base_channels, self.channel_multiplier, self.norm)


def _conv_bn_relu(c_in, c_out, kernel, stride, norm):
    pad = 1 if kernel == 3 else 0
    layers = [nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=pad, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.ReLU(inplace=True))
    return layers


class DoubleConv(nn.Sequential):
    def __init__(self, c_in, c_out, norm=True):
        super().__init__(*_conv_bn_relu(c_in, c_out, 3, 1, norm), *_conv_bn_relu(c_out, c_out, 3, 1, norm))


class Down(nn.Sequential):
    """2x2 stride-2 convolution followed by a 3x3 double convolution."""

    def __init__(self, c_in, c_out, norm=True):
        super().__init__(*_conv_bn_relu(c_in, c_in, 2, 2, norm), DoubleConv(c_in, c_out, norm))


class Up(nn.Module):
    def __init__(self, c_in, c_skip, c_out, norm=True):
        super().__init__()
        self.conv = DoubleConv(c_in + c_skip, c_out, norm)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(torch.cat([skip, x], dim=1))


class UNet(nn.Module):
    """Encoder-decoder with skip connections; operates on N x C x H x W tensors."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels()
        self.stem = DoubleConv(3, ch[0], cfg.norm)
        self.down = nn.ModuleList(Down(ch[i], ch[i + 1], cfg.norm) for i in range(cfg.depth))
        self.up = nn.ModuleList(
            Up(ch[i + 1], ch[i], ch[i], cfg.norm) for i in reversed(range(cfg.depth))
        )
        self.head = nn.Conv2d(ch[0], cfg.out_channels, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()

    def trunk(self, x):
        x = self.stem(x)
        skips = [x]
        for down in self.down:
            x = down(x)
            skips.append(x)
        skips.pop()
        for up in self.up:
            x = up(x, skips.pop())
        return x

    def forward(self, x):
        h, w = x.shape[-2:]
        d = self.cfg.divisor
        if h % d or w % d:
            raise IndivisibleSizeError(
                f"input size {h}x{w} must be divisible by {d} for depth {self.cfg.depth}"
            )
        out = self.head(self.trunk(x))
        if self.cfg.final_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out


def build_unet(cfg: UNetConfig) -> UNet:
    if not isinstance(cfg, UNetConfig):
        raise InvalidConfigError(f"expected UNetConfig, got {type(cfg).__name__}", "network")
    return UNet(cfg)


def forward(model: UNet, batch) -> torch.Tensor:
    """Run ``model`` on a channels-last batch (N x H x W x 3), returning N x H x W x C."""
    x = torch.as_tensor(batch)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 input, got {tuple(x.shape)}")
    param = next(model.parameters())
    x = x.to(dtype=param.dtype, device=param.device).permute(0, 3, 1, 2)
    return model(x).permute(0, 2, 3, 1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    weights: dict
    config: UNetConfig
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: UNet, **provenance):
        weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(weights, model.cfg, dict(provenance))

    def build(self) -> UNet:
        model = build_unet(self.config)
        self.check_compatible(model)
        model.load_state_dict(self.weights)
        return model

    def check_compatible(self, model: UNet):
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in self.weights.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))[:3]
            extra = sorted(set(got) - set(expected))[:3]
            raise ArchitectureMismatchError(
                f"weights do not match config (missing {missing}, unexpected {extra})"
            )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "config": json.dumps(asdict(self.config), sort_keys=True),
                "provenance": json.dumps(self.provenance, sort_keys=True),
                "weights": self.weights,
            },
            buf,
        )
        return buf.getvalue()

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
            raise ArchitectureMismatchError(f"'{path}' is not a checkpoint archive")
        config = UNetConfig(**json.loads(blob["config"]))
        ckpt = cls(blob["weights"], config, json.loads(blob["provenance"]))
        # validate the archive against its own config before anyone uses the weights
        ckpt.check_compatible(build_unet(config))
        return ckpt


@dataclass(frozen=True)
class TransferSummary:
    transferred: int
    reinitialized: int
    transferred_names: tuple[str, ...]
    reinitialized_names: tuple[str, ...]


def transfer_weights(pretrained: Checkpoint, target_cfg: UNetConfig) -> tuple[UNet, TransferSummary]:
    """Build ``target_cfg`` and copy every tensor whose name and shape match.

    Tensors of the output head that do not fit (3-channel reconstruction into
    1-channel segmentation) keep their fresh initialization. Any mismatch in
    the trunk is an error.
    """
    model = build_unet(target_cfg)
    src = pretrained.weights
    dst = model.state_dict()
    src_trunk = {k: tuple(v.shape) for k, v in src.items() if not k.startswith(HEAD_PREFIX)}
    dst_trunk = {k: tuple(v.shape) for k, v in dst.items() if not k.startswith(HEAD_PREFIX)}
    if src_trunk != dst_trunk:
        differing = sorted(set(src_trunk) ^ set(dst_trunk)) or sorted(
            k for k in src_trunk if src_trunk[k] != dst_trunk[k]
        )
        raise ArchitectureMismatchError(
            f"encoder/decoder trunks differ ({len(differing)} tensors, e.g. {differing[:3]})"
        )
    moved, fresh = [], []
    for name, tensor in dst.items():
        if name in src and tuple(src[name].shape) == tuple(tensor.shape):
            dst[name] = src[name].detach().clone().to(tensor.dtype)
            moved.append(name)
        else:
            fresh.append(name)
    model.load_state_dict(dst)
    params = dict(model.named_parameters())
    return model, TransferSummary(
        transferred=sum(params[n].numel() for n in moved if n in params),
        reinitialized=sum(params[n].numel() for n in fresh if n in params),
        transferred_names=tuple(moved),
        reinitialized_names=tuple(fresh),
    )


def with_head(cfg: UNetConfig, task: str) -> UNetConfig:
    if task == "inpainting":
        return replace(cfg, out_channels=3, final_activation="none")
    if task == "segmentation":
        return replace(cfg, out_channels=1, final_activation="sigmoid")
    raise ValueError(f"unknown task '{task}'")
