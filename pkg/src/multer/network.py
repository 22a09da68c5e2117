"""Multi-level network: conv backbone, one LEM per enabled level, linear classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .lem import LEM, Affine, LemConfig
from .params import Module

LEVELS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Stage:
    channels: int
    blocks: int = 1
    stride: int = 2


@dataclass(frozen=True)
class BackboneConfig:
    stem_kernel: int = 7
    stem_channels: int = 8
    stem_stride: int = 2
    stages: tuple[Stage, ...] = (Stage(8), Stage(16), Stage(32), Stage(64))
    residual: bool = False
    in_channels: int = 3

    def __post_init__(self):
        stages = tuple(s if isinstance(s, Stage) else Stage(**s) if isinstance(s, dict) else Stage(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if len(stages) != 4:
            raise ContractError(f"backbone needs exactly 4 stages, got {len(stages)}")
        if any(s.channels < 1 or s.blocks < 1 or s.stride < 1 for s in stages):
            raise ContractError(f"invalid stage settings {stages}")

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def paper(cls) -> "BackboneConfig":
        """ResNet18-like widths with a 7x7/64/stride-2 stem and no stem pooling."""
        return cls(
            stem_kernel=7,
            stem_channels=64,
            stem_stride=2,
            stages=(Stage(64, 2, 1), Stage(128, 2, 2), Stage(256, 2, 2), Stage(512, 2, 2)),
        )

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        return cls(stem_kernel=3, stem_channels=2, stages=(Stage(2), Stage(2), Stage(2), Stage(2)))

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d


@dataclass(frozen=True)
class MulterConfig:
    n_classes: int = 4
    levels: tuple[int, ...] = LEVELS
    C: int = 128
    latent: int = 64
    K: int = 8
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        levels = tuple(sorted(set(int(v) for v in self.levels)))
        object.__setattr__(self, "levels", levels)
        if not levels or not set(levels) <= set(LEVELS):
            raise ContractError(f"levels must be a nonempty subset of {LEVELS}, got {self.levels}")
        if self.n_classes < 1 or self.C < 1 or self.latent < 1 or self.K < 1:
            raise ContractError(f"invalid MulterConfig {self}")
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))

    @property
    def feature_dim(self) -> int:
        return self.C * len(self.levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["backbone"] = self.backbone.to_dict()
        return d


class Conv(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng: np.random.Generator, gain: float = 2.0):
        super().__init__()
        self.stride, self.padding, self.kernel = stride, kernel // 2, kernel
        std = np.sqrt(gain / (cin * kernel * kernel))
        self.weight = self.add_param("weight", rng.normal(0.0, std, size=(cout, cin, kernel, kernel)))
        self.bias = self.add_param("bias", np.zeros((1, cout, 1, 1)))

    def __call__(self, x: Tensor, where: str) -> Tensor:
        H, W = x.shape[2:]
        if self.kernel > H + 2 * self.padding or self.kernel > W + 2 * self.padding:
            raise ContractError(f"{where}: input {H}x{W} too small for {self.kernel}x{self.kernel} kernel")
        weight = self.weight
        if x.shape[1] == 1 and weight.shape[1] > 1:
            # a replicated single-channel image meets the channel-summed kernel
            weight = ad.sum(weight, axis=1, keepdims=True)
        return ad.add(ad.conv2d(x, weight, self.stride, self.padding), self.bias)


class Block(Module):
    """conv3x3(stride) -> relu; with ``residual`` a projected skip joins before the relu."""

    def __init__(self, cin: int, cout: int, stride: int, residual: bool, rng: np.random.Generator):
        super().__init__()
        self.conv = self.add_child("conv", Conv(cin, cout, 3, stride, rng, gain=1.0 if residual else 2.0))
        self.skip = None
        if residual:
            if cin != cout or stride != 1:
                self.skip = self.add_child("project", Conv(cin, cout, 1, stride, rng, gain=1.0))
            else:
                self.skip = lambda x, where: x

    def __call__(self, x: Tensor, where: str) -> Tensor:
        y = self.conv(x, where)
        if self.skip is not None:
            y = ad.add(y, self.skip(x, where))
        return ad.relu(y)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.stem = self.add_child("stem", Conv(config.in_channels, config.stem_channels, config.stem_kernel, config.stem_stride, rng))
        self.stages: list[list[Block]] = []
        cin = config.stem_channels
        for si, stage in enumerate(config.stages, start=1):
            blocks = []
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                blocks.append(self.add_child(f"res{si}_{bi}", Block(cin, stage.channels, stride, config.residual, rng)))
                cin = stage.channels
            self.stages.append(blocks)

    def __call__(self, image) -> list[Tensor]:
        return backbone_forward(image, self)


def as_image_batch(image, channels: int = 3, replicate: bool = True) -> Tensor:
    """Accept ``[H,W]``, ``[N,H,W]`` or ``[N,C,H,W]``.

    Single-channel input is replicated to ``channels`` unless ``replicate`` is
    false, in which case it stays single-channel (the stem handles it).
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 2:
        x = ad.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4:
        raise ContractError(f"image batch must be 2-4 dimensional, got {x.shape}")
    if x.shape[1] == 1 and channels != 1:
        if not replicate:
            return x
        x = ad.concat([x] * channels, axis=1)
    if x.shape[1] != channels:
        raise ContractError(f"expected {channels} image channels, got {x.shape[1]}")
    return x


def backbone_forward(image, backbone: Backbone) -> list[Tensor]:
    """Image batch -> the four stage outputs ``[N, D_l, H_l, W_l]``."""
    cfg = backbone.config
    x = as_image_batch(image, cfg.in_channels, replicate=False)
    H, W = x.shape[2:]
    if H < cfg.stem_kernel or W < cfg.stem_kernel:
        raise ContractError(f"stem: input {H}x{W} smaller than the {cfg.stem_kernel}x{cfg.stem_kernel} stem kernel")
    x = ad.relu(backbone.stem(x, "stem"))
    maps = []
    for si, blocks in enumerate(backbone.stages, start=1):
        for block in blocks:
            x = block(x, f"stage {si}")
        maps.append(x)
    return maps


class MulterNet(Module):
    def __init__(self, config: MulterConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.backbone = self.add_child("backbone", Backbone(config.backbone, rng))
        self.lems: dict[int, LEM] = {}
        for level in config.levels:
            D = config.backbone.stages[level - 1].channels
            lem_cfg = LemConfig(D=D, K=config.K, latent=config.latent, C=config.C)
            self.lems[level] = self.add_child(f"lem{level}", LEM(lem_cfg, rng))
        self.classifier = self.add_child("classifier", Affine(config.feature_dim, config.n_classes, rng))

    @classmethod
    def init(cls, config: MulterConfig, seed: int) -> "MulterNet":
        return cls(config, np.random.default_rng(seed))

    def features(self, image) -> Tensor:
        maps = backbone_forward(image, self.backbone)
        return ad.concat([self.lems[level](maps[level - 1]) for level in self.config.levels], axis=-1)

    def __call__(self, image) -> Tensor:
        return multer_forward(image, self)

    def clamp(self) -> None:
        for lem in self.lems.values():
            lem.clamp()


def multer_forward(image, net: MulterNet) -> Tensor:
    """Image batch -> logits ``[N, n_classes]``; LEM features concatenated by ascending level."""
    return net.classifier(net.features(image))


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already resolves ties to the lowest index."""
    return np.argmax(np.atleast_2d(logits), axis=-1)


def predict(image, net: MulterNet) -> np.ndarray:
    return argmax_lowest(multer_forward(image, net).data)
