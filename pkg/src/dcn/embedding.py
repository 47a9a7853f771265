"""Staged embedding column with optional learned-noise feature heads."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .blocks import BLOCK_KINDS, ConvBlock, init_weights

MODES = ("deterministic", "sample")
STD_BIAS_INIT = -3.0
# float32 sigmoid rounds to exactly 0 or 1 once saturated; keep std strictly inside (0, 1)
STD_MARGIN = 1e-6


@dataclass
class EmbeddingConfig:
    """Architecture of the embedding column.

    Desk scale defaults: four stages of [3, 4, 6, 3] blocks with widths
    [16, 32, 64, 128] and no stem, so 32x32 inputs give 16/8/4/2 maps.
    ``full_scale()`` returns the 224x224 configuration.
    """

    stages: int = 4
    blocks_per_stage: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    channels_per_stage: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    block_kind: str = "squeeze_excite"
    se_reduction: int = 16
    stem: bool = False
    noise_enabled: bool = True
    shared_epsilon: bool = False
    num_pretrain_classes: int | None = None

    def __post_init__(self):
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        self.channels_per_stage = [int(c) for c in self.channels_per_stage]
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if len(self.blocks_per_stage) != self.stages or len(self.channels_per_stage) != self.stages:
            raise ValueError("blocks_per_stage and channels_per_stage need one entry per stage")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("every stage needs at least one block")
        ch = self.channels_per_stage
        if ch[0] < 1 or any(b < a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"channels must be positive and non-decreasing, got {ch}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")

    @classmethod
    def full_scale(cls, **overrides) -> "EmbeddingConfig":
        kw = dict(channels_per_stage=[64, 128, 256, 512], stem=True)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def level_sizes(self, image_size: int) -> list[int]:
        """Spatial side of every level for a square input."""
        s = image_size
        if self.stem:
            s = _down(_down(s, 7, 2, 3), 3, 2, 1)
        sizes = []
        for v in range(self.stages):
            if v > 0 or not self.stem:
                s = _down(s, 3, 2, 1)
            sizes.append(s)
        return sizes


def _down(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


@dataclass
class StochasticFeature:
    mean: torch.Tensor  # (b, c, h, w)
    std: torch.Tensor  # (b, 1, h, w), inside (0, 1)


@dataclass
class FeatureHierarchy:
    levels: list[torch.Tensor]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, v):
        return self.levels[v]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(x.shape) for x in self.levels]

    def select(self, index) -> "FeatureHierarchy":
        return FeatureHierarchy([x[index] for x in self.levels])


def sample_stochastic(sf: StochasticFeature, epsilon: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mean + epsilon * std``; the single-channel
    std and epsilon broadcast over all feature channels."""
    b, c, h, w = sf.mean.shape
    if tuple(sf.std.shape) != (b, 1, h, w):
        raise ValueError(f"std must be {(b, 1, h, w)}, got {tuple(sf.std.shape)}")
    if tuple(epsilon.shape) != (b, 1, h, w):
        raise ValueError(f"epsilon must be {(b, 1, h, w)}, got {tuple(epsilon.shape)}")
    return sf.mean + epsilon * sf.std


class EmbeddingStage(nn.Module):
    def __init__(self, cin, cout, blocks, stride, kind, se_reduction, noise):
        super().__init__()
        layers = [ConvBlock(cin, cout, stride, kind, se_reduction)]
        layers += [ConvBlock(cout, cout, 1, kind, se_reduction) for _ in range(blocks - 1)]
        self.blocks = nn.ModuleList(layers)
        # extra output channel of the last block: pre-activation of the shared std
        self.std_head = conv3x3_head(cout) if noise else None

    def forward(self, x) -> StochasticFeature | torch.Tensor:
        for block in self.blocks[:-1]:
            x = block(x)
        mean, hidden = self.blocks[-1].forward_with_hidden(x)
        if self.std_head is None:
            return mean
        std = torch.sigmoid(self.std_head(hidden)).clamp(STD_MARGIN, 1.0 - STD_MARGIN)
        return StochasticFeature(mean, std)


def conv3x3_head(cin):
    return nn.Conv2d(cin, 1, 3, padding=1)


class EmbeddingColumn(nn.Module):
    """Siamese feature extractor: the same instance embeds support and query."""

    def __init__(self, config: EmbeddingConfig):
        super().__init__()
        self.config = config
        cfg = config
        cin = 3
        if cfg.stem:
            c0 = cfg.channels_per_stage[0]
            self.stem = nn.Sequential(
                nn.Conv2d(3, c0, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(c0),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
            cin = c0
        else:
            self.stem = None
        stages = []
        for v in range(cfg.stages):
            stride = 1 if (v == 0 and cfg.stem) else 2
            cout = cfg.channels_per_stage[v]
            stages.append(
                EmbeddingStage(cin, cout, cfg.blocks_per_stage[v], stride,
                               cfg.block_kind, cfg.se_reduction, cfg.noise_enabled)
            )
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.classifier = (
            nn.Linear(cin, cfg.num_pretrain_classes) if cfg.num_pretrain_classes else None
        )
        init_weights(self)
        for stage in self.stages:
            if stage.std_head is not None:
                nn.init.constant_(stage.std_head.bias, STD_BIAS_INIT)

    def stochastic_features(self, images: torch.Tensor) -> list:
        """Per level: a StochasticFeature when noise is enabled, else a tensor."""
        self._check_input(images)
        x = self.stem(images) if self.stem is not None else images
        out = []
        for stage in self.stages:
            f = stage(x)
            out.append(f)
            x = f.mean if isinstance(f, StochasticFeature) else f
        return out

    def forward(self, images, mode="deterministic", generator=None) -> FeatureHierarchy:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "sample" and not self.config.noise_enabled:
            mode = "deterministic"
        self._check_input(images)
        x = self.stem(images) if self.stem is not None else images
        levels = []
        shared_eps = None
        for stage in self.stages:
            f = stage(x)
            if isinstance(f, StochasticFeature):
                if mode == "sample":
                    eps, shared_eps = self._epsilon(f, shared_eps, generator)
                    feat = sample_stochastic(f, eps)
                else:
                    feat = f.mean
            else:
                feat = f
            levels.append(feat)
            x = feat
        return FeatureHierarchy(levels)

    def _epsilon(self, f: StochasticFeature, shared, generator):
        b, _, h, w = f.std.shape
        if not self.config.shared_epsilon:
            eps = torch.randn((b, 1, h, w), generator=generator, dtype=f.std.dtype, device=f.std.device)
            return eps, None
        if shared is None:
            shared = torch.randn((b, 1, h, w), generator=generator, dtype=f.std.dtype, device=f.std.device)
            return shared, shared
        step = max(1, shared.shape[-1] // w)
        return shared[:, :, ::step, ::step][:, :, :h, :w].contiguous(), shared

    def classify_logits(self, final_level: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise ValueError("num_pretrain_classes is unset; no classifier head")
        return self.classifier(final_level.mean(dim=(2, 3)))

    def _check_input(self, images):
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValueError(f"expected a non-empty (b, 3, h, w) batch, got {tuple(images.shape)}")
        size = min(images.shape[-2:])
        cfg = self.config
        pre = _down(_down(size, 7, 2, 3), 3, 2, 1) if cfg.stem else size
        if pre < 2 ** (cfg.stages - 1 if cfg.stem else cfg.stages):
            raise ValueError(
                f"{size}x{size} input is too small for {self.config.stages} downsampling stages"
            )


def embed(model: EmbeddingColumn, images, mode="deterministic", rng=None) -> FeatureHierarchy:
    """Functional entry point; ``rng`` is a torch.Generator used only when sampling."""
    return model(images, mode=mode, generator=rng if mode == "sample" else None)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
