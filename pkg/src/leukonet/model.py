"""SE-ResNeXt classifier built on the tape primitives.

The network is a stem followed by four stages of bottleneck blocks. Each
block sums ``cardinality`` parallel low-dimensional transforms (realized as
one grouped 3x3 convolution), rescales the result channel-wise with a
squeeze-and-excitation gate, and adds it to the shortcut.

Parameters carry one of six learning-rate group tags: ``stage1`` (the stem),
``stage2`` .. ``stage5`` (the four block stages) and ``fc`` (the head).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, MutableMapping, Optional, Tuple

import numpy as np

from . import functional as F
from .conv import output_size
from .tensor import ConfigurationError, DimensionError, Tensor

LR_GROUPS = ("stage1", "stage2", "stage3", "stage4", "stage5", "fc")


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    cardinality: int
    stride: int = 1
    se_reduction: int = 16

    def validate(self) -> None:
        if self.cardinality < 1 or self.bottleneck_channels % self.cardinality:
            raise ConfigurationError(
                f"bottleneck_channels={self.bottleneck_channels} not divisible by cardinality={self.cardinality}"
            )
        if not 1 <= self.se_reduction <= self.out_channels:
            raise ConfigurationError(
                f"se_reduction={self.se_reduction} must lie in [1, out_channels={self.out_channels}]"
            )
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")

    @property
    def se_hidden(self) -> int:
        return max(1, self.out_channels // self.se_reduction)

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class StemConfig:
    channels: int = 64
    kernel: int = 7
    stride: int = 2
    pool_kernel: int = 3
    pool_stride: int = 2

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class ModelConfig:
    stage_block_counts: Tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: Tuple[int, ...] = (256, 512, 1024, 2048)
    cardinality: int = 32
    se_reduction: int = 16
    input_channels: int = 3
    use_batch_norm: bool = True
    stem: StemConfig = field(default_factory=StemConfig)
    bottleneck_ratio: float = 0.5

    @classmethod
    def resnext50(cls) -> "ModelConfig":
        """SE-ResNeXt50 (32x4d) layout."""
        return cls()

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset sized for 64x64 inputs."""
        base = cls(
            stage_block_counts=(1, 1, 1, 1),
            stage_channels=(8, 16, 32, 64),
            cardinality=2,
            se_reduction=4,
            stem=StemConfig(channels=8, kernel=3, stride=1, pool_kernel=2, pool_stride=2),
        )
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_block_counts"] = list(self.stage_block_counts)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["stem"] = StemConfig(**d["stem"])
        d["stage_block_counts"] = tuple(d["stage_block_counts"])
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)

    def block_configs(self) -> List[List[BlockConfig]]:
        if len(self.stage_block_counts) != 4 or len(self.stage_channels) != 4:
            raise ConfigurationError("expected 4 block stages (plus the stem) in stage_block_counts/stage_channels")
        stages = []
        in_ch = self.stem.channels
        for idx, (count, out_ch) in enumerate(zip(self.stage_block_counts, self.stage_channels)):
            if count < 1:
                raise ConfigurationError(f"stage {idx + 2} needs at least one block")
            width = int(round(out_ch * self.bottleneck_ratio))
            blocks = []
            for b in range(count):
                cfg = BlockConfig(
                    in_channels=in_ch,
                    bottleneck_channels=width,
                    out_channels=out_ch,
                    cardinality=self.cardinality,
                    stride=2 if (idx > 0 and b == 0) else 1,
                    se_reduction=self.se_reduction,
                )
                cfg.validate()
                blocks.append(cfg)
                in_ch = out_ch
            stages.append(blocks)
        return stages

    def feature_sizes(self, size: int) -> List[int]:
        """Spatial side after the stem and after each block stage."""
        s = self.stem
        side = output_size(size, s.kernel, s.stride, s.padding)
        side = (side - s.pool_kernel) // s.pool_stride + 1 if side >= s.pool_kernel else 0
        sizes = [side]
        for idx in range(4):
            if idx > 0:
                side = output_size(side, 3, 2, 1) if side > 0 else 0
            sizes.append(side)
        return sizes


# --------------------------------------------------------------------------
# functional building blocks


def _conv_weight(rng: np.random.Generator, cout: int, cin_g: int, k: int) -> np.ndarray:
    fan_in = cin_g * k * k
    return rng.standard_normal((cout, cin_g, k, k)) * np.sqrt(2.0 / fan_in)


def _linear_weight(rng: np.random.Generator, out: int, inp: int) -> np.ndarray:
    return rng.standard_normal((out, inp)) * np.sqrt(2.0 / inp)


def _norm(x: Tensor, params: Mapping[str, Tensor], buffers: Mapping[str, np.ndarray], name: str, training: bool):
    if f"{name}.gamma" not in params:
        return x
    return F.batch_norm2d(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        buffers[f"{name}.running_mean"],
        buffers[f"{name}.running_var"],
        training,
    )


def _conv(x, params, name, **kw):
    return F.conv2d(x, params[f"{name}.weight"], params.get(f"{name}.bias"), **kw)


def se_module(u: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Channel gate ``u * sigmoid(W2 relu(W1 gap(u)))``.

    ``params`` holds ``fc1.weight``/``fc2.weight`` and optionally the
    matching biases.
    """
    w1, w2 = params["fc1.weight"], params["fc2.weight"]
    c = u.shape[1]
    if w1.shape[1] != c or w2.shape[0] != c:
        raise DimensionError(f"SE weights {w1.shape}/{w2.shape} do not match {c} channels")
    if w1.shape[0] > c:
        raise ConfigurationError(f"SE hidden width {w1.shape[0]} exceeds channel count {c}")
    z = F.global_avg_pool(u)
    z = F.relu(F.linear(z, w1, params.get("fc1.bias")))
    s = F.sigmoid(F.linear(z, w2, params.get("fc2.bias")))
    return F.scale_channels(u, s)


def residual_branch(
    x: Tensor,
    cfg: BlockConfig,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    training: bool,
) -> Tensor:
    """Aggregated transform: 1x1 reduce, grouped 3x3, 1x1 expand."""
    h = F.relu(_norm(_conv(x, params, "conv1"), params, buffers, "bn1", training))
    h = _conv(h, params, "conv2", stride=cfg.stride, padding=1, groups=cfg.cardinality)
    h = F.relu(_norm(h, params, buffers, "bn2", training))
    return _norm(_conv(h, params, "conv3"), params, buffers, "bn3", training)


def shortcut(x: Tensor, cfg: BlockConfig, params, buffers, training: bool) -> Tensor:
    if not cfg.has_projection:
        return x
    return _norm(_conv(x, params, "proj", stride=cfg.stride), params, buffers, "proj_bn", training)


def se_resnext_block(
    x: Tensor,
    cfg: BlockConfig,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    training: bool = False,
) -> Tensor:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ConfigurationError(f"block expects {cfg.in_channels} input channels, got input shape {x.shape}")
    branch = residual_branch(x, cfg, params, buffers, training)
    gated = se_module(branch, _sub(params, "se."))
    return F.relu(F.add(shortcut(x, cfg, params, buffers, training), gated))


def _sub(d: Mapping, prefix: str) -> Dict:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def init_block(cfg: BlockConfig, rng: np.random.Generator, use_batch_norm: bool = True):
    """Fresh parameter and buffer dicts for one block (local names)."""
    cfg.validate()
    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    w = cfg.bottleneck_channels

    def conv(name, cout, cin_g, k, norm):
        params[f"{name}.weight"] = _conv_weight(rng, cout, cin_g, k)
        if use_batch_norm:
            params[f"{norm}.gamma"] = np.ones(cout)
            params[f"{norm}.beta"] = np.zeros(cout)
            buffers[f"{norm}.running_mean"] = np.zeros(cout)
            buffers[f"{norm}.running_var"] = np.ones(cout)
        else:
            params[f"{name}.bias"] = np.zeros(cout)

    conv("conv1", w, cfg.in_channels, 1, "bn1")
    conv("conv2", w, w // cfg.cardinality, 3, "bn2")
    conv("conv3", cfg.out_channels, w, 1, "bn3")
    hidden = cfg.se_hidden
    params["se.fc1.weight"] = _linear_weight(rng, hidden, cfg.out_channels)
    params["se.fc1.bias"] = np.zeros(hidden)
    params["se.fc2.weight"] = _linear_weight(rng, cfg.out_channels, hidden)
    params["se.fc2.bias"] = np.zeros(cfg.out_channels)
    if cfg.has_projection:
        conv("proj", cfg.out_channels, cfg.in_channels, 1, "proj_bn")
    return params, buffers


# --------------------------------------------------------------------------
# model container


class SEResNeXt:
    """Parameter container plus forward pass for the full classifier."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray], seed: int):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.seed = seed
        self.blocks = config.block_configs()
        self.init_scheme = "he_fan_in_normal"

    # parameter access -----------------------------------------------------
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @staticmethod
    def group_of(name: str) -> str:
        head = name.split(".", 1)[0]
        if head == "stem":
            return "stage1"
        if head in LR_GROUPS:
            return head
        raise ConfigurationError(f"parameter {name!r} has no learning-rate group")

    def param_groups(self) -> Dict[str, List[str]]:
        groups: Dict[str, List[str]] = {g: [] for g in LR_GROUPS}
        for name in self.params:
            groups[self.group_of(name)].append(name)
        return groups

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    # state ---------------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"param:{k}": v.data.copy() for k, v in self.params.items()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for key, arr in state.items():
            kind, name = key.split(":", 1)
            target = self.params[name].data if kind == "param" else self.buffers[name]
            if target.shape != arr.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != model shape {target.shape}")
            target[...] = arr

    # forward -------------------------------------------------------------
    def __call__(self, x, training: bool = False) -> Tensor:
        return self.forward(x, training)

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise DimensionError(f"expected input [N,{cfg.input_channels},S,S], got {x.shape}")
        if min(cfg.feature_sizes(min(x.shape[2:]))) < 1:
            raise DimensionError(f"input side {min(x.shape[2:])} too small for five downsampling stages")
        p, b = self.params, self.buffers
        s = cfg.stem
        h = F.conv2d(x, p["stem.conv.weight"], p.get("stem.conv.bias"), stride=s.stride, padding=s.padding)
        h = F.relu(_norm(h, _sub(p, "stem."), _sub(b, "stem."), "bn", training))
        h = F.max_pool2d(h, s.pool_kernel, s.pool_stride)
        for si, stage in enumerate(self.blocks):
            for bi, bcfg in enumerate(stage):
                prefix = f"stage{si + 2}.block{bi}."
                h = se_resnext_block(h, bcfg, _sub(p, prefix), _sub(b, prefix), training)
        z = F.global_avg_pool(h)
        return F.linear(z, p["fc.weight"], p["fc.bias"])


def build_model(cfg: ModelConfig, rng_seed: int) -> SEResNeXt:
    """Instantiate ``cfg`` with He fan-in initialization drawn from ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    stages = cfg.block_configs()
    raw: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}

    s = cfg.stem
    raw["stem.conv.weight"] = _conv_weight(rng, s.channels, cfg.input_channels, s.kernel)
    if cfg.use_batch_norm:
        raw["stem.bn.gamma"] = np.ones(s.channels)
        raw["stem.bn.beta"] = np.zeros(s.channels)
        buffers["stem.bn.running_mean"] = np.zeros(s.channels)
        buffers["stem.bn.running_var"] = np.ones(s.channels)
    else:
        raw["stem.conv.bias"] = np.zeros(s.channels)

    for si, stage in enumerate(stages):
        for bi, bcfg in enumerate(stage):
            prefix = f"stage{si + 2}.block{bi}."
            bp, bb = init_block(bcfg, rng, cfg.use_batch_norm)
            raw.update({prefix + k: v for k, v in bp.items()})
            buffers.update({prefix + k: v for k, v in bb.items()})

    raw["fc.weight"] = _linear_weight(rng, 1, cfg.stage_channels[-1])
    raw["fc.bias"] = np.zeros(1)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    return SEResNeXt(cfg, params, buffers, rng_seed)


def forward(model: SEResNeXt, batch, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(batch, training=mode == "train")
