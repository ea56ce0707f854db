"""Full joint network: encoder, optional attention module, coupled decoders."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tns
from .autograd import Tensor, ops
from .blocks import (
    DecoderBranchParams,
    EncoderConfig,
    EncoderParams,
    decoder_head,
    decoder_stage,
    encoder_forward,
    named_parameters,
)
from .context import SumParams, sum_forward
from .losses import ConsistencyConfig
from .sharing import FsmParams, LsuParams, share

BLOCKS = ("fsm", "lsu", "none")
# rgb in [0, 1] is mapped to [-1, 1] before the stem
INPUT_SHIFT = 0.5
INPUT_SCALE = 2.0


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 6
    image_size: tuple = (64, 64)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_channels: tuple = (64, 48, 32)
    block: str = "fsm"
    use_sum: bool = True

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in self.decoder_channels))
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig.from_dict(self.encoder))
        if self.block not in BLOCKS:
            raise ValueError(f"block must be one of {BLOCKS}, got {self.block!r}")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} must be divisible by 8")
        if len(self.decoder_channels) != 3:
            raise ValueError("each decoder has exactly three upsampling blocks")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def attention_size(self):
        return self.image_size[0] // 8, self.image_size[1] // 8

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["image_size"] = list(self.image_size)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CINetParams:
    encoder: EncoderParams
    sum: SumParams | None
    depth: DecoderBranchParams
    seg: DecoderBranchParams
    sharing: list  # one block per decoder stage, empty for the baseline
    consistency: ConsistencyConfig
    config: ModelConfig = field(default=None, metadata={"static": True})

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        cf = config.encoder.out_channels
        encoder = EncoderParams.init(config.encoder, rng)
        sum_p = SumParams.init(cf, rng) if config.use_sum else None
        depth = DecoderBranchParams.init(cf, config.decoder_channels, 1, rng, kind="depth")
        seg = DecoderBranchParams.init(cf, config.decoder_channels, config.n_classes, rng, kind="seg")
        stage_in = (cf,) + config.decoder_channels[:-1]
        if config.block == "fsm":
            sharing = [FsmParams.init(c, c, rng) for c in stage_in]
        elif config.block == "lsu":
            sharing = [LsuParams.init(c, c, rng) for c in stage_in]
        else:
            sharing = []
        return cls(encoder, sum_p, depth, seg, sharing, ConsistencyConfig.init(), config)

    def named_parameters(self):
        return dict(named_parameters(self))

    def n_parameters(self):
        return int(sum(p.size for p in self.named_parameters().values()))


@dataclass
class NetOutput:
    depth: Tensor  # B x H x W
    logits: Tensor  # B x C x H x W
    attention: Tensor | None  # B x N x N predicted map
    fd: Tensor  # final depth-branch features
    fs: Tensor  # final segmentation-branch features
    stage_features: list  # (fd_t, fs_t) entering each sharing block


def forward(params, images, attention_override=None):
    """Run the network on a ``B x 3 x H x W`` batch.

    ``attention_override`` (``B x N x N``) replaces the learned attention in
    the aggregation step, as done while the attention module is bypassed.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    feat = encoder_forward(ops.scale(ops.sub(images, INPUT_SHIFT), INPUT_SCALE), params.encoder)
    attention = None
    if params.sum is not None:
        override = None if attention_override is None else Tensor(attention_override)
        feat, attention = sum_forward(feat, params.sum, attention=override)
    fd = fs = feat
    stage_features = []
    for t in range(len(params.depth.ups)):
        if params.sharing:
            stage_features.append((fd, fs))
            fd, fs = share(fd, fs, params.sharing[t])
        fd = decoder_stage(fd, params.depth, t)
        fs = decoder_stage(fs, params.seg, t)
    depth = decoder_head(fd, params.depth)
    depth = depth.reshape(*depth.shape[:-3], *depth.shape[-2:])
    logits = decoder_head(fs, params.seg)
    return NetOutput(depth, logits, attention, fd, fs, stage_features)


def predict_arrays(params, images, batch_size=8):
    """Depth maps and label maps as numpy arrays, without recording gradients."""
    images = np.asarray(images, dtype=np.float64)
    depths, labels = [], []
    for start in range(0, len(images), batch_size):
        out = forward(params, images[start:start + batch_size])
        depths.append(out.depth.data)
        labels.append(out.logits.data.argmax(axis=-3))
    return np.concatenate(depths), np.concatenate(labels)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(params, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, p in params.named_parameters().items():
        fname = name.replace(".", "_") + ".tns"
        files[name] = {"file": fname, "sha256": tns.save(directory / fname, p.data)}
    manifest = {"schema": 1, "model": params.config.to_dict(), "parameters": files}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class CheckpointError(ValueError):
    pass


def load_checkpoint(directory):
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    config = ModelConfig.from_dict(manifest["model"])
    params = CINetParams.init(config)
    named = params.named_parameters()
    if set(named) != set(manifest["parameters"]):
        raise CheckpointError("checkpoint parameter names do not match the model configuration")
    for name, p in named.items():
        ref = manifest["parameters"][name]
        try:
            arr = tns.load(directory / ref["file"], sha256=ref["sha256"])
        except (OSError, tns.TnsFormatError) as exc:
            raise CheckpointError(str(exc)) from exc
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
        p.data = arr
    return params, manifest
