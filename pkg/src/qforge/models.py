"""Q-network architectures mapping stacked frames to per-action values.

Four variants: a convolutional network (dcqn), a patch-embedding
transformer (dtqn_vit), a per-frame linear-projection transformer with
attention pooling (dtqn_proj), and a convolutional-front transformer
(conv_transformer). All share the layers module and the tensor core, so
gradients and checkpoints work uniformly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import (
    AttentionPooling,
    BatchNorm2d,
    Conv2d,
    GatedEncoder,
    GatedTXLLayer,
    Linear,
    PositionalEmbedding,
)
from .tensor import Tensor

VARIANTS = ("dcqn", "dtqn_vit", "dtqn_proj", "conv_transformer")

# classic DQN-lineage convolution stack: (out_channels, kernel, stride)
DEFAULT_CONV = ((32, 8, 4), (64, 4, 2), (64, 3, 1))


@dataclass
class ModelConfig:
    variant: str
    frames: int = 4
    actions: int = 4
    input_hw: tuple = (84, 84)
    conv: tuple = DEFAULT_CONV
    fc: tuple = (512, 256)
    patch: int = 16
    embed: int = 128
    depth: int = 2
    heads: int = 4
    ff_dim: int | None = None  # defaults to 4*embed
    dropout: float = 0.0
    gate_mode: str = "literal"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.actions < 2:
            raise ConfigError(f"need at least 2 actions, got {self.actions}")
        if self.frames < 1:
            raise ConfigError(f"need at least 1 stacked frame, got {self.frames}")
        self.input_hw = tuple(self.input_hw)
        self.conv = tuple(tuple(c) for c in self.conv)
        self.fc = tuple(self.fc)
        if self.ff_dim is None:
            self.ff_dim = 4 * self.embed
        if self.embed % self.heads != 0:
            raise ConfigError(f"embed {self.embed} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def conv_output_hw(hw: tuple, conv: tuple) -> tuple:
    h, w = hw
    for _, k, s in conv:
        if k > h or k > w:
            raise ConfigError(f"conv kernel {k} exceeds spatial extent {h}x{w}")
        h = (h - k) // s + 1
        w = (w - k) // s + 1
    return h, w


class _Model:
    """Shared parameter-walking and input plumbing."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self._groups: list = []  # (name, layer-with-parameters)

    def _register(self, name, layer):
        self._groups.append((name, layer))
        return layer

    def parameters(self):
        return [
            (f"{g}.{n}", p) for g, layer in self._groups for n, p in layer.parameters()
        ]

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def q_values(self, states, training: bool = False, rng=None) -> Tensor:
        """Q-values from a [B,F,H,W] stack, reshaped per variant contract."""
        x = states if isinstance(states, Tensor) else Tensor(states)
        if x.ndim != 4:
            raise ShapeError(f"expected [B,F,H,W] stack, got {x.shape}")
        return self.forward(self._prepare(x), training=training, rng=rng)

    def _prepare(self, x: Tensor) -> Tensor:
        return x


class DCQN(_Model):
    """Three conv stages (conv -> ReLU -> BatchNorm), then a linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        h, w = cfg.input_hw
        in_ch = cfg.frames
        self.convs, self.bns = [], []
        for i, (out_ch, k, s) in enumerate(cfg.conv):
            self.convs.append(self._register(f"conv{i}", Conv2d(in_ch, out_ch, k, s, rng)))
            self.bns.append(self._register(f"bn{i}", BatchNorm2d(out_ch)))
            in_ch = out_ch
        hp, wp = conv_output_hw(cfg.input_hw, cfg.conv)
        self.flat_dim = in_ch * hp * wp
        widths = [self.flat_dim, *cfg.fc]
        self.hidden = [
            self._register(f"fc{i}", Linear(widths[i], widths[i + 1], rng))
            for i in range(len(cfg.fc))
        ]
        self.out = self._register("out", Linear(widths[-1], cfg.actions, rng))

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        B, F, H, W = x.shape
        if (F, H, W) != (self.cfg.frames, *self.cfg.input_hw):
            raise ShapeError(
                f"dcqn expects [B,{self.cfg.frames},{self.cfg.input_hw[0]},"
                f"{self.cfg.input_hw[1]}], got {x.shape}"
            )
        for conv, bn in zip(self.convs, self.bns):
            x = bn(conv(x).relu(), training=training)
        x = x.reshape(B, self.flat_dim)
        for fc in self.hidden:
            x = fc(x).relu()
        return self.out(x)


class DTQNViT(_Model):
    """Patch embedding + positional table + gated encoder + linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        h, w = cfg.input_hw
        p = cfg.patch
        if p > h or p > w:
            raise ConfigError(f"patch {p} exceeds frame {h}x{w}")
        self.patches_per_frame = (h // p) * (w // p)
        self.seq_len = cfg.frames * self.patches_per_frame
        self.proj = self._register("proj", Linear(p * p, cfg.embed, rng))
        self.pos = self._register(
            "pos", PositionalEmbedding(self.seq_len, cfg.embed, rng)
        )
        self.encoder = self._register(
            "enc",
            GatedEncoder(
                [
                    GatedTXLLayer(
                        cfg.embed, cfg.heads, cfg.ff_dim, rng, cfg.dropout, cfg.gate_mode
                    )
                    for _ in range(cfg.depth)
                ]
            ),
        )
        self.flat_dim = self.seq_len * cfg.embed
        widths = [self.flat_dim, *cfg.fc]
        self.hidden = [
            self._register(f"fc{i}", Linear(widths[i], widths[i + 1], rng))
            for i in range(len(cfg.fc))
        ]
        self.out = self._register("out", Linear(widths[-1], cfg.actions, rng))

    def _prepare(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        return x.reshape(B, x.shape[1] * x.shape[2] * x.shape[3])

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h, w = self.cfg.input_hw
        expect = self.cfg.frames * h * w
        if x.ndim != 2 or x.shape[1] != expect:
            raise ShapeError(f"dtqn_vit expects [B,{expect}], got {x.shape}")
        B = x.shape[0]
        frames = x.reshape(B, self.cfg.frames, h, w)
        patches = T.unfold_patches(frames, self.cfg.patch)  # [B, F*N, p*p]
        tokens = self.pos(self.proj(patches))
        enc = self.encoder(tokens, training, rng)
        x = enc.reshape(B, self.flat_dim)
        for fc in self.hidden:
            x = fc(x).relu()
        return self.out(x)


class DTQNProj(_Model):
    """Per-frame linear projection, gated encoder, attention pooling."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        h, w = cfg.input_hw
        self.frame_dim = h * w
        self.proj = self._register("proj", Linear(self.frame_dim, cfg.embed, rng))
        self.pos = self._register(
            "pos", PositionalEmbedding(cfg.frames, cfg.embed, rng)
        )
        self.encoder = self._register(
            "enc",
            GatedEncoder(
                [
                    GatedTXLLayer(
                        cfg.embed, cfg.heads, cfg.ff_dim, rng, cfg.dropout, cfg.gate_mode
                    )
                    for _ in range(cfg.depth)
                ]
            ),
        )
        self.pool = self._register("pool", AttentionPooling(cfg.embed, rng))
        self.out = self._register("out", Linear(cfg.embed, cfg.actions, rng))

    def _prepare(self, x: Tensor) -> Tensor:
        B, F = x.shape[0], x.shape[1]
        return x.reshape(B, F, x.shape[2] * x.shape[3])

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.cfg.frames or x.shape[2] != self.frame_dim:
            raise ShapeError(
                f"dtqn_proj expects [B,{self.cfg.frames},{self.frame_dim}], got {x.shape}"
            )
        tokens = self.pos(self.proj(x))  # one token per stacked frame
        enc = self.encoder(tokens, training, rng)
        context = self.pool(enc)
        return self.out(context)


class ConvTransformer(_Model):
    """Conv feature extraction, spatial tokens, gated encoder, linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        in_ch = cfg.frames
        self.convs = []
        for i, (out_ch, k, s) in enumerate(cfg.conv):
            self.convs.append(self._register(f"conv{i}", Conv2d(in_ch, out_ch, k, s, rng)))
            in_ch = out_ch
        self.feat_dim = in_ch
        hp, wp = conv_output_hw(cfg.input_hw, cfg.conv)
        self.tokens = hp * wp
        self.proj = self._register("proj", Linear(self.feat_dim, cfg.embed, rng))
        self.pos = self._register("pos", PositionalEmbedding(self.tokens, cfg.embed, rng))
        self.encoder = self._register(
            "enc",
            GatedEncoder(
                [
                    GatedTXLLayer(
                        cfg.embed, cfg.heads, cfg.ff_dim, rng, cfg.dropout, cfg.gate_mode
                    )
                    for _ in range(cfg.depth)
                ]
            ),
        )
        self.flat_dim = self.tokens * cfg.embed
        self.out = self._register("out", Linear(self.flat_dim, cfg.actions, rng))

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        B, F, H, W = x.shape
        if (F, H, W) != (self.cfg.frames, *self.cfg.input_hw):
            raise ShapeError(
                f"conv_transformer expects [B,{self.cfg.frames},"
                f"{self.cfg.input_hw[0]},{self.cfg.input_hw[1]}], got {x.shape}"
            )
        for conv in self.convs:
            x = conv(x).relu()
        # [B, C, H', W'] -> one token per spatial position, dim C
        tokens = x.reshape(B, self.feat_dim, self.tokens).transpose(0, 2, 1)
        tokens = self.pos(self.proj(tokens))
        enc = self.encoder(tokens, training, rng)
        return self.out(enc.reshape(B, self.flat_dim))


_CLASSES = {
    "dcqn": DCQN,
    "dtqn_vit": DTQNViT,
    "dtqn_proj": DTQNProj,
    "conv_transformer": ConvTransformer,
}


def build_model(cfg: ModelConfig, rng: np.random.Generator):
    return _CLASSES[cfg.variant](cfg, rng)


# -- checkpoint format -----------------------------------------------------------
#
# Single file, little-endian throughout:
#   bytes 0..3   magic b"QFCK"
#   bytes 4..7   format version, uint32
#   bytes 8..15  manifest byte length, uint64
#   manifest     UTF-8 JSON: {"config": <ModelConfig dict>,
#                             "params": [{"name": str, "shape": [int,...]}, ...]}
#   arrays       raw float64 values, concatenated in manifest order
#
# Batch-norm running statistics are appended to the parameter list under
# "<layer>.running_mean" / "<layer>.running_var" so eval-mode forwards
# survive a save/load round trip.

CHECKPOINT_MAGIC = b"QFCK"
CHECKPOINT_VERSION = 1


def _buffers(model):
    out = []
    for gname, layer in model._groups:
        if isinstance(layer, BatchNorm2d):
            out.append((f"{gname}.running_mean", layer, "running_mean"))
            out.append((f"{gname}.running_var", layer, "running_var"))
    return out


def save_checkpoint(model, path):
    params = model.parameters()
    arrays = [(n, p.data) for n, p in params]
    arrays += [(n, getattr(layer, attr)) for n, layer, attr in _buffers(model)]
    manifest = {
        "config": model.cfg.to_dict(),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        try:
            manifest = json.loads(fh.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint manifest in {path}") from exc
        cfg = ModelConfig.from_dict(manifest["config"])
        model = build_model(cfg, np.random.default_rng(0))
        params = model.parameters()
        setters = [(n, lambda v, p=p: setattr(p, "data", v)) for n, p in params]
        setters += [
            (n, lambda v, layer=layer, attr=attr: setattr(layer, attr, v))
            for n, layer, attr in _buffers(model)
        ]
        expect = {n: p.shape for n, p in params}
        expect.update(
            {n: getattr(layer, attr).shape for n, layer, attr in _buffers(model)}
        )
        if [n for n, _ in setters] != [e["name"] for e in manifest["params"]]:
            raise CheckpointError("checkpoint parameter names do not match architecture")
        for (name, setter), entry in zip(setters, manifest["params"]):
            shape = tuple(entry["shape"])
            if expect[name] != shape:
                raise CheckpointError(
                    f"parameter {name} shape {shape} does not match model {expect[name]}"
                )
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"checkpoint truncated while reading {name}")
            setter(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    return model


def copy_parameters(src_model, dst_model):
    """Make dst parameters bit-identical to src (target-network sync)."""
    src = src_model.parameters()
    dst = dst_model.parameters()
    for (sn, sp), (dn, dp) in zip(src, dst):
        if sn != dn or sp.shape != dp.shape:
            raise ShapeError(f"parameter mismatch {sn}/{dn}")
        dp.data = sp.data.copy()
    # batch-norm running stats travel with the parameters
    for (sg, slayer), (dg, dlayer) in zip(src_model._groups, dst_model._groups):
        if isinstance(slayer, BatchNorm2d):
            dlayer.running_mean = slayer.running_mean.copy()
            dlayer.running_var = slayer.running_var.copy()
