"""Differentiable building blocks.

* :class:`ConvEncoder` - residual 1-D convolutional encoder over LFBE frames.
* :class:`Summarizer` - transformer with a learned query token that pools a
  hidden sequence into one unit-norm acoustic embedding.
* :class:`SpeechEncoder` / :class:`ReconstructionDecoder` - frame-rate
  transformers used by reconstructive pretraining.
* :class:`ArbitrationHead` - two-stage self-attention classifier over the
  hidden sequences of all devices in a scene.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .features import N_MELS

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    conv_layers: int = 6
    channels: int | tuple[int, ...] = 64
    kernel_size: int = 3
    total_stride: int = 8
    embedding_dim: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    n_heads: int = 4
    transformer_layers: int = 2
    ff_dim: int = 128

    def __post_init__(self):
        if self.conv_layers < 2 or self.conv_layers % 2:
            raise ValueError("conv_layers must be an even number >= 2")
        if self.total_stride < 1 or self.total_stride & (self.total_stride - 1):
            raise ValueError("total_stride must be a power of two")
        if int(math.log2(self.total_stride)) > self.num_blocks:
            raise ValueError("not enough residual blocks to realize total_stride")
        if isinstance(self.channels, list):
            self.channels = tuple(self.channels)
        if isinstance(self.channels, tuple) and len(self.channels) != self.num_blocks:
            raise ValueError("channels must give one width per residual block")
        if self.embedding_dim % self.n_heads:
            raise ValueError("embedding_dim must be divisible by n_heads")

    @property
    def num_blocks(self) -> int:
        return self.conv_layers // 2

    def block_channels(self) -> list[int]:
        if isinstance(self.channels, int):
            widths = [self.channels] * self.num_blocks
        else:
            widths = list(self.channels)
        widths[-1] = self.embedding_dim
        return widths

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["channels"], tuple):
            d["channels"] = list(d["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "EncoderConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def large(cls) -> "EncoderConfig":
        """18 convolutional layers; widths and transformer sizes are guesses."""
        return cls(conv_layers=18, channels=(64, 64, 64, 128, 128, 128, 256, 256, 256), embedding_dim=256, ff_dim=512)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


def _transformer(dim, heads, layers, ff_dim):
    layer = nn.TransformerEncoderLayer(dim, heads, ff_dim, dropout=0.0, batch_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class PopulationBatchNorm(nn.BatchNorm1d):
    """Batch norm that always normalizes with its running statistics.

    In training mode the running mean and variance are still updated from
    each batch, but the output of one item never depends on the other items
    of the batch. A batch here holds the recordings of one scenario, and
    batch statistics would let the objectives compare devices through the
    normalizer instead of through the learned representation.
    """

    def forward(self, x):
        mean, var = self.running_mean, self.running_var
        if self.training:
            mean, var = mean.clone(), var.clone()
            with torch.no_grad():
                dims = [0] + list(range(2, x.dim()))
                n = x.numel() // x.shape[1]
                batch_var = x.var(dim=dims, unbiased=False) * (n / max(n - 1, 1))
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * x.mean(dim=dims))
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * batch_var)
                self.num_batches_tracked += 1
        return F.batch_norm(x, mean, var, self.weight, self.bias, False, 0.0, self.eps)


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, stride, eps, momentum):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(c_in, c_out, kernel_size, stride, pad, bias=False)
        self.bn1 = PopulationBatchNorm(c_out, eps=eps, momentum=momentum)
        self.conv2 = nn.Conv1d(c_out, c_out, kernel_size, 1, pad, bias=False)
        self.bn2 = PopulationBatchNorm(c_out, eps=eps, momentum=momentum)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(
                nn.Conv1d(c_in, c_out, 1, stride, bias=False), PopulationBatchNorm(c_out, eps=eps, momentum=momentum)
            )

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class ConvEncoder(nn.Module):
    """``(B, frames, 64) -> (B, ceil(frames / total_stride), D)``."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        n_down = int(math.log2(config.total_stride))
        blocks, c_in = [], N_MELS
        for b, c_out in enumerate(config.block_channels()):
            stride = 2 if b < n_down else 1
            blocks.append(ResidualBlock(c_in, c_out, config.kernel_size, stride, config.bn_eps, config.bn_momentum))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)

    def output_length(self, frames: int) -> int:
        return -(-frames // self.config.total_stride)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-2] < self.config.total_stride:
            raise ValueError(f"need at least {self.config.total_stride} frames, got {feats.shape[-2]}")
        return self.blocks(feats.transpose(1, 2)).transpose(1, 2)


class QueryPool(nn.Module):
    """Transformer over ``[query; sequence]`` returning the query slot."""

    def __init__(self, dim, heads, layers, ff_dim, positional=True):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.body = _transformer(dim, heads, layers, ff_dim)
        self.positional = positional

    def forward(self, h):
        if h.shape[1] == 0:
            raise ValueError("cannot pool an empty sequence")
        if self.positional:
            h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype, h.device)
        x = torch.cat([self.query.expand(h.shape[0], -1, -1), h], dim=1)
        return self.body(x)[:, 0]


class Summarizer(nn.Module):
    """``(B, K, D) -> (B, D)`` unit-norm embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.embedding_dim
        self.pool = QueryPool(d, config.n_heads, config.transformer_layers, config.ff_dim)
        self.proj = nn.Linear(d, d)

    def forward(self, h):
        return F.normalize(self.proj(self.pool(h)), dim=-1, eps=1e-12)


class SpeechEncoder(nn.Module):
    """``(B, frames, 64) -> (B, frames, D)``."""

    def __init__(self, config: EncoderConfig, positional: bool = True):
        super().__init__()
        d = config.embedding_dim
        self.inp = nn.Linear(N_MELS, d)
        self.body = _transformer(d, config.n_heads, config.transformer_layers, config.ff_dim)
        self.positional = positional

    def forward(self, feats):
        if feats.shape[1] == 0:
            raise ValueError("empty feature sequence")
        x = self.inp(feats)
        if self.positional:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        return self.body(x)


class ReconstructionDecoder(nn.Module):
    """Per frame ``[speech; acoustic embedding; envelope] -> 64`` mel values."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.embedding_dim
        self.inp = nn.Linear(2 * d + 1, d)
        self.body = _transformer(d, config.n_heads, config.transformer_layers, config.ff_dim)
        self.out = nn.Linear(d, N_MELS)

    def forward(self, speech_seq, z, env):
        if speech_seq.shape[1] != env.shape[1]:
            raise ValueError(f"speech length {speech_seq.shape[1]} != envelope length {env.shape[1]}")
        frames = speech_seq.shape[1]
        x = torch.cat([speech_seq, z[:, None, :].expand(-1, frames, -1), env[..., None]], dim=-1)
        x = self.inp(x)
        x = x + sinusoidal_positions(frames, x.shape[2], x.dtype, x.device)
        return self.out(self.body(x))


class ArbitrationHead(nn.Module):
    """Hidden sequences of ``N`` devices ``(N, K, D)`` -> ``N`` logits.

    Stage one attends over all ``N * K`` vectors jointly; stage two pools each
    device's ``K`` outputs; a shared two-layer feedforward maps each pooled
    vector to a logit.
    """

    def __init__(self, config: EncoderConfig, positional: bool = True):
        super().__init__()
        d = config.embedding_dim
        self.positional = positional
        self.joint = _transformer(d, config.n_heads, config.transformer_layers, config.ff_dim)
        self.pool = QueryPool(d, config.n_heads, config.transformer_layers, config.ff_dim, positional=False)
        self.ff = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 1))

    def forward(self, hidden):
        n, k, d = hidden.shape
        if n == 0:
            raise ValueError("at least one device is required")
        seq = hidden.reshape(1, n * k, d)
        if self.positional:
            seq = seq + sinusoidal_positions(n * k, d, seq.dtype, seq.device)
        g = self.joint(seq).reshape(n, k, d)
        return self.ff(self.pool(g)).squeeze(-1)


class ArbitrationModel(nn.Module):
    """Encoder plus classifier; ``forward`` maps ``(N, frames, 64)`` to ``N`` logits."""

    def __init__(self, config: EncoderConfig, positional: bool = True):
        super().__init__()
        self.config = config
        self.encoder = ConvEncoder(config)
        self.head = ArbitrationHead(config, positional)

    def forward(self, feats):
        return self.head(self.encoder(feats))

    def predict_proba(self, feats):
        return torch.softmax(self.forward(feats), dim=-1)


class PretrainModel(nn.Module):
    """Acoustic encoder (conv encoder + summarizer) with the reconstruction branch."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = ConvEncoder(config)
        self.summarizer = Summarizer(config)
        self.speech_encoder = SpeechEncoder(config)
        self.decoder = ReconstructionDecoder(config)

    def embed(self, feats):
        return self.summarizer(self.encoder(feats))


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    config: dict
    state: dict[str, np.ndarray]
    validation_loss: float = float("nan")
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, kind, module: nn.Module, config: dict, **kwargs) -> "Checkpoint":
        state = {}
        for k, v in module.state_dict().items():
            arr = v.detach().cpu().numpy()
            state[k] = arr.astype(np.float32) if arr.dtype.kind == "f" else arr.copy()
        return cls(kind, config, state, **kwargs)

    def load_into(self, module: nn.Module, prefix: str = "", strict: bool = True) -> None:
        """Copy parameters (optionally only those under ``prefix``) into ``module``."""
        state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in self.state.items() if k.startswith(prefix)}
        module.load_state_dict(state, strict=strict)

    def save(self, path: str | Path) -> None:
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "validation_loss": self.validation_loss,
            "step": self.step,
            "extra": self.extra,
            "names": list(self.state),
        }
        arrays = {f"p{i}": v for i, v in enumerate(self.state.values())}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path) as data:
            meta = json.loads(data["__meta__"].tobytes().decode())
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
            state = {name: data[f"p{i}"] for i, name in enumerate(meta["names"])}
        return cls(meta["kind"], meta["config"], state, meta["validation_loss"], meta["step"], meta.get("extra", {}))
