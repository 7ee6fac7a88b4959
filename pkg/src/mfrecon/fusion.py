"""Multi-frame transformer fusion and the prediction heads.

Per query point, the encoder self-attends across the N reference-frame
features (no positional encoding, so frames are exchangeable); the decoder
cross-attends from a query embedding built from the target-frame image
feature concatenated with the geometry feature. It emits a fused embedding
``e_o`` plus the per-frame attended value block ``e_s`` kept before pooling,
which the shift head consumes to diagnose warp error.

Heads: occupancy (sigmoid MLP on e_o ++ geometry feature), noise shift (MLP
applied iteratively, each step conditioned on the running estimate), and
color (sigmoid RGB for the texture path). Head output layers start at zero
so untrained predictions are the neutral constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class MftConfig:
    preset: str = "desk"
    image_channels: int = 32
    geom_channels: int = 16
    model_dim: int = 32
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    frames: int = 4
    ief_steps: int = 3
    ff_mult: int = 2
    occupancy_hidden: tuple = (128, 64, 32, 16)
    shift_hidden: tuple = (64, 32, 16)
    color_hidden: tuple = (128, 64, 32, 16)
    encoder_width: int = 32
    geom_encoder_width: int = 16
    geom_resolution: int = 16
    image_size: int = 64
    fusion: str = "mft"              # "mft" | "avgpool"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model dim must divide by head count")
        if self.ief_steps < 1:
            raise ValueError("need at least one shift refinement step")
        self.occupancy_hidden = tuple(self.occupancy_hidden)
        self.shift_hidden = tuple(self.shift_hidden)
        self.color_hidden = tuple(self.color_hidden)

    @property
    def texture_dim(self) -> int:
        return 2 * self.model_dim

    @staticmethod
    def desk() -> "MftConfig":
        return MftConfig()

    @staticmethod
    def full() -> "MftConfig":
        return MftConfig(
            preset="full", image_channels=256, geom_channels=352, model_dim=256,
            heads=8, occupancy_hidden=(1024, 512, 256, 128), shift_hidden=(512, 256, 128),
            color_hidden=(1024, 512, 256, 128), encoder_width=256, geom_encoder_width=64,
            geom_resolution=32, image_size=512)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("occupancy_hidden", "shift_hidden", "color_hidden"):
            d[key] = list(d[key])
        return d

    @staticmethod
    def from_dict(d: dict) -> "MftConfig":
        return MftConfig(**d)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = nn.Linear(dim, dim * mult, rng)
        self.lin2 = nn.Linear(dim * mult, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))


class MftEncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mult: int, rng: np.random.Generator):
        super().__init__()
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult, rng)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ff(x))


class MftEncoder(nn.Module):
    """Per-point self-attention across the N frame features (Q, K, V from
    shared linear maps); input rows are image features plus the 1-channel
    visibility mask."""

    def __init__(self, in_channels: int, cfg: MftConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = nn.Linear(in_channels, cfg.model_dim, rng)
        self.layers = [MftEncoderLayer(cfg.model_dim, cfg.heads, cfg.ff_mult, rng)
                       for _ in range(cfg.encoder_layers)]

    def forward(self, frame_feats: Tensor) -> Tensor:
        if frame_feats.ndim != 3:
            raise ValueError("encoder expects (B, N, C)")
        x = self.embed(frame_feats)
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def last_attention(self) -> np.ndarray | None:
        return self.layers[-1].attn.last_weights if self.layers else None


class AvgPoolEncoder(nn.Module):
    """Average-pooling fusion baseline at a matched parameter budget: the
    same per-frame embedding and feed-forward stack, with the attention
    replaced by per-frame linear mixing."""

    def __init__(self, in_channels: int, cfg: MftConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = nn.Linear(in_channels, cfg.model_dim, rng)
        d = cfg.model_dim
        self.mix = [nn.Linear(d, d, rng) for _ in range(4 * cfg.encoder_layers)]
        self.norm1 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult, rng)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, frame_feats: Tensor) -> Tensor:
        x = self.embed(frame_feats)
        y = x
        for lin in self.mix:
            y = lin(y)
        x = self.norm1(x + y)
        return self.norm2(x + self.ff(x))


class MftDecoder(nn.Module):
    """Cross-attention from the target-frame query onto the encoded frames.

    The query embedding concatenates the target image feature with the
    geometry feature. Returns the fused embedding e_o and the per-frame
    attended value block e_s (head-weighted values before summation over
    frames and before the output projection)."""

    def __init__(self, query_channels: int, cfg: MftConfig, rng: np.random.Generator,
                 dim: int | None = None):
        super().__init__()
        d = dim or cfg.model_dim
        self.dim = d
        self.heads = cfg.heads
        self.embed_q = nn.Linear(query_channels, d, rng)
        self.proj_q = nn.Linear(d, d, rng)
        self.proj_k = nn.Linear(d, d, rng)
        self.proj_v = nn.Linear(d, d, rng)
        self.proj_out = nn.Linear(d, d, rng)
        self.norm1 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult, rng)
        self.norm2 = nn.LayerNorm(d)
        self.last_weights: np.ndarray | None = None
        self.last_attn_out: np.ndarray | None = None

    def forward(self, phi: Tensor, query_feat: Tensor) -> tuple[Tensor, Tensor]:
        B, N, d = phi.shape
        if d != self.dim:
            raise ValueError(f"encoded frame dim {d} != decoder dim {self.dim}")
        H = self.heads
        hd = d // H
        phi_q = self.embed_q(query_feat)                    # (B, d)

        q = ad.reshape(self.proj_q(phi_q), (B, H, 1, hd))
        k = ad.transpose(ad.reshape(self.proj_k(phi), (B, N, H, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(self.proj_v(phi), (B, N, H, hd)), (0, 2, 1, 3))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        weights = ad.softmax(scores, axis=-1)               # (B, H, 1, N)
        self.last_weights = weights.data

        # per-frame weighted values, kept per frame for the shift head
        weighted = v * ad.transpose(weights, (0, 1, 3, 2))  # (B, H, N, hd)
        e_s = ad.reshape(ad.transpose(weighted, (0, 2, 1, 3)), (B, N, d))

        attended = ad.reshape(ad.sum_(weighted, axis=2), (B, d))
        self.last_attn_out = attended.data
        e_o = self.norm1(phi_q + self.proj_out(attended))
        e_o = self.norm2(e_o + self.ff(e_o))
        return e_o, e_s


class AvgPoolDecoder(nn.Module):
    """Average-pooling stand-in for the cross-attention decoder: frames are
    mean-pooled and mixed with the query through the same projection stack."""

    def __init__(self, query_channels: int, cfg: MftConfig, rng: np.random.Generator,
                 dim: int | None = None):
        super().__init__()
        d = dim or cfg.model_dim
        self.dim = d
        self.embed_q = nn.Linear(query_channels, d, rng)
        self.proj_q = nn.Linear(d, d, rng)
        self.proj_k = nn.Linear(d, d, rng)
        self.proj_v = nn.Linear(d, d, rng)
        self.proj_out = nn.Linear(d, d, rng)
        self.norm1 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult, rng)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, phi: Tensor, query_feat: Tensor) -> tuple[Tensor, Tensor]:
        B, N, d = phi.shape
        phi_q = self.embed_q(query_feat)
        e_s = self.proj_v(phi) * (1.0 / N)
        pooled = ad.reshape(ad.sum_(e_s, axis=1), (B, d))
        mixed = self.proj_out(pooled + self.proj_q(phi_q) + ad.reshape(
            ad.sum_(self.proj_k(phi), axis=1), (B, d)) * (1.0 / N))
        e_o = self.norm1(phi_q + mixed)
        e_o = self.norm2(e_o + self.ff(e_o))
        return e_o, e_s


class OccupancyHead(nn.Module):
    """Sigmoid MLP on the fused embedding concatenated with the geometry
    feature; inside maps to 1, outside to 0."""

    def __init__(self, cfg: MftConfig, rng: np.random.Generator):
        super().__init__()
        self.in_width = cfg.model_dim + cfg.geom_channels
        sizes = [self.in_width, *cfg.occupancy_hidden, 1]
        self.mlp = nn.MLP(sizes, rng, activation="leaky_relu", zero_init_last=True)

    def forward(self, e_o: Tensor, geom_feat: Tensor) -> Tensor:
        cat = ad.concat([e_o, geom_feat], axis=1)
        if cat.shape[1] != self.in_width:
            raise ValueError(f"occupancy head expects width {self.in_width}, got {cat.shape[1]}")
        return ad.reshape(ad.sigmoid(self.mlp(cat)), (cat.shape[0],))


class ShiftHead(nn.Module):
    """Iterative noise-shift regressor.

    Each step appends the running estimate to the pooled multi-frame block
    and predicts a residual delta; the per-step cumulative estimates feed the
    refinement loss's outer sum."""

    def __init__(self, cfg: MftConfig, rng: np.random.Generator):
        super().__init__()
        self.steps = cfg.ief_steps
        sizes = [cfg.model_dim + 3, *cfg.shift_hidden, 3]
        self.mlp = nn.MLP(sizes, rng, activation="leaky_relu", zero_init_last=True)

    def forward(self, e_s: Tensor, steps: int | None = None) -> tuple[Tensor, list[Tensor]]:
        steps = self.steps if steps is None else steps
        if steps < 1:
            raise ValueError("need at least one refinement step")
        B = e_s.shape[0]
        pooled = ad.mean(e_s, axis=1)                       # (B, D)
        shift = Tensor(np.zeros((B, 3), dtype=np.float32))
        trace: list[Tensor] = []
        for _ in range(steps):
            delta = self.mlp(ad.concat([pooled, shift], axis=1))
            shift = shift + delta
            trace.append(shift)
        return shift, trace


class ColorHead(nn.Module):
    def __init__(self, cfg: MftConfig, rng: np.random.Generator):
        super().__init__()
        self.in_width = cfg.texture_dim + cfg.geom_channels
        sizes = [self.in_width, *cfg.color_hidden, 3]
        self.mlp = nn.MLP(sizes, rng, activation="leaky_relu", zero_init_last=True)

    def forward(self, e_o_tex: Tensor, geom_feat: Tensor) -> Tensor:
        cat = ad.concat([e_o_tex, geom_feat], axis=1)
        if cat.shape[1] != self.in_width:
            raise ValueError(f"color head expects width {self.in_width}, got {cat.shape[1]}")
        return ad.sigmoid(self.mlp(cat))


def make_encoder(in_channels: int, cfg: MftConfig, rng: np.random.Generator):
    cls = MftEncoder if cfg.fusion == "mft" else AvgPoolEncoder
    return cls(in_channels, cfg, rng)


def make_decoder(query_channels: int, cfg: MftConfig, rng: np.random.Generator,
                 dim: int | None = None):
    cls = MftDecoder if cfg.fusion == "mft" else AvgPoolDecoder
    return cls(query_channels, cfg, rng, dim=dim)
