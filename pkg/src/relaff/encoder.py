"""Video-clip encoder: frozen per-frame feature map, trainable FC + ReLU,
sinusoidal positions, a pre-LN transformer stack, residual add, temporal mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, ParameterStore, Value


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class EncoderConfig:
    T: int = 16
    H: int = 16
    W: int = 16
    D_f: int = 2048
    D: int = 2048
    transformer_layers: int = 2
    attention_heads: int = 4
    feedforward_width: int = 0  # 0 means 2 * D
    backbone_seed: int = 0
    patch_grid: int = 4
    frozen_width: int = 256
    frozen_gain: float = 1.0

    def __post_init__(self):
        self.validate()

    @property
    def ff_width(self) -> int:
        return self.feedforward_width or 2 * self.D

    def validate(self) -> None:
        for name in ("T", "H", "W", "D_f", "D", "attention_heads", "patch_grid", "frozen_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name}", "must be >= 1")
        if self.transformer_layers < 0:
            raise ConfigError("encoder.transformer_layers", "must be >= 0")
        if self.D_f != self.D:
            raise ConfigError("encoder.D_f", f"must equal D for the residual add ({self.D_f} != {self.D})")
        if self.D % self.attention_heads:
            raise ConfigError(
                "encoder.attention_heads", f"D={self.D} not divisible by {self.attention_heads}"
            )
        if self.H % self.patch_grid or self.W % self.patch_grid:
            raise ConfigError("encoder.patch_grid", f"must divide H={self.H} and W={self.W}")


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    video_id: str
    start_frame: int
    label: np.ndarray
    total: float | None = None
    indices: np.ndarray | None = field(default=None, repr=False)

    def validate(self, cfg: EncoderConfig) -> None:
        expected = (cfg.T, cfg.H, cfg.W, 3)
        if self.frames.shape != expected:
            raise DimensionError(f"clip frames {self.frames.shape}, config expects {expected}")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"clip {self.video_id}@{self.start_frame} has non-finite pixels")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError(f"clip {self.video_id}@{self.start_frame} pixels outside [0, 1]")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def positional_encoding(T: int, D: int) -> np.ndarray:
    """``PE[t, 2i] = sin(t / 10000^(2i/D))``, ``PE[t, 2i+1] = cos(...)``."""
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, D, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / D)
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : D // 2])
    return pe


def positional_encode(features: Value) -> Value:
    """Add the fixed sinusoid to ``(..., T, D)`` features; nothing trainable."""
    T, D = features.shape[-2:]
    pe = positional_encoding(T, D)
    return ad.add(features, ad.constant(np.broadcast_to(pe, features.shape)))


def patch_means(frames: np.ndarray, grid: int) -> np.ndarray:
    """Mean-pool ``(..., H, W, 3)`` frames onto a ``grid x grid`` patch lattice."""
    *lead, H, W, ch = frames.shape
    ph, pw = H // grid, W // grid
    x = frames.reshape(*lead, grid, ph, grid, pw, ch).mean(axis=(-4, -2))
    return x.reshape(*lead, grid * grid * ch)


class VideoEncoder:
    """Shared-weight clip encoder; both branches call the same instance."""

    def __init__(self, cfg: EncoderConfig, store: ParameterStore, init_rng: np.random.Generator,
                 prefix: str = "encoder"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        n_in = cfg.patch_grid * cfg.patch_grid * 3
        frozen_rng = np.random.default_rng(cfg.backbone_seed)
        p = prefix + ".backbone"
        store.add(f"{p}.frozen.weight",
                  frozen_rng.normal(0.0, cfg.frozen_gain / np.sqrt(n_in), (n_in, cfg.frozen_width)),
                  frozen=True)
        store.add(f"{p}.frozen.bias", frozen_rng.normal(0.0, 0.1, cfg.frozen_width), frozen=True)
        store.add(f"{p}.fc.weight", uniform_init(init_rng, cfg.frozen_width, (cfg.frozen_width, cfg.D_f)))
        store.add(f"{p}.fc.bias", uniform_init(init_rng, cfg.frozen_width, cfg.D_f))
        D, F = cfg.D, cfg.ff_width
        for layer in range(cfg.transformer_layers):
            q = f"{prefix}.transformer.{layer}"
            store.add(f"{q}.ln1.gain", np.ones(D))
            store.add(f"{q}.ln1.bias", np.zeros(D))
            for proj in ("query", "key", "value", "out"):
                store.add(f"{q}.attn.{proj}.weight", uniform_init(init_rng, D, (D, D)))
                store.add(f"{q}.attn.{proj}.bias", uniform_init(init_rng, D, D))
            store.add(f"{q}.ln2.gain", np.ones(D))
            store.add(f"{q}.ln2.bias", np.zeros(D))
            store.add(f"{q}.ff1.weight", uniform_init(init_rng, D, (D, F)))
            store.add(f"{q}.ff1.bias", uniform_init(init_rng, D, F))
            store.add(f"{q}.ff2.weight", uniform_init(init_rng, F, (F, D)))
            store.add(f"{q}.ff2.bias", uniform_init(init_rng, F, D))

    # names of every parameter owned by the encoder
    def parameter_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(self.prefix + ".")]

    def frozen_features(self, frames: np.ndarray) -> np.ndarray:
        """Fixed feature map: patch means -> frozen projection -> tanh."""
        p = self.prefix + ".backbone.frozen"
        x = patch_means(frames, self.cfg.patch_grid) - 0.5
        return np.tanh(x @ self.store[p + ".weight"].data + self.store[p + ".bias"].data)

    def backbone_from_frozen(self, frozen: np.ndarray) -> Value:
        p = self.prefix + ".backbone.fc"
        h = ad.matmul(ad.constant(frozen), self.store[p + ".weight"])
        return ad.relu(ad.add_bias(h, self.store[p + ".bias"]))

    def backbone_forward(self, frames: np.ndarray) -> Value:
        """Per-frame features ``(..., T, D_f)`` for frames ``(..., T, H, W, 3)``."""
        cfg = self.cfg
        if frames.shape[-3:] != (cfg.H, cfg.W, 3):
            raise DimensionError(f"frames {frames.shape} do not match H={cfg.H}, W={cfg.W}")
        return self.backbone_from_frozen(self.frozen_features(frames))

    def _attention(self, x: Value, q: str) -> Value:
        *lead, T, D = x.shape
        h = self.cfg.attention_heads
        dh = D // h
        s = self.store

        def project(name):
            y = ad.add_bias(ad.matmul(x, s[f"{q}.attn.{name}.weight"]), s[f"{q}.attn.{name}.bias"])
            y = ad.reshape(y, (*lead, T, h, dh))
            n = len(lead)
            return ad.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))

        query, key, value = project("query"), project("key"), project("value")
        scores = ad.scale(ad.matmul(query, ad.transpose(key)), 1.0 / np.sqrt(dh))
        mixed = ad.matmul(ad.softmax(scores, axis=-1), value)
        n = len(lead)
        mixed = ad.reshape(ad.transpose(mixed, tuple(range(n)) + (n + 1, n, n + 2)), (*lead, T, D))
        return ad.add_bias(ad.matmul(mixed, s[f"{q}.attn.out.weight"]), s[f"{q}.attn.out.bias"])

    def _feedforward(self, x: Value, q: str) -> Value:
        s = self.store
        h = ad.relu(ad.add_bias(ad.matmul(x, s[f"{q}.ff1.weight"]), s[f"{q}.ff1.bias"]))
        return ad.add_bias(ad.matmul(h, s[f"{q}.ff2.weight"]), s[f"{q}.ff2.bias"])

    def transformer_encoder(self, x: Value, use_layer_norm: bool = True) -> Value:
        """Pre-LN encoder stack over ``(..., T, D)``; shape preserved."""
        if x.shape[-1] != self.cfg.D:
            raise DimensionError(f"transformer input width {x.shape[-1]} != D={self.cfg.D}")
        s = self.store
        for layer in range(self.cfg.transformer_layers):
            q = f"{self.prefix}.transformer.{layer}"
            h = ad.layer_norm(x, s[f"{q}.ln1.gain"], s[f"{q}.ln1.bias"]) if use_layer_norm else x
            x = ad.add(x, self._attention(h, q))
            h = ad.layer_norm(x, s[f"{q}.ln2.gain"], s[f"{q}.ln2.bias"]) if use_layer_norm else x
            x = ad.add(x, self._feedforward(h, q))
        return x

    def encode_from_frozen(self, frozen: np.ndarray) -> Value:
        """Clip features ``(..., D)`` from precomputed frozen frame features."""
        f = self.backbone_from_frozen(frozen)
        encoded = self.transformer_encoder(positional_encode(f))
        return ad.mean_pool(ad.add(encoded, f), axis=-2)

    def encode_frames(self, frames: np.ndarray) -> Value:
        return self.encode_from_frozen(self.frozen_features(frames))

    def encode_clip(self, clip: Clip) -> Value:
        clip.validate(self.cfg)
        return self.encode_frames(clip.frames)

    def encode_context(self, clips: list[Clip], K: int) -> Value:
        """Detached ``(2K+1, D)`` stack computed with the shared weights."""
        if len(clips) != 2 * K + 1:
            raise ValueError(f"context needs {2 * K + 1} clips, got {len(clips)}")
        for c in clips:
            c.validate(self.cfg)
        with ad.no_grad():
            z = self.encode_frames(np.stack([c.frames for c in clips]))
        return ad.detach(z)
