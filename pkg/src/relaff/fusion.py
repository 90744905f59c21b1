"""Context attention, fusion and the split multi-label regression head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, ParameterStore, Value
from .encoder import Clip, ConfigError, EncoderConfig, VideoEncoder, uniform_init


@dataclass
class HeadConfig:
    C: int = 2
    penultimate_width: int = 0  # 0 means 4 * C * 32
    dropout_rate: float = 0.1
    total_score_enabled: bool = False
    supervised_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if self.C >= 1 and not self.supervised_mask:
            self.supervised_mask = [True] * self.C
        if self.C >= 1 and not self.penultimate_width:
            self.penultimate_width = 4 * self.C * 32
        self.validate()

    @property
    def P(self) -> int:
        return self.penultimate_width

    def validate(self) -> None:
        if self.C < 1:
            raise ConfigError("head.C", "must be >= 1")
        if self.penultimate_width % self.C:
            raise ConfigError("head.penultimate_width", f"{self.penultimate_width} not divisible by C={self.C}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("head.dropout_rate", "must lie in [0, 1)")
        if len(self.supervised_mask) != self.C:
            raise ConfigError("head.supervised_mask", f"needs {self.C} entries")
        if not any(self.supervised_mask):
            raise ConfigError("head.supervised_mask", "at least one label must be supervised")


@dataclass
class RegressionOutput:
    per_label: Value  # (B, C)
    total_score: Value | None  # (B, 1) when enabled
    penultimate: Value  # (B, P)


class NonLocalAttention:
    """Single-head scaled dot-product: the clip feature queries its context."""

    def __init__(self, D: int, store: ParameterStore, rng: np.random.Generator, prefix: str = "attention"):
        self.D = D
        self.store = store
        self.prefix = prefix
        for name in ("theta", "phi", "g"):
            store.add(f"{prefix}.{name}.weight", uniform_init(rng, D, (D, D)))
            store.add(f"{prefix}.{name}.bias", uniform_init(rng, D, D))

    def _linear(self, x: Value, name: str) -> Value:
        p = f"{self.prefix}.{name}"
        return ad.add_bias(ad.matmul(x, self.store[p + ".weight"]), self.store[p + ".bias"])

    def weights(self, z: Value, Z: Value) -> Value:
        """Attention distribution ``(B, S)`` over the ``S = 2K+1`` context slots."""
        B, S, D = Z.shape
        q = ad.reshape(self._linear(z, "theta"), (B, D, 1))
        keys = self._linear(Z, "phi")
        scores = ad.reshape(ad.matmul(keys, q), (B, S))
        return ad.softmax(ad.scale(scores, 1.0 / np.sqrt(D)), axis=-1)

    def __call__(self, z: Value, Z: Value) -> Value:
        if z.ndim != 2 or Z.ndim != 3 or Z.shape[0] != z.shape[0] or Z.shape[2] != self.D or z.shape[1] != self.D:
            raise DimensionError(f"nonlocal_attend: z {z.shape} vs Z {Z.shape} (D={self.D})")
        B, S, D = Z.shape
        w = ad.reshape(self.weights(z, Z), (B, 1, S))
        return ad.reshape(ad.matmul(w, self._linear(Z, "g")), (B, D))


def fuse(z: Value, attended: Value) -> Value:
    """``[z, attended]`` along features: the clip feature comes first."""
    return ad.concat([z, attended], axis=-1)


class RegressionHead:
    def __init__(self, D: int, cfg: HeadConfig, store: ParameterStore, rng: np.random.Generator,
                 prefix: str = "head"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        P, C = cfg.P, cfg.C
        sub = P // C
        store.add(f"{prefix}.fc.weight", uniform_init(rng, 2 * D, (2 * D, P)))
        store.add(f"{prefix}.fc.bias", uniform_init(rng, 2 * D, P))
        # row c holds the 1-output layer reading subset c of the penultimate vector
        store.add(f"{prefix}.split.weight", uniform_init(rng, sub, (C, sub)))
        store.add(f"{prefix}.split.bias", uniform_init(rng, sub, C))
        if cfg.total_score_enabled:
            store.add(f"{prefix}.total.weight", uniform_init(rng, P, (P, 1)))
            store.add(f"{prefix}.total.bias", uniform_init(rng, P, 1))

    def __call__(self, fused: Value, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> RegressionOutput:
        s, p, cfg = self.store, self.prefix, self.cfg
        B = fused.shape[0]
        if fused.shape[1] != s[f"{p}.fc.weight"].shape[0]:
            raise DimensionError(f"head expects width {s[f'{p}.fc.weight'].shape[0]}, got {fused.shape[1]}")
        hidden = ad.relu(ad.add_bias(ad.matmul(fused, s[f"{p}.fc.weight"]), s[f"{p}.fc.bias"]))
        pen = ad.dropout(hidden, cfg.dropout_rate, rng, train_mode)
        C, sub = cfg.C, cfg.P // cfg.C
        parts = ad.reshape(pen, (B, C, sub))
        w = ad.expand(s[f"{p}.split.weight"], (B, C, sub))
        per_label = ad.add_bias(ad.sum_(ad.mul(parts, w), axis=-1), s[f"{p}.split.bias"])
        total = None
        if cfg.total_score_enabled:
            total = ad.add_bias(ad.matmul(pen, s[f"{p}.total.weight"]), s[f"{p}.total.bias"])
        return RegressionOutput(per_label, total, pen)


class ContextRegressor:
    """Encoder, context attention and head over one shared parameter store."""

    def __init__(self, enc_cfg: EncoderConfig, head_cfg: HeadConfig, init_seed: int = 0,
                 reencode_center: bool = False):
        self.enc_cfg = enc_cfg
        self.head_cfg = head_cfg
        self.reencode_center = reencode_center
        self.store = ParameterStore()
        rng = np.random.default_rng(init_seed)
        self.encoder = VideoEncoder(enc_cfg, self.store, rng)
        self.attention = NonLocalAttention(enc_cfg.D, self.store, rng)
        self.head = RegressionHead(enc_cfg.D, head_cfg, self.store, rng)

    def context_stack(self, z: Value, context_frozen: np.ndarray | None, K: int,
                      center_frozen: np.ndarray | None = None) -> Value:
        """Detached ``(B, 2K+1, D)`` context features.

        ``context_frozen`` holds the ``2K`` neighbours per sample in temporal
        order, shape ``(B, 2K, T, F)``.  The centre slot reuses ``z`` detached
        unless ``reencode_center`` is set.
        """
        B, D = z.shape
        centre = ad.detach(z).data
        if self.reencode_center and center_frozen is not None:
            with ad.no_grad():
                centre = self.encoder.encode_from_frozen(center_frozen).data
        if K == 0:
            return ad.constant(centre[:, None, :])
        if context_frozen is None or context_frozen.shape[:2] != (B, 2 * K):
            got = None if context_frozen is None else context_frozen.shape
            raise ValueError(f"context must hold 2K={2 * K} neighbours per clip, got {got}")
        with ad.no_grad():
            flat = context_frozen.reshape(B * 2 * K, *context_frozen.shape[2:])
            neigh = self.encoder.encode_from_frozen(flat).data.reshape(B, 2 * K, D)
        stack = np.concatenate([neigh[:, :K], centre[:, None, :], neigh[:, K:]], axis=1)
        return ad.constant(stack)

    def forward(self, clip_frozen: np.ndarray, context_frozen: np.ndarray | None, K: int,
                train_mode: bool = False, rng: np.random.Generator | None = None):
        """Returns ``(RegressionOutput, z)``; ``z`` is the gradient-carrying clip feature."""
        z = self.encoder.encode_from_frozen(clip_frozen)
        Z = self.context_stack(z, context_frozen, K, center_frozen=clip_frozen)
        fused = fuse(z, self.attention(z, Z))
        return self.head(fused, train_mode=train_mode, rng=rng), z

    def forward_frames(self, clip_frames: np.ndarray, context_frames: np.ndarray | None, K: int,
                       train_mode: bool = False, rng: np.random.Generator | None = None):
        ff = self.encoder.frozen_features
        ctx = None if context_frames is None else ff(context_frames)
        return self.forward(ff(clip_frames), ctx, K, train_mode, rng)

    def forward_pipeline(self, clip: Clip, context: list[Clip], train_mode: bool = False,
                         rng: np.random.Generator | None = None):
        """Single clip with its ``2K+1`` window (centre = the clip itself)."""
        n = len(context)
        if n % 2 == 0:
            raise ValueError(f"context window must have odd length 2K+1, got {n}")
        K = n // 2
        clip.validate(self.enc_cfg)
        for c in context:
            c.validate(self.enc_cfg)
        if context[K].start_frame != clip.start_frame or context[K].video_id != clip.video_id:
            raise ValueError("centre of the context window must be the input clip")
        neigh = [c.frames for i, c in enumerate(context) if i != K]
        ctx = np.stack(neigh)[None] if neigh else None
        return self.forward_frames(clip.frames[None], ctx, K, train_mode, rng)

    def parameter_names(self, part: str) -> list[str]:
        return [n for n in self.store if n.startswith(part + ".")]
