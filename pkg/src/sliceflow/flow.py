"""Pose-conditioned invertible map between slice images and latent vectors.

A logit pre-transform takes [0,1] pixels to the real line, then a stack of
checkerboard affine coupling layers (alternating parity) transforms the
image. Each coupling network sees the passive half of the image concatenated
with a learned pose embedding broadcast over space, and produces a clamped
log-scale and a shift for the active half. Forward and inverse share all
weights; the log-determinant is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class FlowNumericsError(FloatingPointError):
    """Non-finite intermediate during inversion."""


@dataclass
class FlowConfig:
    image_shape: tuple = (32, 32)  # (H, W); an int means square
    pose_dim: int = 24  # K, the one-hot pose length
    layers: int = 6
    width: int = 32
    pose_embed: int = 8
    alpha: float = 0.05

    def __post_init__(self):
        if np.isscalar(self.image_shape):
            self.image_shape = (int(self.image_shape), int(self.image_shape))
        self.image_shape = tuple(int(s) for s in self.image_shape)
        h, w = self.image_shape
        if (h * w) % 2 != 0:
            raise ValueError(f"pixel count {h * w} must be even for the checkerboard split")
        if self.layers < 2:
            raise ValueError("at least two coupling layers are required")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")

    @property
    def latent_dim(self) -> int:
        h, w = self.image_shape
        return h * w

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "pose_dim": self.pose_dim,
            "layers": self.layers,
            "width": self.width,
            "pose_embed": self.pose_embed,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FlowConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown flow config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "image_shape" in doc and not np.isscalar(doc["image_shape"]):
            doc["image_shape"] = tuple(doc["image_shape"])
        return cls(**doc)


def pre_transform(x, alpha: float):
    """Map [0,1] pixels through a scaled logit; returns (y, logdet).

    y = logit(alpha + (1-2*alpha)*x); the per-pixel volume element is
    log(1-2*alpha) - log(u) - log(1-u). A 2-D image yields a scalar logdet;
    batched inputs [N, ...] yield one logdet per sample.
    """
    u = alpha + (1.0 - 2.0 * alpha) * x
    log_u = ad.log(u)
    log_1mu = ad.log1p(-u)
    y = log_u - log_1mu
    shape = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    if len(shape) <= 2:
        axes, count = None, int(np.prod(shape))
    else:
        axes, count = tuple(range(1, len(shape))), int(np.prod(shape[1:]))
    s = log_u + log_1mu
    s = s.sum(axis=axes) if isinstance(s, Tensor) else np.sum(s, axis=axes)
    logdet = count * np.log(1.0 - 2.0 * alpha) - s
    return y, logdet


def inverse_pre_transform(y, alpha: float):
    """Exact inverse of :func:`pre_transform`, clamped back to [0, 1]."""
    x = (ad.sigmoid(y) - alpha) / (1.0 - 2.0 * alpha)
    if isinstance(x, Tensor):
        x = x.data
    return np.clip(x, 0.0, 1.0)


def _checkerboard(h: int, w: int, parity: int, dtype) -> np.ndarray:
    ij = np.add.outer(np.arange(h), np.arange(w))
    return ((ij % 2) == parity).astype(dtype)[None, None]


class PoseEmbedding:
    """Dense projection of the one-hot pose, broadcast as image channels."""

    def __init__(self, pose_dim: int, embed_dim: int, rng: np.random.Generator, dtype):
        self.weight = Tensor(
            (0.1 * rng.standard_normal((pose_dim, embed_dim))).astype(dtype),
            requires_grad=True,
        )

    def __call__(self, poses: Tensor) -> Tensor:
        return poses @ self.weight


class CouplingLayer:
    """Affine coupling over a checkerboard split with a shared-weight CNN."""

    def __init__(self, config: FlowConfig, parity: int, rng: np.random.Generator, dtype):
        h, w = config.image_shape
        width = config.width
        c_in = 1 + config.pose_embed
        self.mask = _checkerboard(h, w, parity, dtype)
        self.active = (1.0 - self.mask).astype(dtype)

        def conv_init(f, c):
            std = 1.0 / np.sqrt(c * 9)
            return Tensor((std * rng.standard_normal((f, c, 3, 3))).astype(dtype), requires_grad=True)

        self.w1 = conv_init(width, c_in)
        self.b1 = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.w2 = conv_init(width, width)
        self.b2 = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        # identity initialization: the scale/shift head starts at zero
        self.w3 = Tensor(np.zeros((2, width, 3, 3), dtype=dtype), requires_grad=True)
        self.b3 = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)
        self.gain = Tensor(np.ones((), dtype=dtype), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.gain]

    def _scale_shift(self, passive: Tensor, emb4: Tensor):
        inp = ad.concat([passive, emb4], axis=1)
        h1 = ad.tanh(ad.conv2d(inp, self.w1, self.b1, padding=1))
        h2 = ad.tanh(ad.conv2d(h1, self.w2, self.b2, padding=1))
        out = ad.conv2d(h2, self.w3, self.b3, padding=1)
        s = self.gain * ad.tanh(out[:, 0:1])
        t = out[:, 1:2]
        return s, t

    def forward(self, h: Tensor, emb4: Tensor):
        passive = h * self.mask
        s, t = self._scale_shift(passive, emb4)
        h_new = passive + (h * ad.exp(s) + t) * self.active
        logdet = (s * self.active).sum(axis=(1, 2, 3))
        return h_new, logdet

    def inverse(self, z: Tensor, emb4: Tensor):
        passive = z * self.mask
        s, t = self._scale_shift(passive, emb4)
        return passive + ((z - t) * ad.exp(-s)) * self.active


class ConditionalFlow:
    """The full bijector: pre-transform plus pose-conditioned coupling stack."""

    def __init__(self, config: FlowConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.dtype = ad.default_dtype()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embedding = PoseEmbedding(config.pose_dim, config.pose_embed, rng, self.dtype)
        self.layers = [
            CouplingLayer(config, parity=i % 2, rng=rng, dtype=self.dtype)
            for i in range(config.layers)
        ]

    def parameters(self):
        params = [self.embedding.weight]
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def parameter_items(self):
        items = [("flow.embedding.weight", self.embedding.weight)]
        names = ("w1", "b1", "w2", "b2", "w3", "b3", "gain")
        for i, layer in enumerate(self.layers):
            for name, p in zip(names, layer.parameters()):
                items.append((f"flow.layer{i}.{name}", p))
        return items

    # -- shape handling ------------------------------------------------

    def _as_image_batch(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        h, w = self.config.image_shape
        shape = x.data.shape
        ok = shape == (h, w) or (len(shape) == 3 and shape[1:] == (h, w))
        if not ok:
            raise ValueError(f"expected images of shape [N,{h},{w}] or [{h},{w}], got {shape}")
        if len(shape) == 2:
            return x.reshape(1, 1, h, w)
        return x.reshape(shape[0], 1, h, w)

    def _as_pose_batch(self, poses, n: int) -> Tensor:
        v = poses if isinstance(poses, Tensor) else Tensor(np.asarray(poses, dtype=self.dtype))
        if v.data.ndim == 1:
            v = v.reshape(1, -1)
        if v.data.shape != (n, self.config.pose_dim):
            raise ValueError(
                f"expected poses of shape [{n},{self.config.pose_dim}], got {v.data.shape}"
            )
        return v

    def _broadcast_embedding(self, poses: Tensor) -> Tensor:
        h, w = self.config.image_shape
        emb = self.embedding(poses)  # [N, E]
        emb = emb.reshape(emb.data.shape[0], emb.data.shape[1], 1, 1)
        zeros_hw = Tensor(np.zeros((1, 1, h, w), dtype=self.dtype))
        return emb + zeros_hw

    # -- public transforms ----------------------------------------------

    def forward_batch(self, images, poses):
        """images [N,H,W] and one-hot poses [N,K] -> (z [N,D], logdet [N])."""
        x = self._as_image_batch(images)
        n = x.data.shape[0]
        v = self._as_pose_batch(poses, n)
        emb4 = self._broadcast_embedding(v)

        h, logdet = pre_transform(x, self.config.alpha)
        for layer in self.layers:
            h, ld = layer.forward(h, emb4)
            logdet = logdet + ld
        z = h.reshape(n, self.config.latent_dim)
        return z, logdet

    def forward(self, image, pose):
        """Single image/pose pair -> (latent vector [D], scalar logdet)."""
        z, logdet = self.forward_batch(np.asarray(image)[None], np.asarray(pose)[None])
        z_np = z.data[0] if isinstance(z, Tensor) else z[0]
        ld = float(logdet.data[0]) if isinstance(logdet, Tensor) else float(logdet[0])
        return z_np, ld

    def inverse_batch(self, latents, poses) -> np.ndarray:
        """latents [N,D] and poses [N,K] -> images [N,H,W] in [0,1]."""
        h_, w_ = self.config.image_shape
        z = np.asarray(latents, dtype=self.dtype)
        if z.ndim == 1:
            z = z[None]
        n = z.shape[0]
        if z.shape != (n, self.config.latent_dim):
            raise ValueError(f"expected latents of shape [N,{self.config.latent_dim}], got {z.shape}")
        v = self._as_pose_batch(poses, n)
        emb4 = self._broadcast_embedding(v)

        h = Tensor(z).reshape(n, 1, h_, w_)
        for layer in reversed(self.layers):
            h = layer.inverse(h, emb4)
        if not np.isfinite(h.data).all():
            raise FlowNumericsError("non-finite intermediate while inverting the coupling stack")
        x = inverse_pre_transform(h, self.config.alpha)
        return x.reshape(n, h_, w_)

    def inverse(self, latent, pose) -> np.ndarray:
        """Single latent/pose pair -> image [H,W] in [0,1]."""
        return self.inverse_batch(np.asarray(latent)[None], np.asarray(pose)[None])[0]
