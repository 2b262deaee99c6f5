"""Image and video models over pre-extracted frame features.

Both models share one embedding width so image features and clip features
live in the same space. The image model adds a domain head behind a
gradient-reversal node; the video model adds a temporal convolution block
between the per-frame encoder and the classifier, which is the only part
of either model that can exploit frame order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .utils import rng_for


@dataclass(frozen=True)
class ModelDims:
    d_in: int
    hidden: int
    feat: int
    num_classes: int
    conv_kernel: int = 3
    dom_hidden: int = 32

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        for field in ("d_in", "hidden", "feat", "conv_kernel", "dom_hidden"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")


class ImageOutputs(NamedTuple):
    features: Tensor
    class_probs: Tensor
    domain_probs: Tensor


class VideoOutputs(NamedTuple):
    features: Tensor
    class_probs: Tensor


def _init_linear(params: dict, rng: np.random.Generator, name: str,
                 fan_in: int, fan_out: int) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, size=fan_out))


def _seed_key(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def init_image_model(dims: ModelDims, seed) -> dict[str, Tensor]:
    """Two-layer encoder, class head, and a GRL-guarded domain head.

    seed may be an int or a tuple of rng key parts.
    """
    dims.validate()
    rng = rng_for(*_seed_key(seed), "image-model")
    params: dict[str, Tensor] = {}
    _init_linear(params, rng, "enc1", dims.d_in, dims.hidden)
    _init_linear(params, rng, "enc2", dims.hidden, dims.feat)
    _init_linear(params, rng, "cls", dims.feat, dims.num_classes)
    # the discriminator needs its own hidden layer: a purely affine domain
    # head pushes every sample along one shared direction, which turns the
    # reversed gradient field into a rigid translation of the target cloud
    # and lets it collapse into a single source cluster
    _init_linear(params, rng, "dom1", dims.feat, dims.dom_hidden)
    _init_linear(params, rng, "dom2", dims.dom_hidden, 1)
    return params


def init_video_model(dims: ModelDims, seed) -> dict[str, Tensor]:
    """Per-frame encoder, temporal conv block, and class head."""
    dims.validate()
    rng = rng_for(*_seed_key(seed), "video-model")
    params: dict[str, Tensor] = {}
    _init_linear(params, rng, "enc1", dims.d_in, dims.hidden)
    _init_linear(params, rng, "enc2", dims.hidden, dims.feat)
    bound = 1.0 / np.sqrt(dims.conv_kernel * dims.feat)
    params["conv.w"] = Tensor(
        rng.uniform(-bound, bound, size=(dims.conv_kernel, dims.feat, dims.feat)))
    params["conv.b"] = Tensor(rng.uniform(-bound, bound, size=dims.feat))
    _init_linear(params, rng, "cls", dims.feat, dims.num_classes)
    return params


def _encode(params: dict[str, Tensor], x: Tensor) -> Tensor:
    h = ad.relu(x @ params["enc1.w"] + params["enc1.b"])
    return h @ params["enc2.w"] + params["enc2.b"]


def image_forward(params: dict[str, Tensor], x, grl_lambda: float = 1.0) -> ImageOutputs:
    """Features, class probabilities, and domain probabilities for (B, d_in).

    The domain head sits behind a gradient-reversal node scaled by
    grl_lambda; the forward value is identical for every grl_lambda.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"image_forward expects (B, d_in), got {x.shape}")
    feats = _encode(params, x)
    class_probs = ad.softmax(feats @ params["cls.w"] + params["cls.b"])
    h = ad.relu(ad.grl(feats, grl_lambda) @ params["dom1.w"] + params["dom1.b"])
    d = h @ params["dom2.w"] + params["dom2.b"]
    domain_probs = ad.sigmoid(ad.reshape(d, (d.data.shape[0],)))
    return ImageOutputs(feats, class_probs, domain_probs)


def video_forward(params: dict[str, Tensor], clips) -> VideoOutputs:
    """Clip features and class probabilities for a batch of (B, T, d_in)."""
    clips = clips if isinstance(clips, Tensor) else Tensor(clips)
    if clips.data.ndim != 3:
        raise ValueError(f"video_forward expects (B, T, d_in), got {clips.shape}")
    B, T, _ = clips.data.shape
    frames = ad.reshape(clips, (B * T, clips.data.shape[2]))
    frame_feats = _encode(params, frames)
    seq = ad.reshape(frame_feats, (B, T, frame_feats.data.shape[1]))
    mixed = ad.relu(ad.temporal_conv(seq, params["conv.w"], params["conv.b"]))
    clip_feats = ad.mean(mixed, axis=1)
    class_probs = ad.softmax(clip_feats @ params["cls.w"] + params["cls.b"])
    return VideoOutputs(clip_feats, class_probs)
