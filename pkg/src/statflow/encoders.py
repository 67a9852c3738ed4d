"""Frozen, differentiable feature encoders.

Two builtin families ship with the package (documented in the CLI help):

* ``toy-conv-32``    -- 3 conv blocks (3x3 conv, ReLU, 2x2 avg pool),
  global average pooling and an affine-free LayerNorm; input 3x32x32,
  feature dim 128. Weights are seeded random by default, or loaded from
  a weight file (e.g. one produced by scripts/pretrain_toy_encoder.py).
* ``identity-<F>``   -- maps an F-vector "image" of shape (F, 1, 1) to
  itself; used for feature-space tests.

External weights use the named-tensor container (see tensorio); the
header carries the EncoderSpec fields so a load either reproduces the
encoder exactly or fails validation.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, ValidationError
from .tensorio import load_tensors, save_tensors

LAYERNORM_EPS = 1e-6

DEFAULT_CONV_CHANNELS = (32, 64, 128)
DEFAULT_PIXEL_MEAN = (0.5, 0.5, 0.5)
DEFAULT_PIXEL_STD = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class EncoderSpec:
    """Static description of an encoder: shapes, normalization, head."""

    name: str
    kind: str  # "conv" | "identity"
    input_resolution: int
    feature_dim: int
    channel_mean: tuple
    channel_std: tuple
    final_layernorm: bool
    conv_channels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("conv", "identity"):
            raise ValidationError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be >= 2")
        # identity encoders consume raw feature vectors, not real images,
        # so the minimum-resolution rule applies to image encoders only
        if self.kind != "identity" and self.input_resolution < 8:
            raise ValidationError("input_resolution must be >= 8")
        if self.input_resolution < 1:
            raise ValidationError("input_resolution must be positive")
        if len(self.channel_mean) != len(self.channel_std):
            raise ValidationError("channel_mean/std length mismatch")
        if any(s <= 0 for s in self.channel_std):
            raise ValidationError("channel_std must be strictly positive")

    @property
    def channels(self) -> int:
        return len(self.channel_mean)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "input_resolution": self.input_resolution,
            "feature_dim": self.feature_dim,
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
            "final_layernorm": self.final_layernorm,
            "conv_channels": list(self.conv_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        try:
            return cls(
                name=d["name"],
                kind=d["kind"],
                input_resolution=int(d["input_resolution"]),
                feature_dim=int(d["feature_dim"]),
                channel_mean=tuple(float(v) for v in d["channel_mean"]),
                channel_std=tuple(float(v) for v in d["channel_std"]),
                final_layernorm=bool(d["final_layernorm"]),
                conv_channels=tuple(int(v) for v in d.get("conv_channels", ())),
            )
        except KeyError as e:
            raise ValidationError(f"encoder spec missing field {e}")


class Encoder:
    """Immutable encoder: spec + frozen parameters + differentiable forward.

    Parameters are write-protected on construction and never mutated by
    any operation in this package; ``param_checksum()`` is stable for the
    lifetime of the object.
    """

    def __init__(self, spec: EncoderSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        frozen = {}
        for k, v in params.items():
            a = np.ascontiguousarray(v)
            a.flags.writeable = False
            frozen[k] = a
        self.params = frozen
        self._validate_params()
        self.fingerprint = self.param_checksum()

    # -- identity / integrity ------------------------------------------------

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.spec.to_dict().items())).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].tobytes())
        return h.hexdigest()[:16]

    def _validate_params(self):
        if self.spec.kind == "identity":
            if self.params:
                raise ValidationError("identity encoder takes no parameters")
            return
        chans = (self.spec.channels,) + tuple(self.spec.conv_channels)
        if len(chans) != 4:
            raise ValidationError("conv encoder needs exactly 3 conv blocks")
        for i in range(3):
            w = self.params.get(f"conv{i + 1}.weight")
            b = self.params.get(f"conv{i + 1}.bias")
            if w is None or b is None:
                raise ValidationError(f"missing parameters for conv block {i + 1}")
            if w.shape != (chans[i + 1], chans[i], 3, 3) or b.shape != (chans[i + 1],):
                raise ValidationError(
                    f"conv{i + 1} weight shape {w.shape} does not match spec "
                    f"channels {chans}"
                )
        if self.spec.conv_channels[-1] != self.spec.feature_dim:
            raise ValidationError("last conv width must equal feature_dim")
        if self.spec.input_resolution % 8 != 0:
            raise ValidationError("conv encoder resolution must be divisible by 8")

    def to_double(self) -> "Encoder":
        """Clone with float64 parameters, for finite-difference tests."""
        return Encoder(self.spec, {k: v.astype(np.float64) for k, v in self.params.items()})

    # -- forward -------------------------------------------------------------

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images)
        s = self.spec
        if s.kind == "identity" and x.ndim == 2 and x.shape[1] == s.feature_dim:
            x = x.reshape(x.shape[0], s.feature_dim, 1, 1)
        if x.ndim != 4:
            raise ShapeError(f"expected a (B, C, R, R) batch, got shape {x.shape}")
        if x.shape[1] != s.channels or x.shape[2] != s.input_resolution \
                or x.shape[3] != s.input_resolution:
            raise ShapeError(
                f"batch shape {x.shape[1:]} does not match encoder "
                f"({s.channels}, {s.input_resolution}, {s.input_resolution})"
            )
        return x

    def forward(self, images: np.ndarray) -> np.ndarray:
        feats, _ = self._forward_tape(images, keep_tape=False)
        return feats

    def forward_vjp(self, images: np.ndarray):
        """Returns (features, vjp) where vjp(g_features) -> g_images."""
        feats, tape = self._forward_tape(images, keep_tape=True)

        def vjp(gfeat: np.ndarray) -> np.ndarray:
            return self._backward(tape, np.asarray(gfeat), want_params=False)

        return feats, vjp

    def forward_param_vjp(self, images: np.ndarray):
        """Like forward_vjp but the vjp also returns parameter gradients
        (used by the pretraining script; the package itself never updates
        encoder parameters)."""
        feats, tape = self._forward_tape(images, keep_tape=True)

        def vjp(gfeat: np.ndarray):
            return self._backward(tape, np.asarray(gfeat), want_params=True)

        return feats, vjp

    def _forward_tape(self, images, keep_tape):
        x = self._check_images(images)
        s = self.spec
        dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
        x = x.astype(dt, copy=False)
        mean = np.asarray(s.channel_mean, dtype=dt).reshape(1, -1, 1, 1)
        std = np.asarray(s.channel_std, dtype=dt).reshape(1, -1, 1, 1)
        xn = (x - mean) / std
        tape: dict = {"std": std}

        if s.kind == "identity":
            feats = xn.reshape(xn.shape[0], s.feature_dim)
        else:
            p = {k: v.astype(dt, copy=False) for k, v in self.params.items()}
            if keep_tape:
                tape["params"] = p
            h = xn
            for i in (1, 2, 3):
                w, b = p[f"conv{i}.weight"], p[f"conv{i}.bias"]
                z = kernels.conv2d(h, w, b)
                a = np.maximum(z, 0)
                if keep_tape:
                    tape[f"x{i}"] = h
                    tape[f"mask{i}"] = z > 0
                h = kernels.avgpool2(a)
            tape["pool_out_shape"] = h.shape
            feats = h.mean(axis=(2, 3))

        if s.final_layernorm:
            mu = feats.mean(axis=1, keepdims=True)
            var = feats.var(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + np.asarray(LAYERNORM_EPS, dtype=dt))
            out = (feats - mu) * inv
            if keep_tape:
                tape["ln_out"] = out
                tape["ln_inv"] = inv
            feats = out
        return feats, tape

    def _backward(self, tape, gfeat, want_params):
        s = self.spec
        g = gfeat
        if s.final_layernorm:
            y, inv = tape["ln_out"], tape["ln_inv"]
            gm = g.mean(axis=1, keepdims=True)
            gy = (g * y).mean(axis=1, keepdims=True)
            g = (g - gm - y * gy) * inv

        gparams: dict[str, np.ndarray] = {}
        if s.kind == "identity":
            gx = g.reshape(g.shape[0], s.feature_dim, 1, 1)
        else:
            b, c, hh, ww = tape["pool_out_shape"]
            g = np.broadcast_to(
                (g / (hh * ww))[:, :, None, None], (b, c, hh, ww)
            ).astype(g.dtype)
            p = tape["params"]
            for i in (3, 2, 1):
                g = kernels.avgpool2_backward(g)
                g = g * tape[f"mask{i}"]
                if want_params:
                    dw, db = kernels.conv2d_weight_grad(tape[f"x{i}"], g, 3)
                    gparams[f"conv{i}.weight"] = dw
                    gparams[f"conv{i}.bias"] = db
                g = kernels.conv2d_input_grad(g, p[f"conv{i}.weight"])
            gx = g
        gx = gx / tape["std"]
        if want_params:
            return gx, gparams
        return gx


def encode_batch(encoder: Encoder, images: np.ndarray, want_vjp: bool = False):
    """Map an image batch to features of shape (B, F).

    With want_vjp=True returns (features, vjp) where vjp backpropagates a
    (B, F) cotangent to pixel space.
    """
    if want_vjp:
        return encoder.forward_vjp(images)
    return encoder.forward(images)


# -- builtins and serialization ----------------------------------------------

_IDENTITY_RE = re.compile(r"^identity-(\d+)$")


def _he_conv(rng: np.random.Generator, co: int, ci: int) -> np.ndarray:
    std = np.sqrt(2.0 / (ci * 9))
    return rng.normal(0.0, std, size=(co, ci, 3, 3)).astype(np.float32)


def _build_toy_conv(seed: int, channels=DEFAULT_CONV_CHANNELS) -> Encoder:
    spec = EncoderSpec(
        name="toy-conv-32",
        kind="conv",
        input_resolution=32,
        feature_dim=channels[-1],
        channel_mean=DEFAULT_PIXEL_MEAN,
        channel_std=DEFAULT_PIXEL_STD,
        final_layernorm=True,
        conv_channels=tuple(channels),
    )
    rng = np.random.default_rng(np.random.SeedSequence([0x5F0C, seed]))
    chans = (spec.channels,) + spec.conv_channels
    params = {}
    for i in range(3):
        params[f"conv{i + 1}.weight"] = _he_conv(rng, chans[i + 1], chans[i])
        params[f"conv{i + 1}.bias"] = np.zeros(chans[i + 1], dtype=np.float32)
    return Encoder(spec, params)


def _build_identity(feature_dim: int) -> Encoder:
    spec = EncoderSpec(
        name=f"identity-{feature_dim}",
        kind="identity",
        input_resolution=1,
        feature_dim=feature_dim,
        channel_mean=(0.0,) * feature_dim,
        channel_std=(1.0,) * feature_dim,
        final_layernorm=False,
    )
    return Encoder(spec, {})


def load_encoder(source: str, seed: int = 0) -> Encoder:
    """Build a builtin encoder by name or load one from a weight file.

    Builtin names: "toy-conv-32" (seeded random weights) and
    "identity-<F>". Anything else is treated as a path to a weight file
    in the named-tensor container format.
    """
    if source == "toy-conv-32":
        return _build_toy_conv(seed)
    m = _IDENTITY_RE.match(source)
    if m:
        return _build_identity(int(m.group(1)))
    header, tensors = load_tensors(source)
    spec = EncoderSpec.from_dict(header.get("encoder_spec", {}))
    return Encoder(spec, tensors)


def save_encoder(encoder: Encoder, path: str) -> None:
    save_tensors(
        path,
        {"encoder_spec": encoder.spec.to_dict(), "content": "encoder-weights"},
        {k: np.asarray(v) for k, v in encoder.params.items()},
    )
