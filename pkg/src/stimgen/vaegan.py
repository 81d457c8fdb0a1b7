"""VAE/GAN model: 1D conv encoder, transposed-conv decoder, conv discriminator.

The three networks share one :class:`ArchitectureSpec`. The discriminator's
activations at ``feature_layer`` double as the learned similarity space in
which reconstructions are compared.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel_size: int = 8
    stride: int = 2

    @property
    def padding(self) -> int:
        return max(self.kernel_size - self.stride, 0) // 2


def _as_layer(spec) -> LayerSpec:
    if isinstance(spec, LayerSpec):
        return spec
    if isinstance(spec, int):
        return LayerSpec(spec)
    return LayerSpec(*spec)


def _default_layers() -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(c) for c in (32, 64, 128, 256))


@dataclass(frozen=True)
class ArchitectureSpec:
    sequence_length: int = 64
    channels: int = 2
    latent_dims: int = 8
    layers: tuple[LayerSpec, ...] = field(default_factory=_default_layers)
    activations: tuple[str, ...] = ("relu", "relu", "relu", "relu")
    output_activation: str = "sigmoid"
    feature_layer: int = 3
    init_std: float = 0.02
    init_scheme: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(_as_layer(l) for l in self.layers))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layers) != 4:
            raise ValueError(f"exactly 4 conv stages are required, got {len(self.layers)}")
        if len(self.activations) != 4:
            raise ValueError("one hidden activation name per conv stage is required")
        for name in self.activations + (self.output_activation,):
            if name not in ad.ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")
        if not 1 <= self.feature_layer <= 4:
            raise ValueError(f"feature_layer must be in [1, 4], got {self.feature_layer}")
        if self.sequence_length < 1 or self.channels < 1 or self.latent_dims < 1:
            raise ValueError("sequence_length, channels and latent_dims must be positive")
        for layer in self.layers:
            if layer.out_channels < 1 or layer.kernel_size < 1 or layer.stride < 1:
                raise ValueError(f"invalid layer {layer}")
        lengths = self.stage_lengths
        if lengths[-1] < 1:
            raise ValueError(
                f"encoder stages reduce length {self.sequence_length} to {lengths[-1]}")

    @property
    def stage_lengths(self) -> list[int]:
        """Spatial length before stage 1 and after each conv stage."""
        out = [self.sequence_length]
        for layer in self.layers:
            out.append(ad.conv1d_output_length(out[-1], layer.kernel_size, layer.stride,
                                               layer.padding))
        return out

    @property
    def flat_features(self) -> int:
        return self.layers[-1].out_channels * self.stage_lengths[-1]

    @property
    def feature_shape(self) -> tuple[int, int]:
        """(channels, length) of the discriminator activations at ``feature_layer``."""
        return (self.layers[self.feature_layer - 1].out_channels,
                self.stage_lengths[self.feature_layer])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(asdict(l).values()) for l in self.layers]
        d["activations"] = list(self.activations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(*l) for l in d["layers"])
        d["activations"] = tuple(d["activations"])
        return cls(**d)


INIT_SCHEMES = ("normal", "he")


def _init_std(arch: ArchitectureSpec, name: str, shape: tuple[int, ...]) -> float:
    """``init_std`` for "normal"; sqrt(2 / fan_in) for "he"."""
    if arch.init_scheme == "normal":
        return arch.init_std
    if len(shape) == 2:
        fan_in = shape[0]
    elif ".deconv" in name:
        # each output sample of a stride-s transposed conv sees about K/s taps per input channel
        stride = arch.layers[3 - int(name.split("deconv")[1].split(".")[0])].stride
        fan_in = shape[0] * max(shape[2] // stride, 1)
    else:
        fan_in = shape[1] * shape[2]
    return float(np.sqrt(2.0 / fan_in))


def tiny_architecture(**overrides) -> ArchitectureSpec:
    """T=16, C=1, D=2 arch with narrow channels, small enough for finite differences."""
    kw = dict(sequence_length=16, channels=1, latent_dims=2,
              layers=(LayerSpec(2), LayerSpec(3), LayerSpec(3), LayerSpec(4)),
              feature_layer=3, init_std=0.3)
    kw.update(overrides)
    return ArchitectureSpec(**kw)


class VaeGanModel:
    """Parameter container for the encoder, decoder and discriminator."""

    def __init__(self, arch: ArchitectureSpec, params: dict[str, np.ndarray] | None = None,
                 seed: int | None = 0):
        self.arch = arch
        shapes = self.param_shapes(arch)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, shape in shapes.items():
                if name.endswith(".b"):
                    params[name] = np.zeros(shape)
                else:
                    params[name] = rng.normal(0.0, _init_std(arch, name, shape), size=shape)
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = ad.parameter(arr, name)

    @staticmethod
    def param_shapes(arch: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = arch.channels
        for i, layer in enumerate(arch.layers):
            for net in ("enc", "disc"):
                shapes[f"{net}.conv{i}.w"] = (layer.out_channels, c_in, layer.kernel_size)
                shapes[f"{net}.conv{i}.b"] = (layer.out_channels,)
            c_in = layer.out_channels
        d, flat = arch.latent_dims, arch.flat_features
        shapes["enc.mu.w"], shapes["enc.mu.b"] = (flat, d), (d,)
        shapes["enc.logvar.w"], shapes["enc.logvar.b"] = (flat, d), (d,)
        shapes["dec.fc.w"], shapes["dec.fc.b"] = (d, flat), (flat,)
        # decoder stage i undoes encoder stage 3 - i; weight layout follows conv1d
        chans = [arch.channels] + [l.out_channels for l in arch.layers]
        for i in range(4):
            j = 3 - i
            layer = arch.layers[j]
            shapes[f"dec.deconv{i}.w"] = (chans[j + 1], chans[j], layer.kernel_size)
            shapes[f"dec.deconv{i}.b"] = (chans[j],)
        shapes["disc.out.w"], shapes["disc.out.b"] = (flat, 1), (1,)
        return dict(sorted(shapes.items(), key=lambda kv: _net_order(kv[0])))

    def network_params(self, net: str) -> list[Tensor]:
        """Parameters of one network: ``"enc"``, ``"dec"`` or ``"disc"``."""
        return [p for n, p in self.params.items() if n.split(".", 1)[0] == net]

    @property
    def encoder_params(self) -> list[Tensor]:
        return self.network_params("enc")

    @property
    def decoder_params(self) -> list[Tensor]:
        return self.network_params("dec")

    @property
    def discriminator_params(self) -> list[Tensor]:
        return self.network_params("disc")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def copy(self) -> "VaeGanModel":
        return VaeGanModel(self.arch, self.state_dict())

    # -- graph builders ---------------------------------------------------

    def _check_x(self, x: Tensor) -> Tensor:
        expected = (self.arch.channels, self.arch.sequence_length)
        if x.data.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if x.data.ndim != 3 or x.shape[1:] != expected:
            raise ShapeError(f"expected sequences of shape (batch, {expected[0]}, {expected[1]}), "
                             f"got {x.shape}")
        return x

    def _conv_stack(self, net: str, x: Tensor) -> list[Tensor]:
        acts = []
        h = x
        for i, layer in enumerate(self.arch.layers):
            h = ad.conv1d(h, self.params[f"{net}.conv{i}.w"], self.params[f"{net}.conv{i}.b"],
                          stride=layer.stride, padding=layer.padding)
            h = ad.ACTIVATIONS[self.arch.activations[i]](h)
            acts.append(h)
        return acts

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Posterior mean and clamped log-variance, each (batch, D)."""
        x = self._check_x(ad.as_tensor(x))
        h = self._conv_stack("enc", x)[-1]
        flat = ad.reshape(h, (h.shape[0], -1))
        mu = ad.dense(flat, self.params["enc.mu.w"], self.params["enc.mu.b"])
        logvar = ad.dense(flat, self.params["enc.logvar.w"], self.params["enc.logvar.b"])
        return mu, ad.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)

    def decode(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.data.ndim == 1:
            z = ad.reshape(z, (1, -1))
        if z.data.ndim != 2 or z.shape[1] != self.arch.latent_dims:
            raise ShapeError(f"expected latents of shape (batch, {self.arch.latent_dims}), "
                             f"got {z.shape}")
        arch = self.arch
        h = ad.relu(ad.dense(z, self.params["dec.fc.w"], self.params["dec.fc.b"]))
        h = ad.reshape(h, (z.shape[0], arch.layers[-1].out_channels, arch.stage_lengths[-1]))
        lengths = arch.stage_lengths
        for i in range(4):
            j = 3 - i
            layer = arch.layers[j]
            natural = ad.conv1d_transpose_output_length(lengths[j + 1], layer.kernel_size,
                                                        layer.stride, layer.padding)
            h = ad.conv1d_transpose(h, self.params[f"dec.deconv{i}.w"],
                                    self.params[f"dec.deconv{i}.b"], stride=layer.stride,
                                    padding=layer.padding, output_padding=lengths[j] - natural)
            act = arch.output_activation if i == 3 else arch.activations[j - 1]
            h = ad.ACTIVATIONS[act](h)
        return h

    def discriminate(self, x) -> tuple[Tensor, Tensor]:
        """(probability, layer-``feature_layer`` activations)."""
        x = self._check_x(ad.as_tensor(x))
        acts = self._conv_stack("disc", x)
        flat = ad.reshape(acts[-1], (x.shape[0], -1))
        logit = ad.dense(flat, self.params["disc.out.w"], self.params["disc.out.b"])
        prob = ad.sigmoid(ad.reshape(logit, (x.shape[0],)))
        return prob, acts[self.arch.feature_layer - 1]

    # -- numpy conveniences -------------------------------------------------

    def encode_mean(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mu = self.encode(x)[0].data
        return mu[0] if x.ndim == 2 else mu

    def generate(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out = self.decode(z).data
        return out[0] if z.ndim == 1 else out

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Dec(Enc-mean(x)), batch or single sequence."""
        x = np.asarray(x, dtype=np.float64)
        out = self.decode(self.encode(x)[0]).data
        return out[0] if x.ndim == 2 else out


def _net_order(name: str):
    net = name.split(".", 1)[0]
    return ({"enc": 0, "dec": 1, "disc": 2}[net], name)


# --- sampling and losses ----------------------------------------------------

def sample_latent(mu, logvar, rng: np.random.Generator, eps: np.ndarray | None = None):
    """Reparameterised draw ``mu + exp(logvar / 2) * eps``.

    Works on Tensors (keeps the graph) or plain arrays. ``logvar = -inf``
    yields exactly ``mu``.
    """
    if eps is None:
        eps = rng.standard_normal(np.shape(mu.data if isinstance(mu, Tensor) else mu))
    if isinstance(mu, Tensor) or isinstance(logvar, Tensor):
        mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
        if not np.all(np.isfinite(mu.data)) or np.any(np.isnan(logvar.data)):
            raise FloatingPointError("sample_latent: non-finite mu or logvar")
        std = ad.exp(ad.mul(ad.clip(logvar, -np.inf, LOGVAR_MAX), 0.5))
        return ad.add(mu, ad.mul(std, eps))
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if not np.all(np.isfinite(mu)) or np.any(np.isnan(logvar)):
        raise FloatingPointError("sample_latent: non-finite mu or logvar")
    return mu + np.exp(0.5 * np.minimum(logvar, LOGVAR_MAX)) * eps


def loss_prior(mu, logvar) -> Tensor:
    """KL(q(z|x) || N(0, I)) summed over latent dims, averaged over the batch."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if mu.data.ndim == 1:
        mu, logvar = ad.reshape(mu, (1, -1)), ad.reshape(logvar, (1, -1))
    logvar = ad.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    terms = 1.0 + logvar - ad.square(mu) - ad.exp(logvar)
    return ad.mul(ad.sum_all(terms), -0.5 / mu.shape[0])


def feature_distance(f_x, f_xbar) -> Tensor:
    """Mean squared difference between two feature tensors."""
    f_x, f_xbar = ad.as_tensor(f_x), ad.as_tensor(f_xbar)
    if f_x.shape != f_xbar.shape:
        raise ShapeError(f"feature shapes differ: {f_x.shape} vs {f_xbar.shape}")
    return ad.mean_all(ad.square(ad.sub(f_x, f_xbar)))


def loss_disl(model: VaeGanModel, x, x_bar) -> Tensor:
    """Reconstruction error measured in discriminator layer-l feature space."""
    x, x_bar = ad.as_tensor(x), ad.as_tensor(x_bar)
    if x.shape != x_bar.shape:
        raise ShapeError(f"loss_disl: shapes differ: {x.shape} vs {x_bar.shape}")
    return feature_distance(model.discriminate(x)[1], model.discriminate(x_bar)[1])


def _log_prob(p: Tensor) -> Tensor:
    return ad.log(ad.clip(p, PROB_EPS, 1.0 - PROB_EPS))


def _log_complement(p: Tensor) -> Tensor:
    return ad.log(ad.sub(1.0, ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)))


def gan_terms(p_real, p_recon, p_prior) -> tuple[Tensor, Tensor]:
    """(l_gan_star, l_gan) from discriminator probabilities on the three inputs."""
    p_real, p_recon, p_prior = (ad.as_tensor(p) for p in (p_real, p_recon, p_prior))
    star = ad.add(ad.mean_all(_log_prob(p_real)), ad.mean_all(_log_complement(p_prior)))
    return star, ad.add(star, ad.mean_all(_log_complement(p_recon)))


def loss_gan(model: VaeGanModel, x, x_recon, x_prior_gen) -> tuple[Tensor, Tensor]:
    p_real = model.discriminate(x)[0]
    p_recon = model.discriminate(x_recon)[0]
    p_prior = model.discriminate(x_prior_gen)[0]
    return gan_terms(p_real, p_recon, p_prior)


@dataclass
class LossBundle:
    l_prior: float
    l_disl: float
    l_gan_star: float
    l_gan: float
    beta: float = 1.0
    gamma: float = 100.0

    @property
    def total(self) -> float:
        return self.beta * self.l_prior + self.gamma * self.l_disl + self.l_gan

    @property
    def encoder_objective(self) -> float:
        return self.l_disl + self.beta * self.l_prior

    @property
    def decoder_objective(self) -> float:
        return self.gamma * self.l_disl + self.l_gan

    @property
    def discriminator_objective(self) -> float:
        return -self.l_gan


@dataclass
class Objectives:
    """Graph nodes of one forward pass through all three networks."""

    l_prior: Tensor
    l_disl: Tensor
    l_gan_star: Tensor
    l_gan: Tensor
    encoder: Tensor
    decoder: Tensor
    discriminator: Tensor
    x_recon: Tensor
    adversarial: Tensor

    def bundle(self, beta: float, gamma: float) -> LossBundle:
        return LossBundle(self.l_prior.item(), self.l_disl.item(), self.l_gan_star.item(),
                          self.l_gan.item(), beta, gamma)


def forward_objectives(model: VaeGanModel, x: np.ndarray, eps: np.ndarray,
                       z_prior: np.ndarray, beta: float, gamma: float,
                       gan_loss: str = "minimax") -> Objectives:
    """Build the full VAE/GAN graph for one batch.

    ``eps`` drives the reparameterised posterior draw and ``z_prior`` the
    prior sample; passing both makes the graph a deterministic function of
    the parameters.

    ``l_gan`` is the log-likelihood form (<= 0) that the discriminator
    ascends, so the discriminator objective is ``-l_gan`` and the decoder
    objective is ``gamma * l_disl + l_gan``. ``gan_loss="nonsaturating"``
    swaps the decoder's adversarial term for ``-log Disc(fake)``.
    """
    x_t = model._check_x(ad.as_tensor(x))
    b = x_t.shape[0]
    mu, logvar = model.encode(x_t)
    z = sample_latent(mu, logvar, None, eps=eps)
    x_recon = model.decode(z)
    x_prior = model.decode(z_prior)
    probs, feats = model.discriminate(ad.concat([x_t, x_recon, x_prior], axis=0))
    f_real = ad.slice_rows(feats, 0, b)
    f_recon = ad.slice_rows(feats, b, 2 * b)
    l_prior = loss_prior(mu, logvar)
    l_disl = feature_distance(f_real, f_recon)
    l_star, l_gan = gan_terms(ad.slice_rows(probs, 0, b), ad.slice_rows(probs, b, 2 * b),
                              ad.slice_rows(probs, 2 * b, 3 * b))
    if gan_loss == "minimax":
        adversarial = l_gan
    elif gan_loss == "nonsaturating":
        adversarial = ad.mul(ad.add(ad.mean_all(_log_prob(ad.slice_rows(probs, b, 2 * b))),
                                    ad.mean_all(_log_prob(ad.slice_rows(probs, 2 * b, 3 * b)))),
                             -1.0)
    else:
        raise ValueError(f"unknown gan_loss {gan_loss!r}")
    return Objectives(
        l_prior=l_prior, l_disl=l_disl, l_gan_star=l_star, l_gan=l_gan,
        encoder=ad.add(l_disl, ad.mul(l_prior, beta)),
        decoder=ad.add(ad.mul(l_disl, gamma), adversarial),
        discriminator=ad.mul(l_gan, -1.0),
        x_recon=x_recon,
        adversarial=adversarial,
    )


# --- checkpoints -----------------------------------------------------------

MAGIC = b"STGNCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a checkpoint (bad magic bytes)."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared content."""


class CheckpointChecksumError(CheckpointError):
    """The trailing CRC32 does not match the content."""


def checkpoint_bytes(model: VaeGanModel) -> bytes:
    arch = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(arch)), arch,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: VaeGanModel, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(buf: bytes) -> VaeGanModel:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a stimgen checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (arch_len,) = r.unpack("<I")
    arch_raw = r.take(arch_len)
    (n_params,) = r.unpack("<I")
    params = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CheckpointChecksumError("checkpoint CRC32 mismatch")
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    try:
        arch = ArchitectureSpec.from_dict(json.loads(arch_raw))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"unreadable architecture record: {exc}") from exc
    return VaeGanModel(arch, params)


def load_checkpoint(path) -> VaeGanModel:
    return model_from_bytes(Path(path).read_bytes())
