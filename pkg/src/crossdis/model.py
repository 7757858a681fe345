"""Networks for bidirectional translation with a split shared/exclusive latent.

Ten networks make up the model, grouped by domain:

==========  ===============================  ===========================
name        role                             attribute
==========  ===============================  ===========================
G_e         encoder for X                    ``encoders["X"]``
G_d         decoder producing Y images       ``decoders["Y"]``
G_d^X       exclusive decoder, E^X -> Y      ``exclusive_decoders["X"]``
F_e         encoder for Y                    ``encoders["Y"]``
F_d         decoder producing X images       ``decoders["X"]``
F_d^Y       exclusive decoder, E^Y -> X      ``exclusive_decoders["Y"]``
D^X, D^Y    conditional WGAN-GP critics      ``critics[d]``
D_z^X/Y     noise discriminators on E        ``noise_critics[d]``
==========  ===============================  ===========================

The X and Y pipelines share no weights.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DOMAINS = ("X", "Y")
FORMAT_VERSION = 1


def _domain(domain: str) -> str:
    if domain not in DOMAINS:
        raise ValueError(f"domain must be 'X' or 'Y', got {domain!r}")
    return domain


def other(domain: str) -> str:
    return "Y" if _domain(domain) == "X" else "X"


@dataclass(frozen=True)
class ArchConfig:
    resolution: int = 64
    encoder_widths: tuple = (64, 128, 256)
    shared_channels: int = 256
    exclusive_dim: int = 8
    decoder_widths: tuple = (256, 128, 64)
    dropout: float = 0.5
    dropout_layers: int = 2
    critic_widths: tuple = (64, 128, 256)
    noise_critic_widths: tuple = (64, 64)
    noise_std: float = 0.1

    def __post_init__(self):
        n_down = len(self.encoder_widths) + 1
        if self.resolution % (2 ** n_down):
            raise ValueError(f"resolution {self.resolution} not divisible by 2**{n_down}")
        if len(self.decoder_widths) + 1 != n_down:
            raise ValueError("decoder must upsample as many times as the encoder downsamples")

    @property
    def shared_size(self) -> int:
        return self.resolution // 2 ** (len(self.encoder_widths) + 1)

    @property
    def shared_shape(self) -> tuple:
        # channels-first, as torch sees it
        return (self.shared_channels, self.shared_size, self.shared_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK = ArchConfig()
PAPER = ArchConfig(
    resolution=256,
    encoder_widths=(64, 128, 256, 512),
    shared_channels=512,
    decoder_widths=(512, 256, 128, 64),
    dropout_layers=3,
)
ARCH_PRESETS = {"desk": DESK, "paper": PAPER}


class Representation(NamedTuple):
    shared: torch.Tensor
    exclusive: torch.Tensor


@dataclass(frozen=True)
class GrlSpec:
    lambda_grl: float = 1.0

    def __post_init__(self):
        if self.lambda_grl < 0:
            raise ValueError(f"lambda_grl must be nonnegative, got {self.lambda_grl}")


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_grl):
        ctx.lambda_grl = lambda_grl
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lambda_grl * grad_output, None


def grl(tensor: torch.Tensor, spec: GrlSpec = GrlSpec()) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lambda_grl``."""
    lam = spec.lambda_grl if isinstance(spec, GrlSpec) else GrlSpec(float(spec)).lambda_grl
    return _GradientReversal.apply(tensor, lam)


# --------------------------------------------------------------------------
# building blocks

class Encoder(nn.Module):
    """Stride-2 conv trunk with parallel shared (conv) and exclusive (FC) heads."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        layers, c_in = [], 3
        for width in cfg.encoder_widths:
            layers += [nn.Conv2d(c_in, width, 4, 2, 1), nn.BatchNorm2d(width), nn.LeakyReLU(0.2)]
            c_in = width
        self.trunk = nn.Sequential(*layers)
        self.shared_head = nn.Conv2d(c_in, cfg.shared_channels, 4, 2, 1)
        trunk_size = cfg.shared_size * 2
        self.exclusive_head = nn.Linear(c_in * trunk_size * trunk_size, cfg.exclusive_dim)

    def forward(self, image):
        h = self.trunk(image)
        return self.shared_head(h), self.exclusive_head(h.flatten(1))


class Decoder(nn.Module):
    """Fractionally strided conv stack ending in tanh; no skip connections."""

    def __init__(self, cfg: ArchConfig, in_channels: int):
        super().__init__()
        self.blocks = nn.ModuleList()
        c_in = in_channels
        for width in cfg.decoder_widths:
            self.blocks.append(nn.Sequential(nn.ConvTranspose2d(c_in, width, 4, 2, 1), nn.BatchNorm2d(width)))
            c_in = width
        self.out = nn.ConvTranspose2d(c_in, 3, 4, 2, 1)
        self.p_dropout = cfg.dropout
        self.dropout_layers = cfg.dropout_layers

    def forward(self, h, dropout: bool = False):
        for i, block in enumerate(self.blocks):
            h = block(h)
            if dropout and i < self.dropout_layers:
                h = F.dropout(h, self.p_dropout, training=True)
            h = F.relu(h)
        return torch.tanh(self.out(h))


class ExclusiveDecoder(nn.Module):
    """GRL, then a learned projection of E onto the shared grid, then a decoder."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.grid = cfg.shared_shape
        self.project = nn.Linear(cfg.exclusive_dim, int(np.prod(self.grid)))
        self.decoder = Decoder(cfg, cfg.shared_channels)

    def forward(self, exclusive, lambda_grl: float = 1.0, dropout: bool = False):
        h = self.project(grl(exclusive, GrlSpec(lambda_grl)))
        return self.decoder(h.view(-1, *self.grid), dropout)


class Critic(nn.Module):
    """Conditional WGAN-GP critic: unbounded scalar, no normalization layers."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        layers, c_in = [], 6
        for width in cfg.critic_widths:
            layers += [nn.Conv2d(c_in, width, 4, 2, 1), nn.LeakyReLU(0.2)]
            c_in = width
        self.features = nn.Sequential(*layers)
        size = cfg.resolution // 2 ** len(cfg.critic_widths)
        self.fc = nn.Linear(c_in * size * size, 1)

    def forward(self, candidate, condition):
        h = self.features(torch.cat([candidate, condition], dim=1))
        return self.fc(h.flatten(1)).squeeze(1)


class NoiseCritic(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        layers, c_in = [], cfg.exclusive_dim
        for width in cfg.noise_critic_widths:
            layers += [nn.Linear(c_in, width), nn.LeakyReLU(0.2)]
            c_in = width
        layers.append(nn.Linear(c_in, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, code):
        return self.net(code).squeeze(1)


# --------------------------------------------------------------------------

class CrossDomainModel(nn.Module):
    """All ten networks plus the latent bookkeeping around them.

    The ``training`` flags on :meth:`encode` and :meth:`decode` control the
    stochastic parts (encoder noise, decoder dropout). Batch normalization
    follows the usual ``.train()`` / ``.eval()`` module mode.
    """

    def __init__(self, cfg: ArchConfig = DESK):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleDict({d: Encoder(cfg) for d in DOMAINS})
        dec_in = cfg.shared_channels + cfg.exclusive_dim
        self.decoders = nn.ModuleDict({d: Decoder(cfg, dec_in) for d in DOMAINS})
        self.exclusive_decoders = nn.ModuleDict({d: ExclusiveDecoder(cfg) for d in DOMAINS})
        self.critics = nn.ModuleDict({d: Critic(cfg) for d in DOMAINS})
        self.noise_critics = nn.ModuleDict({d: NoiseCritic(cfg) for d in DOMAINS})

    NETWORKS = {
        "G_e": ("encoders", "X"),
        "G_d": ("decoders", "Y"),
        "G_d^X": ("exclusive_decoders", "X"),
        "F_e": ("encoders", "Y"),
        "F_d": ("decoders", "X"),
        "F_d^Y": ("exclusive_decoders", "Y"),
        "D^X": ("critics", "X"),
        "D^Y": ("critics", "Y"),
        "D_z^X": ("noise_critics", "X"),
        "D_z^Y": ("noise_critics", "Y"),
    }

    def network(self, name: str) -> nn.Module:
        group, domain = self.NETWORKS[name]
        return getattr(self, group)[domain]

    def generator_parameters(self):
        for group in ("encoders", "decoders", "exclusive_decoders"):
            yield from getattr(self, group).parameters()

    def critic_parameters(self):
        yield from self.critics.parameters()
        yield from self.noise_critics.parameters()

    # -- shape checks ------------------------------------------------------

    def _check_image(self, image, what="image"):
        r = self.cfg.resolution
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, r, r):
            raise ValueError(f"{what} must have shape (N, 3, {r}, {r}), got {tuple(image.shape)}")

    def _check_vector(self, v, what="vector"):
        if v.dim() != 2 or v.shape[1] != self.cfg.exclusive_dim:
            raise ValueError(f"{what} must have shape (N, {self.cfg.exclusive_dim}), got {tuple(v.shape)}")

    # -- operations --------------------------------------------------------

    def encode(self, image, domain: str, training: bool = False,
               noise_std: Optional[float] = None) -> Representation:
        """Split an image into (shared grid, exclusive vector).

        When ``training`` is set, N(0, noise_std) noise is added to the shared
        grid; ``noise_std`` defaults to the architecture's value.
        """
        self._check_image(image)
        shared, exclusive = self.encoders[_domain(domain)](image)
        std = self.cfg.noise_std if noise_std is None else noise_std
        if training and std > 0:
            shared = shared + std * torch.randn_like(shared)
        return Representation(shared, exclusive)

    def decode(self, shared, vector, domain: str, training: bool = False):
        """Decode into ``domain`` from a shared grid and an exclusive/noise vector."""
        if tuple(shared.shape[1:]) != self.cfg.shared_shape:
            raise ValueError(f"shared code must have shape (N, {self.cfg.shared_shape}), got {tuple(shared.shape)}")
        self._check_vector(vector, "exclusive/noise vector")
        if vector.shape[0] != shared.shape[0]:
            raise ValueError("shared code and vector batch sizes differ")
        s = self.cfg.shared_size
        tiled = vector[:, :, None, None].expand(-1, -1, s, s)
        return self.decoders[_domain(domain)](torch.cat([shared, tiled], dim=1), dropout=training)

    def exclusive_decode(self, exclusive, source_domain: str, lambda_grl: float = 1.0,
                         training: bool = False):
        """Try to render the opposite domain from ``source_domain``'s exclusive code."""
        self._check_vector(exclusive, "exclusive code")
        return self.exclusive_decoders[_domain(source_domain)](exclusive, lambda_grl, dropout=training)

    def discriminate(self, candidate, condition, target_domain: str):
        self._check_image(candidate, "candidate")
        self._check_image(condition, "condition")
        return self.critics[_domain(target_domain)](candidate, condition)

    def noise_logits(self, code, domain: str):
        self._check_vector(code, "code")
        return self.noise_critics[_domain(domain)](code)

    def discriminate_noise(self, code, domain: str):
        return torch.sigmoid(self.noise_logits(code, domain))

    def sample_noise(self, n: int, generator: Optional[torch.Generator] = None):
        return torch.randn(n, self.cfg.exclusive_dim, generator=generator)


# --------------------------------------------------------------------------
# checkpoint archive: zip of ``header.json`` plus one little-endian float32
# ``.npy`` per named tensor

class CheckpointMismatch(ValueError):
    pass


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.require(array, requirements="C"), allow_pickle=False)
    return buf.getvalue()


def write_archive(path, header: dict, tensors: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            if arr.dtype.kind == "f":
                arr = arr.astype("<f4")
            zf.writestr(f"{name}.npy", _npy_bytes(arr))
    tmp.replace(path)
    return path


def read_archive(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        for info in zf.infolist():
            if info.filename.endswith(".npy"):
                with zf.open(info) as fh:
                    tensors[info.filename[:-4]] = np.lib.format.read_array(io.BytesIO(fh.read()))
    return header, tensors


def model_tensors(model: CrossDomainModel) -> dict:
    """Parameters and BN buffers, keyed ``<network>/<path>``."""
    out = {}
    for net_name in CrossDomainModel.NETWORKS:
        for key, value in model.network(net_name).state_dict().items():
            out[f"{net_name}/{key}"] = value
    return out


def save_checkpoint(path, model: CrossDomainModel, training_step: int = 0, seed: int = 0,
                    extra_header: Optional[dict] = None, extra_tensors: Optional[dict] = None) -> Path:
    header = {
        "format_version": FORMAT_VERSION,
        "architecture_config": model.cfg.to_dict(),
        "fingerprint": model.cfg.fingerprint(),
        "training_step": int(training_step),
        "seed": int(seed),
    }
    header.update(extra_header or {})
    tensors = {f"model/{k}": v for k, v in model_tensors(model).items()}
    tensors.update(extra_tensors or {})
    return write_archive(path, header, tensors)


def load_model_tensors(model: CrossDomainModel, tensors: dict):
    for net_name in CrossDomainModel.NETWORKS:
        net = model.network(net_name)
        state = {}
        for key, ref in net.state_dict().items():
            name = f"model/{net_name}/{key}"
            if name not in tensors:
                raise CheckpointMismatch(f"checkpoint is missing tensor {name}")
            arr = tensors[name]
            if ref.dim() == 0 and arr.size == 1:
                arr = np.asarray(arr).reshape(())  # older archives stored scalars as shape (1,)
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointMismatch(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
            state[key] = torch.from_numpy(np.array(arr)).to(ref.dtype)
        net.load_state_dict(state)


def load_checkpoint(path, cfg: Optional[ArchConfig] = None):
    """Return ``(model, header, tensors)``.

    With ``cfg`` given, the checkpoint's architecture fingerprint must match it.
    """
    header, tensors = read_archive(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint format_version {header.get('format_version')}")
    stored = ArchConfig.from_dict(header["architecture_config"])
    if stored.fingerprint() != header.get("fingerprint"):
        raise CheckpointMismatch("checkpoint header fingerprint does not match its architecture_config")
    if cfg is not None and cfg.fingerprint() != stored.fingerprint():
        raise CheckpointMismatch(
            f"architecture fingerprint mismatch: checkpoint {stored.fingerprint()} vs config {cfg.fingerprint()}")
    model = CrossDomainModel(stored)
    load_model_tensors(model, tensors)
    model.eval()
    return model, header, tensors


def image_to_tensor(images) -> torch.Tensor:
    """``N x H x W x 3`` array in [-1, 1] to a channels-first float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)
