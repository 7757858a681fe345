"""Joint end-to-end training of both translation directions.

One :func:`train_step` runs ``n_critic`` critic updates (conditional WGAN-GP
critics plus the exclusive-code noise discriminators) followed by a single
generator/encoder update on the weighted total loss.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import datagen
from .losses import (REPORT_TERMS, LossReport, LossWeights, TrainingDivergence, check_finite,
                     cross_autoencoder_loss, gradient_norms, latent_recon_loss,
                     noise_gen_loss_from_logits, noise_match_losses_from_logits,
                     shared_loss, total_loss, wgan_gen_loss,
                     wgan_gp_disc_loss)
from .model import (DESK, PAPER, ArchConfig, CrossDomainModel, image_to_tensor,
                    load_checkpoint, load_model_tensors, read_archive, save_checkpoint)

log = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class AblationFlags:
    disable_cross_autoencoder: bool = False
    use_normal_autoencoder: bool = False
    disable_grl: bool = False
    disable_encoder_noise: bool = False
    disable_shared_loss: bool = False
    disable_latent_recon: bool = False

    def __post_init__(self):
        if self.disable_cross_autoencoder and self.use_normal_autoencoder:
            raise ValueError("disable_cross_autoencoder and use_normal_autoencoder are mutually exclusive")


# column names of the ablation table, in order
ABLATIONS = {
    "full": {},
    "no-auto": {"disable_cross_autoencoder": True},
    "normal-auto": {"use_normal_autoencoder": True},
    "no-grl": {"disable_grl": True},
    "no-noise": {"disable_encoder_noise": True},
    "no-ls": {"disable_shared_loss": True},
    "no-recon": {"disable_latent_recon": True},
}
ABLATION_TITLES = {
    "full": "Full", "no-auto": "No auto.", "normal-auto": "Normal auto.", "no-grl": "No GRL",
    "no-noise": "No noise", "no-ls": "No L_S", "no-recon": "No L_recon",
}


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    lambda_grl: float = 1.0
    learning_rate: float = 2e-4
    adam_betas: tuple = (0.5, 0.999)
    batch_size: int = 16
    epochs: int = 15
    n_critic: int = 1
    resolution: int = 64
    seed: int = 0
    ablation: AblationFlags = AblationFlags()
    dataset_ref: str = "mnist-cdcb"
    # number of training pairs to use; None means the whole split
    train_count: Optional[int] = None
    # adversarial loss for the exclusive decoders: "wgan" or "gan"
    exclusive_adversarial: str = "wgan"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.n_critic < 1:
            raise ValueError("batch_size, epochs and n_critic must all be >= 1")
        if self.lambda_grl < 0:
            raise ValueError("lambda_grl must be nonnegative")
        if self.exclusive_adversarial not in ("wgan", "gan"):
            raise ValueError("exclusive_adversarial must be 'wgan' or 'gan'")
        if self.train_count is not None and self.train_count < 1:
            raise ValueError("train_count must be >= 1")

    def arch(self) -> ArchConfig:
        if self.resolution == PAPER.resolution:
            return PAPER
        return replace(DESK, resolution=self.resolution)

    def to_flat_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                out.update(dataclasses.asdict(value))
            elif isinstance(value, tuple):
                out[f.name] = list(value)
            else:
                out[f.name] = value
        return out

    @classmethod
    def valid_keys(cls) -> list:
        keys = []
        for f in fields(cls):
            if f.name == "weights":
                keys += [w.name for w in fields(LossWeights)]
            elif f.name == "ablation":
                keys += [a.name for a in fields(AblationFlags)]
            else:
                keys.append(f.name)
        return keys

    @classmethod
    def from_flat_dict(cls, d: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """Build a config from flat key/value pairs; unknown keys raise ``KeyError``."""
        base = base or cls()
        unknown = sorted(set(d) - set(cls.valid_keys()))
        if unknown:
            raise KeyError(f"unknown config keys {unknown}; valid keys: {', '.join(cls.valid_keys())}")
        weight_keys = {w.name for w in fields(LossWeights)}
        flag_keys = {a.name for a in fields(AblationFlags)}
        weights = replace(base.weights, **{k: float(v) for k, v in d.items() if k in weight_keys})
        ablation = replace(base.ablation, **{k: bool(v) for k, v in d.items() if k in flag_keys})
        top = {k: v for k, v in d.items() if k not in weight_keys | flag_keys}
        if "adam_betas" in top:
            top["adam_betas"] = tuple(float(b) for b in top["adam_betas"])
        return replace(base, weights=weights, ablation=ablation, **top)


PRESETS = {
    "desk": TrainConfig(),
    "paper": TrainConfig(resolution=256, train_count=50000),
}


def load_config_file(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    return TrainConfig.from_flat_dict(json.loads(Path(path).read_text()), base)


def build_ablation_suite(base: TrainConfig) -> list:
    """Full model plus the six single-component ablations, all on the base seed."""
    return [replace(base, ablation=AblationFlags(**flags)) for flags in ABLATIONS.values()]


def ablation_name(config: TrainConfig) -> str:
    flags = {k: v for k, v in dataclasses.asdict(config.ablation).items() if v}
    for name, wanted in ABLATIONS.items():
        if flags == wanted:
            return name
    return "custom"


def active_terms(flags: AblationFlags) -> set:
    active = {"L_GAN_X", "L_GAN_Y", "L_ex_X", "L_ex_Y", "L_S", "L_auto_X", "L_auto_Y",
              "L_recon_X", "L_recon_Y"}
    if flags.disable_cross_autoencoder:
        active -= {"L_auto_X", "L_auto_Y"}
    if flags.disable_shared_loss:
        active.discard("L_S")
    if flags.disable_latent_recon:
        active -= {"L_recon_X", "L_recon_Y"}
    return active


# --------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    model: CrossDomainModel
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0


def init_state(config: TrainConfig, arch: Optional[ArchConfig] = None) -> TrainState:
    torch.manual_seed(config.seed)
    model = CrossDomainModel(arch or config.arch())
    model.train()
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.learning_rate, betas=config.adam_betas)
    opt_d = torch.optim.Adam(model.critic_parameters(), lr=config.learning_rate, betas=config.adam_betas)
    return TrainState(model, opt_g, opt_d)


def _param_names(model):
    return {id(p): name for name, p in model.named_parameters()}


def _optimizer_tensors(prefix, opt, names):
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            base = f"{prefix}/{names[id(p)]}"
            out[f"{base}/exp_avg"] = st["exp_avg"]
            out[f"{base}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"{base}/step"] = np.array([float(st["step"])], dtype=np.float32)
    return out


def _restore_optimizer(prefix, opt, names, tensors):
    for group in opt.param_groups:
        for p in group["params"]:
            base = f"{prefix}/{names[id(p)]}"
            if f"{base}/exp_avg" not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{base}/step"][0])),
                "exp_avg": torch.from_numpy(np.array(tensors[f"{base}/exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(tensors[f"{base}/exp_avg_sq"])),
            }


def save_train_state(path, state: TrainState, config: TrainConfig) -> Path:
    names = _param_names(state.model)
    extra = _optimizer_tensors("opt_g", state.opt_g, names)
    extra.update(_optimizer_tensors("opt_d", state.opt_d, names))
    extra["rng/torch"] = torch.get_rng_state().numpy()
    header = {"epoch": state.epoch, "train_config": config.to_flat_dict()}
    return save_checkpoint(path, state.model, state.step, config.seed, header, extra)


def load_train_state(path, config: Optional[TrainConfig] = None, arch: Optional[ArchConfig] = None):
    """Restore a :class:`TrainState` (and the torch RNG) from a checkpoint."""
    header, tensors = read_archive(path)
    stored = TrainConfig.from_flat_dict(header["train_config"])
    config = config or stored
    stored_arch = ArchConfig.from_dict(header["architecture_config"])
    if stored_arch.fingerprint() != (arch or config.arch()).fingerprint():
        from .model import CheckpointMismatch
        raise CheckpointMismatch("checkpoint architecture does not match the training config")
    state = init_state(config, stored_arch)
    load_model_tensors(state.model, tensors)
    names = _param_names(state.model)
    _restore_optimizer("opt_g", state.opt_g, names, tensors)
    _restore_optimizer("opt_d", state.opt_d, names, tensors)
    state.step = int(header["training_step"])
    state.epoch = int(header.get("epoch", 0))
    if "rng/torch" in tensors:
        torch.set_rng_state(torch.from_numpy(np.array(tensors["rng/torch"], dtype=np.uint8)))
    state.model.train()
    return state, config


def export_model(src, dest) -> Path:
    """Copy a training checkpoint without its optimizer and RNG state."""
    model, header, _ = load_checkpoint(src)
    extra = {k: header[k] for k in ("epoch", "train_config") if k in header}
    return save_checkpoint(dest, model, header["training_step"], header["seed"], extra)


# --------------------------------------------------------------------------
# one step

def _set_requires_grad(params, flag: bool):
    for p in params:
        p.requires_grad_(flag)


def _translate(model, x, y, noise: bool):
    rx = model.encode(x, "X", training=noise)
    ry = model.encode(y, "Y", training=noise)
    zx = model.sample_noise(x.shape[0])
    zy = model.sample_noise(y.shape[0])
    fake_y = model.decode(rx.shared, zx, "Y", training=True)
    fake_x = model.decode(ry.shared, zy, "X", training=True)
    return rx, ry, zx, zy, fake_y, fake_x


def critic_update(state: TrainState, x, y, config: TrainConfig) -> dict:
    """One update of D^X, D^Y (WGAN-GP) and D_z^X, D_z^Y (original GAN loss)."""
    model = state.model
    noise = not config.ablation.disable_encoder_noise
    _set_requires_grad(model.critic_parameters(), True)
    with torch.no_grad():
        rx, ry, _, _, fake_y, fake_x = _translate(model, x, y, noise)
    lam = config.weights.lambda_gp
    terms = {}
    # critic for domain d sees candidates in d conditioned on the paired image in the other domain
    for d, real, fake, cond in (("Y", y, fake_y, x), ("X", x, fake_x, y)):
        critic = model.critics[d]
        norms = gradient_norms(critic, real, fake, cond)
        terms[f"L_D_{d}"] = wgan_gp_disc_loss(critic(real, cond), critic(fake, cond), norms, lam)
    for d, code in (("X", rx.exclusive), ("Y", ry.exclusive)):
        z = model.sample_noise(code.shape[0])
        disc, _ = noise_match_losses_from_logits(model.noise_logits(code, d), model.noise_logits(z, d))
        terms[f"L_Dz_{d}"] = disc
    check_finite(terms, DIVERGENCE_BOUND)
    state.opt_d.zero_grad(set_to_none=True)
    sum(terms.values()).backward()
    state.opt_d.step()
    return {k: float(v.detach()) for k, v in terms.items()}


def generator_terms(model: CrossDomainModel, x, y, config: TrainConfig) -> dict:
    """Every generator-side loss term for one batch, as differentiable scalars.

    Terms are indexed by the source domain of the translation module:
    ``L_GAN_X`` is the adversarial loss of the X->Y translator (critic D^Y)
    plus the noise-matching loss on E^X.
    """
    flags = config.ablation
    noise = not flags.disable_encoder_noise
    lambda_grl = 0.0 if flags.disable_grl else config.lambda_grl
    rx, ry, zx, zy, fake_y, fake_x = _translate(model, x, y, noise)

    t = {}
    for d, r, fake, cond in (("X", rx, fake_y, x), ("Y", ry, fake_x, y)):
        target = "Y" if d == "X" else "X"
        dz_gen = noise_gen_loss_from_logits(model.noise_logits(r.exclusive, d))
        t[f"L_GAN_{d}"] = wgan_gen_loss(model.discriminate(fake, cond, target)) + dz_gen
        ex_fake = model.exclusive_decode(r.exclusive, d, lambda_grl, training=True)
        score = model.discriminate(ex_fake, cond, target)
        if config.exclusive_adversarial == "wgan":
            t[f"L_ex_{d}"] = wgan_gen_loss(score)
        else:
            t[f"L_ex_{d}"] = F.softplus(-score).mean()

    t["L_S"] = shared_loss(rx.shared, ry.shared)

    # re-encode translations without encoder noise
    t["L_recon_X"] = latent_recon_loss(rx.shared, zx, model.encode(fake_y, "Y", training=False))
    t["L_recon_Y"] = latent_recon_loss(ry.shared, zy, model.encode(fake_x, "X", training=False))

    if flags.use_normal_autoencoder:
        x_rec = model.decode(rx.shared, rx.exclusive, "X", training=True)
        y_rec = model.decode(ry.shared, ry.exclusive, "Y", training=True)
    else:
        x_rec = model.decode(ry.shared, rx.exclusive, "X", training=True)
        y_rec = model.decode(rx.shared, ry.exclusive, "Y", training=True)
    t["L_auto_X"] = cross_autoencoder_loss(x, x_rec)
    t["L_auto_Y"] = cross_autoencoder_loss(y, y_rec)
    return t


def generator_update(state: TrainState, x, y, config: TrainConfig):
    model = state.model
    _set_requires_grad(model.critic_parameters(), False)
    try:
        terms = generator_terms(model, x, y, config)
        total = total_loss(terms, config.weights, active_terms(config.ablation))
        check_finite({"total": total}, DIVERGENCE_BOUND)
        state.opt_g.zero_grad(set_to_none=True)
        if isinstance(total, torch.Tensor) and total.requires_grad:
            total.backward()
        state.opt_g.step()
    finally:
        _set_requires_grad(model.critic_parameters(), True)
    return {k: float(v.detach()) for k, v in terms.items()}, float(total.detach() if isinstance(total, torch.Tensor) else total)


def train_step(state: TrainState, x, y, config: TrainConfig):
    """``n_critic`` critic updates, then one generator update.

    ``x`` and ``y`` are paired NCHW batches in [-1, 1].
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    state.model.train()
    critic_terms = {}
    for _ in range(config.n_critic):
        critic_terms = critic_update(state, x, y, config)
    gen_terms, total = generator_update(state, x, y, config)
    state.step += 1
    return state, LossReport({**gen_terms, **critic_terms}, total)


# --------------------------------------------------------------------------
# full run

def resolve_dataset(config: TrainConfig, split_name: str = "train") -> datagen.DatasetSplit:
    ref = config.dataset_ref
    if ref == "mnist-cdcb":
        return datagen.mnist_cdcb(split_name, config.seed, None, config.resolution)
    path = Path(ref)
    if path.is_file() and path.suffix == ".npz":
        return datagen.mnist_cdcb(split_name, config.seed, None, config.resolution, str(path))
    if path.is_dir():
        sub = path / split_name
        return datagen.load_paired_directory(sub if sub.is_dir() else path, config.resolution)
    raise FileNotFoundError(f"dataset not found: {ref}")


def split_tensors(split: datagen.DatasetSplit):
    x = image_to_tensor(datagen.to_model_range(split.images("X")))
    y = image_to_tensor(datagen.to_model_range(split.images("Y")))
    return x, y


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(config: TrainConfig, out_dir, split: Optional[datagen.DatasetSplit] = None,
          resume: Optional[str] = None, log_every: int = 50,
          arch: Optional[ArchConfig] = None) -> Path:
    """Train from scratch (or resume) and return the final checkpoint path.

    Writes ``checkpoints/epoch_NNN.ckpt`` after every epoch, one JSON line per
    step to ``metrics.jsonl`` and ``summary.json`` at the end.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_flat_dict(), indent=1))
    if split is None:
        split = resolve_dataset(config, "train")
    if config.train_count is not None:
        if config.train_count > len(split):
            log.warning("train_count %d exceeds the %d available pairs", config.train_count, len(split))
        split = split.subset(config.train_count)
    if len(split) == 0:
        raise ValueError("training split is empty")
    x_all, y_all = split_tensors(split)

    if resume:
        state, _ = load_train_state(resume, config, arch)
    else:
        state = init_state(config, arch)
    first_epoch_reports, last_epoch_reports = [], []
    ckpt = None
    with open(out / "metrics.jsonl", "a") as metrics:
        for epoch in range(state.epoch, config.epochs):
            t0 = time.time()
            last_epoch_reports = []
            for idx in epoch_batches(len(split), config.batch_size, config.seed, epoch):
                ix = torch.from_numpy(idx)
                state, report = train_step(state, x_all[ix], y_all[ix], config)
                row = {"step": state.step, "epoch": epoch, **report.to_dict(), "wall_clock": time.time()}
                metrics.write(json.dumps(row) + "\n")
                metrics.flush()
                last_epoch_reports.append(report.to_dict())
                if epoch == 0:
                    first_epoch_reports.append(report.to_dict())
                if log_every and state.step % log_every == 0:
                    log.info("step %d epoch %d total %.4f L_S %.4f", state.step, epoch, report.total,
                             report.terms["L_S"])
            state.epoch = epoch + 1
            ckpt = save_train_state(out / "checkpoints" / f"epoch_{epoch + 1:03d}.ckpt", state, config)
            log.info("epoch %d done in %.1fs -> %s", epoch + 1, time.time() - t0, ckpt)

    def _mean(reports):
        keys = list(REPORT_TERMS) + ["total"]
        return {k: float(np.mean([r[k] for r in reports])) for k in keys} if reports else {}

    summary = {
        "steps": state.step,
        "epochs": config.epochs,
        "train_pairs": len(split),
        "first_step": first_epoch_reports[0] if first_epoch_reports else None,
        "first_epoch_mean": _mean(first_epoch_reports),
        "final_epoch_mean": _mean(last_epoch_reports),
        "final_checkpoint": str(ckpt) if ckpt else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    if ckpt is None:
        ckpt = out / "checkpoints" / f"epoch_{state.epoch:03d}.ckpt"
    return ckpt
