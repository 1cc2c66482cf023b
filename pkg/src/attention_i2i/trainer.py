"""Alternating discriminator / generator training with EMA, ablation modes and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import ConfigurationError
from .checkpoint import config_digest, read_checkpoint, write_checkpoint
from .data import BoundingBox, DatasetSpec, UnpairedImageFolder, rasterize_object_mask
from .local_global import BankSet, LocalGlobalConfig, MomentumPair, ema_update, local_global_loss
from .losses import (MODE_COMPONENTS, InfoNCEConfig, LossReport, adversarial_loss_d,
                     adversarial_loss_g, generator_objective, patch_nce_loss, saliency_loss)
from .networks import (Discriminator, GeneratorConfig, TranslationModel, compose, encode,
                       generate_attention, generate_content, init_weights, predict_saliency)

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ["iteration", "adv_d", "adv_g", "nce_patch", "l_ga", "saliency", "total"]


@dataclass
class TrainConfig:
    mode: str = "unsupervised"
    epochs: int = 30
    max_iters: int | None = None
    lr: float = 1e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    batch_size: int = 1
    seed: int = 0
    smallest_side: int = 64
    checkpoint_every: int = 500
    log_every: int = 50
    tau: float = 0.07
    num_patches: int = 256
    loss_weights: dict = field(default_factory=lambda: {"adv": 1.0, "nce": 1.0, "ga": 1.0})
    saturating_gan: bool = False
    lg_warmup_iters: int = 0

    def __post_init__(self):
        if self.mode not in MODE_COMPONENTS:
            raise ConfigurationError(f"mode must be one of {sorted(MODE_COMPONENTS)}, got {self.mode!r}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size=1 is supported")
        if self.epochs < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigurationError("epochs, checkpoint_every and log_every must be >= 1")
        InfoNCEConfig(self.tau)


def _asdict(cfg) -> dict:
    return json_ready(dataclasses.asdict(cfg))


def json_ready(obj):
    if isinstance(obj, dict):
        return {k: json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


class TrainingState:
    """Every piece of mutable training state: networks, momentum copy, banks, optimizers, RNG."""

    def __init__(self, train_cfg: TrainConfig, gen_cfg: GeneratorConfig | None = None,
                 lg_cfg: LocalGlobalConfig | None = None):
        self.train_cfg = train_cfg
        self.gen_cfg = gen_cfg or GeneratorConfig()
        self.lg_cfg = lg_cfg or LocalGlobalConfig()
        torch.manual_seed(train_cfg.seed)
        self.model = TranslationModel(self.gen_cfg)
        self.disc = Discriminator(self.gen_cfg.disc_width)
        init_weights(self.disc)
        self.pair = MomentumPair(self.model.contrastive_branch(), self.lg_cfg.m_coeff)
        self.banks = BankSet(len(self.lg_cfg.weights), self.lg_cfg.bank_capacity, self.gen_cfg.embed_dim)
        betas = (train_cfg.adam_beta1, train_cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=train_cfg.lr, betas=betas)
        self.draw = np.random.default_rng([train_cfg.seed, 1])
        self.iteration = 0

    # ------------------------------------------------------------ serialization

    def config(self) -> dict:
        return {"train": _asdict(self.train_cfg), "model": _asdict(self.gen_cfg),
                "local_global": _asdict(self.lg_cfg)}

    def digest(self) -> str:
        return config_digest(self.config())

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, module in (("model", self.model), ("disc", self.disc),
                               ("momentum", self.pair.momentum)):
            for k, v in module.state_dict().items():
                out[f"{prefix}.{k}"] = v
        for prefix, opt, module in (("opt_g", self.opt_g, self.model), ("opt_d", self.opt_d, self.disc)):
            names = {id(p): n for n, p in module.named_parameters()}
            for group in opt.param_groups:
                for p in group["params"]:
                    for k, v in opt.state.get(p, {}).items():
                        out[f"{prefix}.{names[id(p)]}.{k}"] = torch.as_tensor(v)
        for k, v in self.banks.state_dict().items():
            out[f"bank.{k}"] = v["queue"]
        return out

    def meta(self) -> dict:
        return {
            "iteration": self.iteration,
            "config": self.config(),
            "config_digest": self.digest(),
            "rng_state": self.draw.bit_generator.state,
            "banks": {k: {"size": v["size"], "cursor": v["cursor"]}
                      for k, v in self.banks.state_dict().items()},
        }

    def load_tensors(self, tensors: dict[str, torch.Tensor], meta: dict) -> None:
        for prefix, module in (("model", self.model), ("disc", self.disc),
                               ("momentum", self.pair.momentum)):
            sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sd, strict=True)
        for prefix, opt, module in (("opt_g", self.opt_g, self.model), ("opt_d", self.opt_d, self.disc)):
            for name, p in module.named_parameters():
                state = {}
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    full = f"{prefix}.{name}.{key}"
                    if full in tensors:
                        state[key] = tensors[full].clone()
                if state:
                    opt.state[p] = state
        self.banks.load_state_dict({
            k: {"queue": tensors[f"bank.{k}"], **v} for k, v in meta["banks"].items()})
        self.draw.bit_generator.state = meta["rng_state"]
        self.iteration = int(meta["iteration"])


@dataclass
class Checkpoint:
    path: Path
    iteration: int
    config_digest: str
    state: TrainingState | None = None


def save_checkpoint(state: TrainingState, path: Path) -> Checkpoint:
    write_checkpoint(path, state.tensors(), state.meta())
    return Checkpoint(Path(path), state.iteration, state.digest(), state)


def load_checkpoint(path: Path, expected_digest: str | None = None, force: bool = False) -> TrainingState:
    tensors, manifest = read_checkpoint(path, expected_digest, force)
    cfg = manifest["config"]
    lg = dict(cfg["local_global"])
    lg["stage_weights"] = tuple(lg["stage_weights"])
    state = TrainingState(TrainConfig(**cfg["train"]), GeneratorConfig(**cfg["model"]),
                          LocalGlobalConfig(**lg))
    state.load_tensors(tensors, manifest)
    return state


# ---------------------------------------------------------------- training

def generate(x: torch.Tensor, model: TranslationModel, mode: str):
    """Generator forward for a training mode. Returns ``(fake, masks, logits)``."""
    m_e, _ = encode(x, model)
    contents = generate_content(m_e, model)
    if mode == "no_attention":
        return contents[:, 0], None, None
    masks, logits, _ = generate_attention(m_e, model)
    return compose(x, contents, masks), masks, logits


def _finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"loss component {name} is not finite")
    return value


def train_step(batch, state: TrainingState, cfg: TrainConfig | None = None) -> tuple[TrainingState, LossReport]:
    """One D update followed by one G update (and an EMA update in unsupervised mode)."""
    cfg = cfg or state.train_cfg
    image_a, image_b, boxes_a = batch
    x = image_a if image_a.ndim == 4 else image_a[None]
    y = image_b if image_b.ndim == 4 else image_b[None]
    model, disc = state.model, state.disc

    # discriminator
    with torch.no_grad():
        fake, _, _ = generate(x, model, cfg.mode)
    disc.requires_grad_(True)
    loss_d = _finite("adv_d", adversarial_loss_d(disc(y), disc(fake)))
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    # generator
    disc.requires_grad_(False)
    fake, masks, logits = generate(x, model, cfg.mode)
    parts = {
        "adv_g": _finite("adv_g", adversarial_loss_g(disc(fake), cfg.saturating_gan)),
        "nce_patch": _finite("nce_patch", patch_nce_loss(x, fake, model, cfg.tau, state.draw,
                                                          cfg.num_patches)),
    }
    if cfg.mode == "unsupervised":
        if state.iteration >= cfg.lg_warmup_iters:
            l_ga, _ = local_global_loss(x[0], state.pair, state.banks, state.lg_cfg, state.draw)
        else:
            l_ga = torch.zeros(())
        parts["l_ga"] = _finite("l_ga", l_ga)
    elif cfg.mode == "supervised":
        if boxes_a is None:
            raise ConfigurationError("supervised mode needs object annotations for domain A")
        k_x = rasterize_object_mask(boxes_a, x.shape[-2], x.shape[-1])[None]
        parts["saliency"] = _finite("saliency", saliency_loss(predict_saliency(logits, model), k_x))
    report = generator_objective(parts, cfg.mode, cfg.loss_weights)
    state.opt_g.zero_grad(set_to_none=True)
    report.total.backward()
    state.opt_g.step()
    disc.requires_grad_(True)

    if cfg.mode == "unsupervised":
        ema_update(state.pair)
    state.iteration += 1
    report.adv_d = float(loss_d.detach())
    return state, report


def crop_to_multiple(image: torch.Tensor, boxes: list[BoundingBox] | None, factor: int = 4):
    """Center-crop so both spatial sides are divisible by ``factor``; shifts boxes to match."""
    h, w = image.shape[-2:]
    nh, nw = h - h % factor, w - w % factor
    top, left = (h - nh) // 2, (w - nw) // 2
    if (nh, nw) == (h, w):
        return image, boxes
    image = image[..., top:top + nh, left:left + nw]
    if boxes is not None:
        boxes = [b.shift(-left, -top).clip(nh, nw) for b in boxes]
        boxes = [b for b in boxes if not b.is_degenerate]
    return image, boxes


def history_row(iteration: int, report: LossReport) -> dict:
    s = report.scalars()
    return {"iteration": iteration, **{k: (f"{s[k]:.8g}" if k in s else "") for k in HISTORY_FIELDS[1:]}}


def fit(dataset: DatasetSpec, cfg: TrainConfig, out_dir: Path, gen_cfg: GeneratorConfig | None = None,
        lg_cfg: LocalGlobalConfig | None = None, resume: Path | None = None,
        stop_at: int | None = None) -> Checkpoint:
    """Train for ``cfg.epochs`` epochs (or ``cfg.max_iters`` iterations) and return the final checkpoint.

    Writes ``checkpoints/iter_XXXXXXX`` every ``checkpoint_every`` iterations,
    ``final/`` at the end and a ``loss_history.csv``. ``stop_at`` ends the run early
    (used to simulate interruption).
    """
    out_dir = Path(out_dir)
    spec = dataclasses.replace(dataset, image_size=cfg.smallest_side)
    folder = UnpairedImageFolder(spec)
    if cfg.mode == "supervised" and folder.annotations is None:
        raise ConfigurationError("mode 'supervised' requires an annotations file for domain A")

    if resume is not None:
        state = load_checkpoint(resume)
        if state.digest() != TrainingState(cfg, gen_cfg, lg_cfg).digest():
            raise ConfigurationError("resume checkpoint was written with a different configuration")
    else:
        state = TrainingState(cfg, gen_cfg, lg_cfg)

    steps_per_epoch = len(folder)
    total = cfg.max_iters if cfg.max_iters is not None else steps_per_epoch * cfg.epochs
    end = total if stop_at is None else min(total, stop_at)

    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "loss_history.csv"
    if resume is None or not history_path.exists():
        with open(history_path, "w", newline="") as fh:
            csv.DictWriter(fh, HISTORY_FIELDS).writeheader()
    else:
        _truncate_history(history_path, state.iteration)

    with open(history_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, HISTORY_FIELDS)
        while state.iteration < end:
            epoch, offset = divmod(state.iteration, steps_per_epoch)
            for i, sample in enumerate(folder.iter_epoch(cfg.seed, epoch)):
                if i < offset:
                    continue
                if state.iteration >= end:
                    break
                image_a, boxes_a = crop_to_multiple(sample.image_a, sample.boxes_a)
                image_b, _ = crop_to_multiple(sample.image_b, None)
                state, report = train_step((image_a, image_b, boxes_a), state, cfg)
                writer.writerow(history_row(state.iteration, report))
                if state.iteration % cfg.log_every == 0:
                    fh.flush()
                    logger.info("iter %d %s", state.iteration,
                                " ".join(f"{k}={v:.4f}" for k, v in report.scalars().items()))
                if state.iteration % cfg.checkpoint_every == 0:
                    save_checkpoint(state, out_dir / "checkpoints" / f"iter_{state.iteration:07d}")
    return save_checkpoint(state, out_dir / "final")


def _truncate_history(path: Path, iteration: int) -> None:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) <= iteration]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, HISTORY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_history(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v not in ("", None) else None) for k, v in row.items()}
                for row in csv.DictReader(fh)]
