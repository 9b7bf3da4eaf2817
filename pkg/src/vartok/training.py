"""Optimization loop, curriculum wiring, and checkpoint plumbing.

One logical thread of execution: each step draws a token count from the
folded-normal curriculum, samples a batch, unrolls the autoregressive loop
and takes one Adam step on the variant's objective. All randomness flows
through two private torch generators whose states are checkpointed, so an
interrupted run resumed from a checkpoint is bitwise identical to an
uninterrupted one.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import FORMAT_VERSION, CheckpointError, load_archive, save_archive
from .codec import Codec, CodecConfig, build_codec
from .core import ContractViolation, NumericError
from .data import ImageDataset, ingest_dataset
from .loop import run
from .losses import LossBreakdown, combined_loss, vanilla_loss
from .sampler import SamplerState, sample_token_count

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "masked")


@dataclass
class TrainConfig:
    variant: str = "vanilla"
    codec: CodecConfig = field(default_factory=CodecConfig)
    n_min: int | None = None  # defaults: 1 vanilla, 2 masked
    n_cap: int = 5
    mu_start: float | None = None  # defaults to n_min
    mu_end: float | None = None  # defaults to n_cap
    sigma: float = 1.0
    lr: float = 1e-4
    lr_end: float | None = None  # cosine-decay target; None keeps lr constant
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 16
    total_steps: int = 1000
    seed: int = 0
    image_size: int = 32
    data_root: str = ""
    checkpoint_every: int = 0  # 0 = final checkpoint only
    lambda_mask: float = 1.0
    detach_steps: bool = False
    grad_clip: float = 0.0  # max gradient norm; 0 disables clipping
    horizon_penalty: float = 0.0  # weight on the post-final-step response penalty

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractViolation(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_min is None:
            self.n_min = 1 if self.variant == "vanilla" else 2
        if self.variant == "masked":
            if self.n_min < 2:
                raise ContractViolation("masked training starts at two tokens; n_min must be >= 2")
            self.codec = dataclasses.replace(self.codec, mask_enabled=True)
        if self.n_min < 1 or self.n_min > self.n_cap:
            raise ContractViolation("require 1 <= n_min <= n_cap")
        if self.mu_start is None:
            self.mu_start = float(self.n_min)
        if self.mu_end is None:
            self.mu_end = float(self.n_cap)
        if self.mu_start > self.mu_end:
            raise ContractViolation("mu_start must not exceed mu_end")
        if self.sigma < 0:
            raise ContractViolation("sigma must be nonnegative")
        if self.lr_end is not None and self.lr_end < 0:
            raise ContractViolation("lr_end must be nonnegative")
        if self.horizon_penalty < 0:
            raise ContractViolation("horizon_penalty must be nonnegative")
        if self.horizon_penalty > 0 and self.variant == "masked":
            raise ContractViolation(
                "horizon_penalty is only defined for the vanilla variant; the masked "
                "encoder consumes precursor outputs, not raw residuals")
        if self.total_steps < 0:
            raise ContractViolation("total_steps must be nonnegative")
        if self.image_size % self.codec.stride:
            raise ContractViolation(
                f"image_size {self.image_size} not divisible by codec stride {self.codec.stride}")


@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict[str, torch.Tensor]
    optimizer_moments: dict[str, torch.Tensor]
    optimizer_steps: dict[str, float]
    rng_states: dict[str, str]  # generator name -> hex bytes
    global_step: int
    format_version: int = FORMAT_VERSION


# -- config <-> flat manifest ------------------------------------------------

_SCALARS = (int, float, bool, str)


def _config_to_manifest(cfg: TrainConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "codec":
            for cf in dataclasses.fields(v):
                out[f"config.codec.{cf.name}"] = repr(getattr(v, cf.name))
        else:
            out[f"config.{f.name}"] = repr(v)
    return out


def _parse_scalar(text: str):
    if text in ("True", "False", "None"):
        return {"True": True, "False": False, "None": None}[text]
    if text.startswith("'") or text.startswith('"'):
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        return float(text)


def _config_from_manifest(manifest: dict[str, str]) -> TrainConfig:
    codec_kwargs, kwargs = {}, {}
    for k, v in manifest.items():
        if k.startswith("config.codec."):
            codec_kwargs[k.removeprefix("config.codec.")] = _parse_scalar(v)
        elif k.startswith("config."):
            kwargs[k.removeprefix("config.")] = _parse_scalar(v)
    kwargs.pop("codec", None)
    return TrainConfig(codec=CodecConfig(**codec_kwargs), **kwargs)


# -- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = {"global_step": str(ckpt.global_step)}
    manifest.update(_config_to_manifest(ckpt.config))
    for name, hexstate in ckpt.rng_states.items():
        manifest[f"rng.{name}"] = hexstate
    for name, step in ckpt.optimizer_steps.items():
        manifest[f"optstep.{name}"] = repr(step)
    tensors: dict[str, torch.Tensor] = {}
    for name, t in ckpt.model_state.items():
        tensors[f"param.{name}"] = t
    for name, t in ckpt.optimizer_moments.items():
        tensors[f"opt.{name}"] = t
    save_archive(path, manifest, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest, tensors = load_archive(path)
    if "global_step" not in manifest:
        raise CheckpointError(f"{path}: manifest missing global_step")
    config = _config_from_manifest(manifest)
    model_state = {k.removeprefix("param."): v for k, v in tensors.items()
                   if k.startswith("param.")}
    moments = {k.removeprefix("opt."): v for k, v in tensors.items() if k.startswith("opt.")}
    steps = {k.removeprefix("optstep."): float(v) for k, v in manifest.items()
             if k.startswith("optstep.")}
    rng = {k.removeprefix("rng."): v for k, v in manifest.items() if k.startswith("rng.")}
    return Checkpoint(config=config, model_state=model_state, optimizer_moments=moments,
                      optimizer_steps=steps, rng_states=rng,
                      global_step=int(manifest["global_step"]))


def restore_model(ckpt: Checkpoint) -> Codec:
    model = Codec(ckpt.config.codec)
    model.load_state_dict(ckpt.model_state)
    return model


# -- one optimization step ---------------------------------------------------

def compute_loss(model, batch: torch.Tensor, n_tokens: int, variant: str,
                 lambda_mask: float = 1.0, detach_steps: bool = False,
                 horizon_penalty: float = 0.0) -> LossBreakdown:
    trace = run(model, batch, n_tokens, detach_steps=detach_steps)
    if variant == "masked":
        return combined_loss(trace, batch, lambda_mask=lambda_mask)
    breakdown = vanilla_loss(trace, batch)
    if horizon_penalty > 0:
        # the loop is only ever optimized up to the sampled step count, so by
        # default its response to the residual left after the final step is
        # untrained extrapolation, and refinement past the training horizon
        # drifts. Penalizing the squared response to that residual trains the
        # loop to be idempotent once it has nothing left to add.
        residual = (batch - trace.cumulative[-1]).detach()
        response = model.decode(model.encode(residual))
        breakdown.total = breakdown.total + horizon_penalty * response.pow(2).mean()
    return breakdown


def train_step(model, optimizer: torch.optim.Optimizer, batch: torch.Tensor,
               n_tokens: int, variant: str, lambda_mask: float = 1.0,
               detach_steps: bool = False, grad_clip: float = 0.0,
               horizon_penalty: float = 0.0) -> LossBreakdown:
    optimizer.zero_grad(set_to_none=True)
    breakdown = compute_loss(model, batch, n_tokens, variant, lambda_mask, detach_steps,
                             horizon_penalty)
    if not torch.isfinite(breakdown.total):
        raise NumericError(
            f"non-finite loss at n_tokens={n_tokens}: per-step terms {breakdown.per_step}")
    breakdown.total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return breakdown


# -- generator / optimizer state plumbing ------------------------------------

def _gen_to_hex(gen: torch.Generator) -> str:
    return gen.get_state().numpy().tobytes().hex()


def _gen_from_hex(gen: torch.Generator, hexstate: str) -> None:
    state = torch.frombuffer(bytearray.fromhex(hexstate), dtype=torch.uint8)
    gen.set_state(state.clone())


def _extract_optimizer(model, optimizer) -> tuple[dict[str, torch.Tensor], dict[str, float]]:
    names = [n for n, _ in model.named_parameters()]
    state = optimizer.state_dict()["state"]
    moments, steps = {}, {}
    for idx, s in state.items():
        name = names[idx]
        moments[f"{name}.exp_avg"] = s["exp_avg"]
        moments[f"{name}.exp_avg_sq"] = s["exp_avg_sq"]
        steps[name] = float(s["step"])
    return moments, steps


def _restore_optimizer(model, optimizer, moments: dict[str, torch.Tensor],
                       steps: dict[str, float]) -> None:
    names = [n for n, _ in model.named_parameters()]
    sd = optimizer.state_dict()
    state = {}
    for idx, name in enumerate(names):
        if name in steps:
            state[idx] = {
                "step": torch.tensor(steps[name]),
                "exp_avg": moments[f"{name}.exp_avg"].clone(),
                "exp_avg_sq": moments[f"{name}.exp_avg_sq"].clone(),
            }
    sd["state"] = state
    optimizer.load_state_dict(sd)


# -- full training run -------------------------------------------------------

def _snapshot(config: TrainConfig, model, optimizer, gens: dict[str, torch.Generator],
              step: int) -> Checkpoint:
    moments, steps = _extract_optimizer(model, optimizer)
    return Checkpoint(
        config=config,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_moments=moments,
        optimizer_steps=steps,
        rng_states={name: _gen_to_hex(g) for name, g in gens.items()},
        global_step=step,
    )


def train(config: TrainConfig, dataset: ImageDataset | None = None,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None,
          stop_at_step: int | None = None) -> Checkpoint:
    """Run (or resume) a training job and return the final checkpoint.

    dataset overrides config.data_root ingestion (used by tests and the
    synthetic pipelines). out_dir, when given, receives periodic
    checkpoints and an append-only CSV training log.
    """
    if dataset is None:
        if not config.data_root:
            raise ContractViolation("config.data_root is empty and no dataset was supplied")
        dataset = ingest_dataset(config.data_root, config.image_size)
    if len(dataset) == 0:
        raise ContractViolation("dataset is empty")

    model = build_codec(config.codec, config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay)
    gens = {
        "sampler": torch.Generator().manual_seed(config.seed + 1),
        "data": torch.Generator().manual_seed(config.seed + 2),
    }
    start_step = 0
    if resume is not None:
        if resume.config != config:
            raise ContractViolation("resume checkpoint was produced by a different config")
        model.load_state_dict(resume.model_state)
        _restore_optimizer(model, optimizer, resume.optimizer_moments, resume.optimizer_steps)
        for name, g in gens.items():
            _gen_from_hex(g, resume.rng_states[name])
        start_step = resume.global_step

    sampler = SamplerState(step=start_step, total_steps=config.total_steps,
                           mu_start=config.mu_start, mu_end=config.mu_end,
                           sigma=config.sigma, n_min=config.n_min, n_cap=config.n_cap,
                           generator=gens["sampler"])

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = log_writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "training_log.csv"
        new_log = not log_path.exists()
        log_file = open(log_path, "a", newline="")
        log_writer = csv.writer(log_file)
        if new_log:
            log_writer.writerow(["step", "n_tokens", "total_loss", "per_step_terms"])

    end_step = config.total_steps if stop_at_step is None else min(stop_at_step, config.total_steps)
    try:
        for t in range(start_step, end_step):
            sampler.step = t
            if config.lr_end is not None and config.total_steps > 1:
                # cosine anneal from lr to lr_end; a pure function of the step
                # index, so resumed runs recompute the identical schedule
                frac = t / (config.total_steps - 1)
                lr_t = config.lr_end + (config.lr - config.lr_end) * 0.5 * (
                    1.0 + math.cos(math.pi * frac))
                for group in optimizer.param_groups:
                    group["lr"] = lr_t
            n_tokens = sample_token_count(sampler)
            idx = torch.randint(len(dataset), (config.batch_size,), generator=gens["data"])
            batch = dataset.images[idx]
            breakdown = train_step(model, optimizer, batch, n_tokens, config.variant,
                                   lambda_mask=config.lambda_mask,
                                   detach_steps=config.detach_steps,
                                   grad_clip=config.grad_clip,
                                   horizon_penalty=config.horizon_penalty)
            if log_writer is not None:
                terms = ";".join(
                    f"{rec:.6g}" if m is None else f"{rec:.6g}:{m:.6g}"
                    for _, rec, m in breakdown.per_step)
                log_writer.writerow([t, n_tokens, f"{float(breakdown.total.detach()):.6g}", terms])
            done = t + 1
            if (out_dir is not None and config.checkpoint_every
                    and done % config.checkpoint_every == 0 and done < end_step):
                save_checkpoint(_snapshot(config, model, optimizer, gens, done),
                                out_dir / f"checkpoint_{done:07d}.vtck")
    finally:
        if log_file is not None:
            log_file.close()

    final = _snapshot(config, model, optimizer, gens, end_step)
    if out_dir is not None:
        save_checkpoint(final, out_dir / f"checkpoint_{end_step:07d}.vtck")
    return final
