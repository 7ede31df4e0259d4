"""Training loop: deterministic streams, chunked gradients, checkpoints.

Every step draws from a generator seeded by (run seed, purpose tag, step),
so step k's batch, noise, and condition drops are a pure function of the
config. Resuming from a checkpoint therefore replays the exact run that an
uninterrupted process would have produced.

A batch is split into fixed-size chunks. Chunks may be evaluated on any
number of worker threads, but their losses and gradients are reduced in
chunk-index order afterward, which keeps results identical for any
``--threads`` value.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_tensors, save_checkpoint
from .conditioning import LcgEmbeddingTable, drop_condition, embed, init_embedding_table
from .config import Config, denoiser_config, dump_config, schedule_config
from .dataforge import ImageMaskSample
from .denoiser import DenoiserParams, init_denoiser
from .diffusion import (
    DiffusionSchedule,
    build_conditioning,
    loss_given_noise,
    masked_l1,
    masked_psnr,
    sample,
)
from .optim import AdamWConfig, AdamWState, adamw_step, init_adamw
from .tensor import Tape, Tensor, backward, stack

__all__ = [
    "TrainerError",
    "LockError",
    "ConfigMismatchError",
    "TAG_INIT",
    "TAG_STEP",
    "TAG_EVAL",
    "TAG_SAMPLE",
    "step_rng",
    "build_model",
    "TrainResult",
    "train",
    "evaluate_heldout",
    "read_loss_log",
]

log = logging.getLogger("lcgdiff.trainer")

TAG_INIT = 1
TAG_STEP = 2
TAG_EVAL = 3
TAG_SAMPLE = 4

LATEST_CHECKPOINT = "ckpt-latest.lcgc"


class TrainerError(RuntimeError):
    """Training could not proceed."""


class LockError(TrainerError):
    """Another run holds the output directory."""


class ConfigMismatchError(TrainerError):
    """Resume requested with a config different from the checkpoint's."""


def step_rng(seed: int, tag: int, step: int) -> np.random.Generator:
    """Independent stream for one (run, purpose, step) triple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, tag, step))))


def build_model(config: Config, rng: np.random.Generator) -> tuple[DenoiserParams, LcgEmbeddingTable]:
    params = init_denoiser(denoiser_config(config), rng, zero_residual=True)
    table = init_embedding_table(
        e_dim=config.model.e_dim,
        d_e=config.model.d_e,
        rng=rng,
        tokens_per_category=config.model.tokens_per_category,
    )
    return params, table


@dataclass
class TrainResult:
    steps_run: int
    first_loss: float | None
    final_loss: float
    checkpoint_path: Path
    log_path: Path


def _encode_all(samples: list[ImageMaskSample], factor: int):
    z0s, conds, cats = [], [], []
    for s in samples:
        z0, cond = build_conditioning(s.image, s.mask, factor)
        z0s.append(z0)
        conds.append(cond)
        cats.append(s.category)
    return np.stack(z0s), np.stack(conds), cats


def _chunk_ranges(total: int, chunk: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]


def _opt_tensors(state: AdamWState) -> dict[str, np.ndarray]:
    out = {f"m.{k}": v for k, v in state.m.items()}
    out.update({f"v.{k}": v for k, v in state.v.items()})
    return out


def _restore_opt(state: AdamWState, arrays: dict[str, np.ndarray], step: int) -> None:
    for name in state.m:
        m_key, v_key = f"m.{name}", f"v.{name}"
        if m_key not in arrays or v_key not in arrays:
            raise TrainerError(f"checkpoint optimizer state is missing moments for {name}")
        state.m[name][...] = arrays[m_key]
        state.v[name][...] = arrays[v_key]
    state.step = step


class _Lock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / "lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"training lock {self.path} exists; another run owns this directory "
                "(delete the file if that run is gone)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def train(
    config: Config,
    samples: list[ImageMaskSample],
    out_dir,
    threads: int = 1,
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or continue) training; returns stats for the steps executed.

    ``stop_after`` ends the invocation after that many steps with a
    checkpoint, simulating an interruption; a later ``resume=True`` call
    must then reproduce the uninterrupted run bit for bit.
    """
    if not samples:
        raise TrainerError("no training samples")
    if threads < 1:
        raise TrainerError(f"threads must be >= 1, got {threads}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = config.train
    config_text = dump_config(config)
    schedule = schedule_config(config)

    with _Lock(out_dir):
        init_rng = step_rng(tc.seed, TAG_INIT, 0)
        params, table = build_model(config, init_rng)
        named = {**params.named_params(), **table.named_params()}
        opt_state = init_adamw(named)
        opt_config = AdamWConfig(
            lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, weight_decay=tc.weight_decay
        )

        start_step = 0
        latest = out_dir / LATEST_CHECKPOINT
        log_path = out_dir / "loss.log"
        if resume:
            if not latest.exists():
                raise TrainerError(f"resume requested but {latest} does not exist")
            arrays, opt_arrays, saved_step, saved_config = load_checkpoint(latest)
            if saved_config != config_text:
                raise ConfigMismatchError(
                    "checkpoint was produced by a different config; refusing to mix runs"
                )
            restore_tensors(named, arrays)
            _restore_opt(opt_state, opt_arrays, saved_step)
            start_step = saved_step
            log.info("resumed at step %d from %s", start_step, latest)
        else:
            with open(log_path, "w", encoding="utf-8") as fh:
                for line in config_text.rstrip("\n").split("\n"):
                    fh.write(f"# {line}\n" if line else "#\n")
                fh.write("# step\tloss\twalltime_s\n")

        z0_all, cond_all, cats_all = _encode_all(samples, config.model.factor)
        n = len(samples)
        latent_shape = z0_all.shape[1:]

        def run_chunk(lo, hi, idx, t_draw, eps_draw, cats):
            with Tape() as tape:
                e_chunk = stack([embed(c, table) for c in cats[lo:hi]], axis=0)
                loss = loss_given_noise(
                    params,
                    z0_all[idx[lo:hi]],
                    cond_all[idx[lo:hi]],
                    e_chunk,
                    t_draw[lo:hi],
                    eps_draw[lo:hi],
                    schedule,
                )
            grads = backward(tape, loss)
            by_name = {k: grads[v] for k, v in named.items() if v in grads}
            return float(loss.numpy()), by_name

        first_loss: float | None = None
        final_loss = float("nan")
        steps_run = 0
        ckpt_every = tc.checkpoint_every
        started = time.monotonic()
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        try:
            with open(log_path, "a", encoding="utf-8") as log_fh:
                for step in range(start_step, tc.steps):
                    rng = step_rng(tc.seed, TAG_STEP, step)
                    # Canonical draw order; every run consumes the stream identically.
                    idx = rng.integers(0, n, size=tc.batch)
                    t_draw = rng.integers(0, schedule.timesteps, size=tc.batch)
                    eps_draw = rng.standard_normal((tc.batch,) + latent_shape)
                    cats = [drop_condition(cats_all[i], tc.p_drop, rng) for i in idx]

                    ranges = _chunk_ranges(tc.batch, tc.chunk)
                    if pool is None:
                        results = [run_chunk(lo, hi, idx, t_draw, eps_draw, cats) for lo, hi in ranges]
                    else:
                        futures = [
                            pool.submit(run_chunk, lo, hi, idx, t_draw, eps_draw, cats)
                            for lo, hi in ranges
                        ]
                        results = [f.result() for f in futures]

                    # Reduce in chunk-index order: the sum is one fixed sequence.
                    loss_value = 0.0
                    grad_acc: dict[str, np.ndarray] = {}
                    for (lo, hi), (chunk_loss, chunk_grads) in zip(ranges, results):
                        weight = (hi - lo) / tc.batch
                        loss_value += weight * chunk_loss
                        for name, g in chunk_grads.items():
                            if name in grad_acc:
                                grad_acc[name] += weight * g
                            else:
                                grad_acc[name] = weight * g

                    adamw_step(named, grad_acc, opt_state, opt_config)

                    if first_loss is None:
                        first_loss = loss_value
                    final_loss = loss_value
                    steps_run += 1
                    log_fh.write(f"{step}\t{loss_value:.12e}\t{time.monotonic() - started:.3f}\n")
                    log_fh.flush()
                    if (step + 1) % 100 == 0 or step + 1 == tc.steps:
                        log.info("step %d/%d loss %.6f", step + 1, tc.steps, loss_value)

                    done = step + 1
                    stopping = stop_after is not None and done - start_step >= stop_after
                    if done % ckpt_every == 0 or done == tc.steps or stopping:
                        opt_tensors = _opt_tensors(opt_state)
                        save_checkpoint(out_dir / f"ckpt-{done:06d}.lcgc", named, opt_tensors, done, config_text)
                        save_checkpoint(latest, named, opt_tensors, done, config_text)
                    if stopping:
                        break
        finally:
            if pool is not None:
                pool.shutdown(wait=False, cancel_futures=True)

    return TrainResult(
        steps_run=steps_run,
        first_loss=first_loss,
        final_loss=final_loss,
        checkpoint_path=latest,
        log_path=log_path,
    )


@dataclass
class EvalSample:
    """Reconstruction quality of one held-out infill."""

    coverage: float
    l1: float
    psnr: float


def evaluate_samples(
    config: Config,
    params: DenoiserParams,
    table: LcgEmbeddingTable,
    schedule: DiffusionSchedule,
    heldout: list[ImageMaskSample],
    count: int | None = None,
    steps: int | None = None,
    seed: int | None = None,
) -> list[EvalSample]:
    """Infill each held-out sample and score the masked region."""
    ev = config.eval
    count = min(ev.count if count is None else count, len(heldout))
    if count < 1:
        raise TrainerError("no held-out samples to evaluate")
    steps = ev.steps if steps is None else steps
    seed = ev.seed if seed is None else seed
    scored: list[EvalSample] = []
    for k in range(count):
        rec = heldout[k]
        image = np.asarray(rec.image, dtype=np.float64)
        masked = image * (1.0 - np.asarray(rec.mask, dtype=np.float64))[..., None]
        out = sample(
            params,
            schedule,
            table,
            masked,
            rec.mask,
            rec.category,
            step_rng(seed, TAG_EVAL, k),
            steps=steps,
            scale=config.sample.scale,
            guidance=config.sample.guidance,
            latent_composite=config.sample.latent_composite,
        )
        scored.append(
            EvalSample(
                coverage=float(np.asarray(rec.mask, np.float64).mean()),
                l1=masked_l1(image, out, rec.mask),
                psnr=masked_psnr(image, out, rec.mask),
            )
        )
    return scored


def evaluate_heldout(
    config: Config,
    params: DenoiserParams,
    table: LcgEmbeddingTable,
    schedule: DiffusionSchedule,
    heldout: list[ImageMaskSample],
    count: int | None = None,
    steps: int | None = None,
    seed: int | None = None,
) -> float:
    """Mean masked-region L1 between held-out images and their infills."""
    scored = evaluate_samples(config, params, table, schedule, heldout, count, steps, seed)
    return float(np.mean([s.l1 for s in scored]))


def read_loss_log(path) -> list[tuple[int, float]]:
    """Step and loss columns, skipping the config header."""
    rows: list[tuple[int, float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            step_s, loss_s, *_ = line.split("\t")
            rows.append((int(step_s), float(loss_s)))
    return rows
