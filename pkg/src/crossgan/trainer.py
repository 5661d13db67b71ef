"""Training: chained stereo conditioning, cycles, image pools, curriculum."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import AugmentConfig, DomainDataset, StereoPair, augment, sample_batch
from .losses import LossWeights, adv_loss_discriminator, adv_loss_generator, cycle_loss, total_generator_loss
from .model import (DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator,
                    generator_forward)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("stereo", "mono", "baseline")


@dataclass
class TrainingConfig:
    lambda_cycle: float = 20.0
    lr: float = 0.0001
    lr_schedule: str = "constant"
    batch_size: int = 1
    epochs_mono: int = 40
    epochs_stereo: int = 40
    buffer_capacity: int = 50
    mode: str = "stereo"
    seed: int = 0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    d_slowdown: float = 0.5
    gan_mode: str = "lsgan"
    identity_weight: float = 0.0
    residual_blocks: int = 7
    base_filters: int = 64
    upsample: str = "transpose"
    recon_condition: str = "chained"  # or "random"
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only

    def validate(self) -> list[str]:
        errs = []
        if self.batch_size != 1:
            errs.append("batch_size must be 1")
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if self.lr_schedule != "constant":
            errs.append("lr_schedule must be 'constant' (no decay)")
        if self.buffer_capacity < 1:
            errs.append("buffer_capacity must be >= 1")
        if self.epochs_mono < 0 or self.epochs_stereo < 0:
            errs.append("epochs must be >= 0")
        if self.mode not in MODES:
            errs.append(f"mode must be one of {MODES}")
        if not self.lambda_cycle > 0:
            errs.append("lambda_cycle must be > 0")
        if not 0 < self.d_slowdown <= 1:
            errs.append("d_slowdown must lie in (0, 1]")
        if self.gan_mode not in ("lsgan", "bce"):
            errs.append("gan_mode must be lsgan or bce")
        if self.identity_weight < 0:
            errs.append("identity_weight must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            errs.append("adam betas must lie in [0, 1)")
        if self.residual_blocks < 1 or self.base_filters < 1:
            errs.append("residual_blocks and base_filters must be >= 1")
        if self.upsample not in ("transpose", "resize"):
            errs.append("upsample must be transpose or resize")
        if self.recon_condition not in ("chained", "random"):
            errs.append("recon_condition must be chained or random")
        if self.checkpoint_every < 0:
            errs.append("checkpoint_every must be >= 0")
        return errs

    def __post_init__(self):
        errs = self.validate()
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def conditional(self) -> bool:
        return self.mode != "baseline"

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cycle, self.d_slowdown, self.gan_mode, self.identity_weight)

    def generator_spec(self) -> GeneratorSpec:
        kw = dict(residual_blocks=self.residual_blocks, base_filters=self.base_filters, upsample=self.upsample)
        return GeneratorSpec(**kw) if self.conditional else GeneratorSpec.unconditional(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class NonFiniteLossError(RuntimeError):
    pass


class HistoryBuffer:
    """Pool of past generator outputs used as discriminator fakes."""

    def __init__(self, capacity: int = 50, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.store: list = []
        self.rng = rng if rng is not None else np.random.default_rng()

    def push_query(self, img):
        if len(self.store) < self.capacity:
            self.store.append(img)
            return img
        if self.rng.random() < 0.5:
            i = int(self.rng.integers(self.capacity))
            old, self.store[i] = self.store[i], img
            return old
        return img

    def __len__(self):
        return len(self.store)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "store": [t.clone() for t in self.store],
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, d: dict) -> None:
        self.capacity = d["capacity"]
        self.store = list(d["store"])
        self.rng.bit_generator.state = d["rng"]


def buffer_push_query(buf: HistoryBuffer, img):
    return buf.push_query(img)


@dataclass
class StepRecord:
    step: int
    phase: str
    losses: dict[str, float]
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "phase": self.phase, **self.losses, "seconds": self.seconds})


def _t(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img if img.dim() == 4 else img.unsqueeze(0)
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].permute(1, 2, 0).cpu().numpy()


def generate_stereo(G, x_l, x_r, y_w):
    """Left eye conditioned on ``y_w``; right eye conditioned on the left output."""
    if not (x_l.shape == x_r.shape == y_w.shape):
        raise ValueError(f"stereo inputs differ in shape: {tuple(x_l.shape)}, {tuple(x_r.shape)}, {tuple(y_w.shape)}")
    y_l = generator_forward(G, x_l, y_w)
    y_r = generator_forward(G, x_r, y_l)
    return y_l, y_r


class TrainState:
    """Networks, optimizers, image pools and RNG for one training run."""

    def __init__(self, cfg: TrainingConfig, augment_cfg: AugmentConfig | None = None,
                 image_size: tuple[int, int] | None = None):
        self.cfg = cfg
        self.augment_cfg = augment_cfg
        if image_size is None:
            image_size = (augment_cfg.crop_height, augment_cfg.crop_width) if augment_cfg else (256, 512)
        self.image_size = tuple(image_size)
        self.weights = cfg.loss_weights()
        ss = np.random.SeedSequence(cfg.seed)
        s_g, s_f, s_dx, s_dy = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
        gspec = cfg.generator_spec()
        dspec = DiscriminatorSpec(base_filters=cfg.base_filters, image_size=self.image_size)
        self.G, _ = build_generator(gspec, s_g)
        self.F, _ = build_generator(gspec, s_f)
        self.D_X, _ = build_discriminator(dspec, s_dx)
        self.D_Y, _ = build_discriminator(dspec, s_dy)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_gen = torch.optim.Adam(list(self.G.parameters()) + list(self.F.parameters()), lr=cfg.lr, betas=betas)
        self.opt_dx = torch.optim.Adam(self.D_X.parameters(), lr=cfg.lr, betas=betas)
        self.opt_dy = torch.optim.Adam(self.D_Y.parameters(), lr=cfg.lr, betas=betas)
        data_seq, pool_x_seq, pool_y_seq = np.random.SeedSequence([cfg.seed, 1]).spawn(3)
        self.rng = np.random.default_rng(data_seq)
        self.pool_x = HistoryBuffer(cfg.buffer_capacity, np.random.default_rng(pool_x_seq))
        self.pool_y = HistoryBuffer(cfg.buffer_capacity, np.random.default_rng(pool_y_seq))
        self.step = 0
        self.records: list[StepRecord] = []
        self.dump_dir: Path | None = None

    # -- helpers ----------------------------------------------------------

    def networks(self) -> dict[str, torch.nn.Module]:
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}

    def _set_d_grad(self, flag: bool) -> None:
        for p in list(self.D_X.parameters()) + list(self.D_Y.parameters()):
            p.requires_grad_(flag)

    def _check(self, losses: dict[str, float]) -> None:
        bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
        if bad:
            path = None
            if self.dump_dir is not None:
                path = Path(self.dump_dir) / f"nonfinite_step{self.step}.pt"
                self.save_checkpoint(path)
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: {bad}; state dumped to {path}")

    def _update_generators(self, adv, cyc, names, extra=None):
        self._set_d_grad(False)
        terms = list(cyc) + ([extra] if extra is not None else [])
        total, breakdown = total_generator_loss(adv, terms, names + (["identity"] if extra is not None else []))
        self.opt_gen.zero_grad(set_to_none=True)
        self._check(breakdown.terms)
        total.backward()
        self.opt_gen.step()
        self._set_d_grad(True)
        return breakdown

    def _update_discriminator(self, D, opt, pool, reals, fakes):
        queried = [pool.push_query(f.detach()) for f in fakes]
        loss = adv_loss_discriminator(torch.cat([D(r) for r in reals]), torch.cat([D(q) for q in queried]),
                                      self.weights)
        opt.zero_grad(set_to_none=True)
        value = float(loss.detach())
        if not math.isfinite(value):
            self._check({"D": value})
        loss.backward()
        opt.step()
        return value

    def _identity_term(self, x, y, x_w, y_w):
        if self.weights.identity_weight == 0:
            return None
        if self.cfg.conditional:
            idt = (self.G(y, y_w) - y).abs().mean() + (self.F(x, x_w) - x).abs().mean()
        else:
            idt = (self.G(y) - y).abs().mean() + (self.F(x) - x).abs().mean()
        return self.weights.identity_weight * self.weights.lambda_cycle * idt

    # -- steps ------------------------------------------------------------

    def train_step_stereo(self, pair_x: StereoPair, pair_y: StereoPair, y_w, x_w) -> StepRecord:
        if not self.cfg.conditional:
            raise ValueError("stereo steps need conditional generators")
        t0 = time.perf_counter()
        x_l, x_r, y_l, y_r = _t(pair_x.left), _t(pair_x.right), _t(pair_y.left), _t(pair_y.right)
        y_w, x_w = _t(y_w), _t(x_w)
        w = self.weights
        chained = self.cfg.recon_condition == "chained"

        fy_l, fy_r = generate_stereo(self.G, x_l, x_r, y_w)
        rx_l = self.F(fy_l, x_w)
        rx_r = self.F(fy_r, rx_l if chained else x_w)
        fx_l, fx_r = generate_stereo(self.F, y_l, y_r, x_w)
        ry_l = self.G(fx_l, y_w)
        ry_r = self.G(fx_r, ry_l if chained else y_w)

        adv = [adv_loss_generator(self.D_Y(fy_l), w.gan_mode), adv_loss_generator(self.D_Y(fy_r), w.gan_mode),
               adv_loss_generator(self.D_X(fx_l), w.gan_mode), adv_loss_generator(self.D_X(fx_r), w.gan_mode)]
        cyc = [cycle_loss(x_l, rx_l, w), cycle_loss(x_r, rx_r, w), cycle_loss(y_l, ry_l, w), cycle_loss(y_r, ry_r, w)]
        names = ["adv_G_l", "adv_G_r", "adv_F_l", "adv_F_r", "cycle_x_l", "cycle_x_r", "cycle_y_l", "cycle_y_r"]
        bd = self._update_generators(adv, cyc, names, self._identity_term(x_l, y_l, x_w, y_w))

        d_y = self._update_discriminator(self.D_Y, self.opt_dy, self.pool_y, [y_l, y_r], [fy_l, fy_r])
        d_x = self._update_discriminator(self.D_X, self.opt_dx, self.pool_x, [x_l, x_r], [fx_l, fx_r])
        return self._record("stereo", bd, d_x, d_y, t0)

    def train_step_mono(self, x, y, y_w=None, x_w=None) -> StepRecord:
        t0 = time.perf_counter()
        x, y = _t(x), _t(y)
        w = self.weights
        if self.cfg.conditional:
            if y_w is None or x_w is None:
                raise ValueError("conditional generators need condition images y_w and x_w")
            y_w, x_w = _t(y_w), _t(x_w)
            fy = generator_forward(self.G, x, y_w)
            rx = generator_forward(self.F, fy, x_w)
            fx = generator_forward(self.F, y, x_w)
            ry = generator_forward(self.G, fx, y_w)
        else:
            fy = self.G(x)
            rx = self.F(fy)
            fx = self.F(y)
            ry = self.G(fx)
        adv = [adv_loss_generator(self.D_Y(fy), w.gan_mode), adv_loss_generator(self.D_X(fx), w.gan_mode)]
        cyc = [cycle_loss(x, rx, w), cycle_loss(y, ry, w)]
        names = ["adv_G", "adv_F", "cycle_x", "cycle_y"]
        bd = self._update_generators(adv, cyc, names, self._identity_term(x, y, x_w, y_w))
        d_y = self._update_discriminator(self.D_Y, self.opt_dy, self.pool_y, [y], [fy])
        d_x = self._update_discriminator(self.D_X, self.opt_dx, self.pool_x, [x], [fx])
        return self._record("mono", bd, d_x, d_y, t0)

    def _record(self, phase, bd, d_x, d_y, t0) -> StepRecord:
        losses = dict(bd.terms)
        losses["cycle_total"] = sum(v for k, v in bd.terms.items() if k.startswith("cycle"))
        losses["G_total"] = bd.total
        losses["D_X"] = d_x
        losses["D_Y"] = d_y
        self.step += 1
        rec = StepRecord(self.step, phase, losses, time.perf_counter() - t0)
        self.records.append(rec)
        return rec

    # -- checkpoints ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "augment": asdict(self.augment_cfg) if self.augment_cfg else None,
            "image_size": list(self.image_size),
            "generator_spec": self.cfg.generator_spec().to_dict(),
            "params": {k: {n: t.detach().clone() for n, t in m.state_dict().items()}
                       for k, m in self.networks().items()},
            "optimizers": {"gen": self.opt_gen.state_dict(), "D_X": self.opt_dx.state_dict(),
                           "D_Y": self.opt_dy.state_dict()},
            "pools": {"X": self.pool_x.state_dict(), "Y": self.pool_y.state_dict()},
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "step": self.step,
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def from_checkpoint(cls, path) -> "TrainState":
        ck = torch.load(path, map_location="cpu", weights_only=True)
        if ck.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {ck.get('format_version')!r}")
        acfg = ck["augment"]
        if acfg is not None:
            acfg["intensity_jitter"] = tuple(acfg["intensity_jitter"])
            acfg = AugmentConfig(**acfg)
        state = cls(TrainingConfig.from_dict(ck["config"]), acfg, tuple(ck["image_size"]))
        for k, m in state.networks().items():
            m.load_state_dict(ck["params"][k])
        state.opt_gen.load_state_dict(ck["optimizers"]["gen"])
        state.opt_dx.load_state_dict(ck["optimizers"]["D_X"])
        state.opt_dy.load_state_dict(ck["optimizers"]["D_Y"])
        state.pool_x.load_state_dict(ck["pools"]["X"])
        state.pool_y.load_state_dict(ck["pools"]["Y"])
        state.rng.bit_generator.state = ck["rng"]
        torch.set_rng_state(ck["torch_rng"])
        state.step = ck["step"]
        return state


# -- curriculum -------------------------------------------------------------

def phase_lengths(cfg: TrainingConfig, mono_x, mono_y, stereo_x, stereo_y) -> tuple[int, int]:
    n1 = cfg.epochs_mono * max(len(mono_x), len(mono_y)) if cfg.epochs_mono else 0
    n2 = cfg.epochs_stereo * max(len(stereo_x), len(stereo_y)) if cfg.epochs_stereo else 0
    return n1, n2


def _check_datasets(cfg: TrainingConfig, mono_x, mono_y, stereo_x, stereo_y) -> None:
    if cfg.epochs_mono:
        if mono_x is None or mono_y is None:
            raise ValueError("epochs_mono > 0 needs monoscopic datasets for both domains")
        if mono_x.domain != "X" or mono_y.domain != "Y":
            raise ValueError("monoscopic datasets must be domains X and Y")
    if cfg.epochs_stereo:
        if stereo_x is None or stereo_y is None:
            raise ValueError("epochs_stereo > 0 needs stereo datasets for both domains")
        if stereo_x.mode != "stereo" or stereo_y.mode != "stereo":
            raise ValueError(f"mode {cfg.mode!r} phase 2 needs stereo datasets")
        if stereo_x.domain != "X" or stereo_y.domain != "Y":
            raise ValueError("stereo datasets must be domains X and Y")


def _draw(ds: DomainDataset, state: TrainState):
    s = sample_batch(ds, state.rng)
    return augment(s, state.augment_cfg, state.rng) if state.augment_cfg is not None else s


def run_curriculum(cfg: TrainingConfig, mono_x: DomainDataset | None, mono_y: DomainDataset | None,
                   stereo_x: DomainDataset | None, stereo_y: DomainDataset | None,
                   augment_cfg: AugmentConfig | None = None, out_dir=None, resume=None,
                   stop_after: int | None = None,
                   on_step: Callable[[StepRecord], None] | None = None) -> TrainState:
    """Monoscopic pre-training followed by stereo (or left-eye-only) training.

    Phase 1 runs ``epochs_mono`` epochs of mono steps; phase 2 runs
    ``epochs_stereo`` epochs of chained stereo steps (mode ``stereo``) or of
    mono steps on left eyes only (modes ``mono`` and ``baseline``). One epoch
    is ``max(|X|, |Y|)`` steps. The learning rate is constant throughout.
    ``stop_after`` ends the run early at that global step (after writing a
    checkpoint) so it can be resumed.
    """
    _check_datasets(cfg, mono_x, mono_y, stereo_x, stereo_y)
    if resume is not None:
        state = TrainState.from_checkpoint(resume)
        if state.cfg.to_dict() != cfg.to_dict():
            raise ValueError("checkpoint config differs from requested config")
    else:
        size = None
        if augment_cfg is None:
            first = (mono_x if cfg.epochs_mono else stereo_x).samples[0]
            size = (first.left if isinstance(first, StereoPair) else first).shape[:2]
        state = TrainState(cfg, augment_cfg, size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state.dump_dir = out
        (out / "config_echo.json").write_text(json.dumps(
            {"training": cfg.to_dict(), "augment": asdict(augment_cfg) if augment_cfg else None}, indent=2))

    n1, n2 = phase_lengths(cfg, mono_x, mono_y, stereo_x, stereo_y)
    # left-eye views built once; right images are never read outside stereo mode
    left_x = left_y = cond_y = cond_x = None
    if n2:
        if cfg.mode == "stereo":
            cond_x, cond_y = stereo_x.left_view(), stereo_y.left_view()
        else:
            left_x, left_y = stereo_x.left_view(), stereo_y.left_view()

    metrics = open(out / "metrics.jsonl", "a") if out is not None else None
    try:
        while state.step < n1 + n2:
            if state.step < n1:
                x, y = _draw(mono_x, state), _draw(mono_y, state)
                if cfg.conditional:
                    rec = state.train_step_mono(x, y, _draw(mono_y, state), _draw(mono_x, state))
                else:
                    rec = state.train_step_mono(x, y)
            elif cfg.mode == "stereo":
                px, py = _draw(stereo_x, state), _draw(stereo_y, state)
                rec = state.train_step_stereo(px, py, _draw(cond_y, state), _draw(cond_x, state))
            else:
                x, y = _draw(left_x, state), _draw(left_y, state)
                if cfg.conditional:
                    rec = state.train_step_mono(x, y, _draw(left_y, state), _draw(left_x, state))
                else:
                    rec = state.train_step_mono(x, y)
            if metrics is not None:
                metrics.write(rec.to_json() + "\n")
                metrics.flush()
            if on_step is not None:
                on_step(rec)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                state.save_checkpoint(out / f"ckpt_step{state.step:07d}.pt")
            if stop_after is not None and state.step >= stop_after:
                if out is not None:
                    state.save_checkpoint(out / f"ckpt_step{state.step:07d}.pt")
                return state
    finally:
        if metrics is not None:
            metrics.close()
    if out is not None:
        state.save_checkpoint(out / "final.pt")
    return state


# -- inference --------------------------------------------------------------

@torch.no_grad()
def translate(state: TrainState, x_l: np.ndarray, x_r: np.ndarray | None = None, y_w: np.ndarray | None = None,
              mode: str | None = None):
    """Translate X -> Y.

    ``mono`` returns ``G(x_l, y_w)``; ``stereo`` returns the chained pair;
    ``baseline`` translates each given eye independently with an
    unconditional generator.
    """
    mode = mode or state.cfg.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if (mode == "baseline") != (not state.cfg.conditional):
        raise ValueError(f"mode {mode!r} does not match a {state.cfg.mode!r} model")
    if mode == "baseline":
        out_l = _np(generator_forward(state.G, _t(x_l)))
        return out_l if x_r is None else (out_l, _np(generator_forward(state.G, _t(x_r))))
    if y_w is None:
        raise ValueError("conditional translation needs a condition image y_w")
    if mode == "mono":
        return _np(generator_forward(state.G, _t(x_l), _t(y_w)))
    if x_r is None:
        raise ValueError("stereo translation needs the right image")
    y_l, y_r = generate_stereo(state.G, _t(x_l), _t(x_r), _t(y_w))
    return _np(y_l), _np(y_r)


def stereo_translator(state: TrainState) -> Callable[[StereoPair, np.ndarray], StereoPair]:
    """``(pair, condition) -> translated pair`` for either model family."""
    mode = "baseline" if not state.cfg.conditional else "stereo"

    def fn(pair: StereoPair, cond: np.ndarray) -> StereoPair:
        l, r = translate(state, pair.left, pair.right, cond, mode)
        return StereoPair(l, r, scene_id=pair.scene_id)
    return fn
