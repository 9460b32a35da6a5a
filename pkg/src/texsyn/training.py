"""Desk-scale end-to-end training.

Data pipeline: every image in the directory is bilinearly resized to the
target output size (2H, 2W) as ground truth; its exact HxW center crop is the
network input. Sample order reshuffles every epoch from the run RNG.

Each step performs one discriminator update on the adversarial loss with
detached fakes, then one generator update on the weighted total (perceptual,
style, adversarial). The same generator forward serves both phases, so batch
norm statistics update exactly once per step, on the generator pass. The
learning rate starts at 0.0032 and is multiplied by 0.1 every 150 epochs;
Adam runs with beta1=0.5, beta2=0.999, eps=1e-8 (plain SGD is selectable).

Checkpoints round-trip bitwise: magic "TXSP", a u32 version, a CRC-64/XZ of
the payload, then a named-tensor archive (weights, optimizer moments) and a
JSON block (epoch, Adam step counts, RNG state hex, config echo). A resumed
run continues the exact loss trajectory at thread count 1.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .archive import archive_bytes, parse_archive
from .autodiff import Tape
from .generator import GeneratorConfig, GeneratorWeights, generator_apply
from .imageio import load_image
from .losses import (
    DiscriminatorConfig,
    DiscriminatorWeights,
    FeatureExtractor,
    LossReport,
    LossWeights,
    gan_losses_t,
    perceptual_loss_t,
    style_loss_t,
)
from .tensor import NumericError, ShapeError, Tensor, _bilinear_raw

CHECKPOINT_MAGIC = b"TXSP"
CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    """No usable training images."""


class IntegrityError(ValueError):
    """Checkpoint failed its checksum or framing."""


@dataclass(frozen=True)
class TrainConfig:
    h: int = 64
    w: int = 64
    batch_size: int = 1
    lr0: float = 0.0032
    lr_decay_every: int = 150
    lr_decay_factor: float = 0.1
    epochs: int = 300
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    base_width: int = 64
    width_multiplier: float = 0.25
    optimizer: str = "adam"  # "adam" | "sgd"
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 100
    extractor_seed: int = 0

    def validate(self):
        if self.h % 32 or self.w % 32 or self.h <= 0 or self.w <= 0:
            raise ShapeError(f"input dims must be positive multiples of 32, "
                             f"got {self.h}x{self.w}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(base_width=self.base_width,
                               width_multiplier=self.width_multiplier)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_width=self.base_width,
                                   width_multiplier=self.width_multiplier)

    def echo(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = {"perceptual": self.loss_weights.perceptual,
                             "style": self.loss_weights.style,
                             "gan": self.loss_weights.gan}
        return d


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class TrainingSample:
    target: Tensor  # [1, 3, 2H, 2W]
    input: Tensor   # [1, 3, H, W], exactly the center crop of target
    path: str = ""


@dataclass
class Dataset:
    samples: list[TrainingSample]

    def __len__(self):
        return len(self.samples)

    def epoch_batches(self, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(len(self.samples))
        for start in range(0, len(order), batch_size):
            chunk = [self.samples[i] for i in order[start:start + batch_size]]
            inputs = Tensor(np.concatenate([s.input.data for s in chunk]))
            targets = Tensor(np.concatenate([s.target.data for s in chunk]))
            yield inputs, targets


def load_dataset(directory, out_h: int, out_w: int, decode_workers: int = 1) -> Dataset:
    """Decode every readable image under ``directory``; unreadable files are
    skipped with a warning. Targets are resized to (out_h, out_w)."""
    if out_h % 64 or out_w % 64:
        raise ShapeError(f"target size must be a multiple of 64 (input is its "
                         f"center half), got {out_h}x{out_w}")
    paths = sorted(p for p in Path(directory).iterdir() if p.is_file())

    def decode(path):
        try:
            return load_image(path)
        except Exception as e:  # noqa: BLE001 - any undecodable file is skipped
            warnings.warn(f"skipping unreadable image {path}: {e}")
            return None

    if decode_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=decode_workers) as pool:
            decoded = list(pool.map(decode, paths))
    else:
        decoded = [decode(p) for p in paths]

    samples = []
    for path, img in zip(paths, decoded):
        if img is None:
            continue
        target = Tensor(_bilinear_raw(img.data, out_h, out_w))
        inp = Tensor(target.data[:, :, out_h // 4:out_h // 4 + out_h // 2,
                                 out_w // 4:out_w // 4 + out_w // 2])
        samples.append(TrainingSample(target=target, input=inp, path=str(path)))
    if not samples:
        raise DatasetError(f"no decodable images in {directory}")
    return Dataset(samples)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    kind: str
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @staticmethod
    def fresh(kind: str, params: dict[str, np.ndarray]) -> "OptState":
        if kind == "adam":
            return OptState(kind,
                            {k: np.zeros_like(p) for k, p in params.items()},
                            {k: np.zeros_like(p) for k, p in params.items()}, 0)
        return OptState(kind)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               names: list[str], lr: float, cfg: TrainConfig):
        if self.kind == "sgd":
            for name in names:
                params[name] = (params[name] - lr * grads[name]).astype(params[name].dtype)
            return
        self.t += 1
        b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in names:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            step = lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + eps)
            params[name] = (params[name] - step).astype(params[name].dtype)


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    gen: GeneratorWeights
    disc: DiscriminatorWeights
    opt_g: OptState
    opt_d: OptState
    extractor: FeatureExtractor
    rng: np.random.Generator
    epoch: int = 0

    @staticmethod
    def fresh(cfg: TrainConfig) -> "TrainState":
        cfg.validate()
        gen = GeneratorWeights.init(cfg.generator_config(), seed=cfg.seed)
        disc = DiscriminatorWeights.init(cfg.discriminator_config(), seed=cfg.seed + 1)
        return TrainState(
            cfg=cfg, gen=gen, disc=disc,
            opt_g=OptState.fresh(cfg.optimizer,
                                 {n: gen.tensors[n] for n in gen.param_names()}),
            opt_d=OptState.fresh(cfg.optimizer,
                                 {n: disc.tensors[n] for n in disc.param_names()}),
            extractor=FeatureExtractor.fixed_random(seed=cfg.extractor_seed),
            rng=np.random.default_rng(cfg.seed),
        )


def train_step(state: TrainState, inputs: Tensor, targets: Tensor) -> LossReport:
    """One D update (detached fakes) then one G update; mutates ``state``."""
    cfg = state.cfg
    lr = lr_schedule(state.epoch, cfg)
    w = cfg.loss_weights

    tape_g = Tape()
    gen_names = state.gen.param_names()
    p_g = {n: tape_g.leaf(state.gen.tensors[n]) for n in gen_names}
    out = generator_apply(tape_g, tape_g.constant(inputs.data), p_g,
                          state.gen.tensors, state.gen.config, train=True)
    if not np.isfinite(out.value).all():
        raise NumericError("non-finite generator output during training")

    target_c = tape_g.constant(targets.data)
    perc = perceptual_loss_t(tape_g, out, target_c, state.extractor)
    style = style_loss_t(tape_g, out, target_c, state.extractor)

    tape_d = Tape()
    disc_names = state.disc.param_names()
    p_d = {n: tape_d.leaf(state.disc.tensors[n]) for n in disc_names}
    gan_g, gan_d = gan_losses_t(tape_g, tape_d, out, targets.data, inputs.data,
                                state.disc.tensors, p_d, state.disc.config, state.rng)

    report = LossReport(
        perceptual=float(perc.value), style=float(style.value),
        gan_g=float(gan_g.value), gan_d=float(gan_d.value),
        total=float(w.perceptual * perc.value + w.style * style.value
                    + w.gan * gan_g.value))
    if not np.isfinite([report.perceptual, report.style, report.gan_g,
                        report.gan_d]).all():
        raise NumericError(f"non-finite loss during training: {report.to_dict()}")

    # discriminator first, on detached fakes
    tape_d.backward(gan_d)
    d_grads = {n: p_d[n].grad for n in disc_names}
    state.opt_d.update(state.disc.tensors, d_grads, disc_names, lr, cfg)

    total = ad.add(ad.add(ad.scale(perc, w.perceptual), ad.scale(style, w.style)),
                   ad.scale(gan_g, w.gan))
    tape_g.backward(total)
    g_grads = {}
    for n in gen_names:
        g = p_g[n].grad
        if g is None:
            raise NumericError(f"generator parameter {n} received no gradient")
        g_grads[n] = g
    state.opt_g.update(state.gen.tensors, g_grads, gen_names, lr, cfg)
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _crc64_tables():
    poly = 0xC96C5795D7870F42  # CRC-64/XZ, reflected
    t0 = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        t0.append(c)
    tables = [t0]
    for _ in range(7):
        prev = tables[-1]
        tables.append([(prev[i] >> 8) ^ t0[prev[i] & 0xFF] for i in range(256)])
    return tables


_CRC64_TABLES = _crc64_tables()


def crc64(data: bytes) -> int:
    """CRC-64/XZ, slicing-by-eight."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC64_TABLES
    crc = 0xFFFFFFFFFFFFFFFF
    n8 = len(data) // 8
    words = struct.unpack_from(f"<{n8}Q", data) if n8 else ()
    for word in words:
        x = crc ^ word
        crc = (t7[x & 0xFF] ^ t6[(x >> 8) & 0xFF] ^ t5[(x >> 16) & 0xFF]
               ^ t4[(x >> 24) & 0xFF] ^ t3[(x >> 32) & 0xFF] ^ t2[(x >> 40) & 0xFF]
               ^ t1[(x >> 48) & 0xFF] ^ t0[(x >> 56) & 0xFF])
    for b in data[n8 * 8:]:
        crc = t0[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class Checkpoint:
    state: TrainState

    def to_bytes(self) -> bytes:
        s = self.state
        tensors: dict[str, np.ndarray] = {}
        tensors.update({f"gen.{k}": v for k, v in s.gen.tensors.items()})
        tensors.update({f"disc.{k}": v for k, v in s.disc.tensors.items()})
        for tag, opt in (("optg", s.opt_g), ("optd", s.opt_d)):
            tensors.update({f"{tag}.m.{k}": v for k, v in opt.m.items()})
            tensors.update({f"{tag}.v.{k}": v for k, v in opt.v.items()})
        arch = archive_bytes(tensors)
        meta = json.dumps({
            "epoch": s.epoch,
            "opt_g_t": s.opt_g.t,
            "opt_d_t": s.opt_d.t,
            "rng_state_hex": json.dumps(s.rng.bit_generator.state).encode().hex(),
            "config": s.cfg.echo(),
        }, sort_keys=True).encode("utf-8")
        payload = struct.pack("<Q", len(arch)) + arch + struct.pack("<Q", len(meta)) + meta
        return (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
                + struct.pack("<Q", crc64(payload)) + payload)


def checkpoint_save(path, state: TrainState) -> None:
    Path(path).write_bytes(Checkpoint(state).to_bytes())


def checkpoint_load(path) -> TrainState:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (stored_crc,) = struct.unpack_from("<Q", data, 8)
    payload = data[16:]
    if crc64(payload) != stored_crc:
        raise IntegrityError(f"checkpoint checksum mismatch in {path}")
    (arch_len,) = struct.unpack_from("<Q", payload, 0)
    arch = payload[8:8 + arch_len]
    (meta_len,) = struct.unpack_from("<Q", payload, 8 + arch_len)
    meta = json.loads(payload[16 + arch_len:16 + arch_len + meta_len].decode("utf-8"))

    cfg_d = dict(meta["config"])
    cfg_d["loss_weights"] = LossWeights(**cfg_d["loss_weights"])
    cfg = TrainConfig(**cfg_d)
    tensors, _ = parse_archive(arch)

    gen = GeneratorWeights(cfg.generator_config(),
                           {k[4:]: v for k, v in tensors.items() if k.startswith("gen.")})
    gen.validate()
    disc = DiscriminatorWeights(cfg.discriminator_config(),
                                {k[5:]: v for k, v in tensors.items()
                                 if k.startswith("disc.")})
    disc.validate()

    def opt_for(tag, t_key, params):
        m = {k[len(tag) + 3:]: v for k, v in tensors.items() if k.startswith(f"{tag}.m.")}
        v = {k[len(tag) + 3:]: v for k, v in tensors.items() if k.startswith(f"{tag}.v.")}
        if cfg.optimizer == "adam" and set(m) != set(params):
            raise IntegrityError(f"checkpoint missing optimizer moments for {tag}")
        return OptState(cfg.optimizer, m, v, int(meta[t_key]))

    opt_g = opt_for("optg", "opt_g_t", gen.param_names())
    opt_d = opt_for("optd", "opt_d_t", disc.param_names())

    rng = np.random.default_rng(cfg.seed)
    rng.bit_generator.state = json.loads(bytes.fromhex(meta["rng_state_hex"]).decode())

    return TrainState(cfg=cfg, gen=gen, disc=disc, opt_g=opt_g, opt_d=opt_d,
                      extractor=FeatureExtractor.fixed_random(seed=cfg.extractor_seed),
                      rng=rng, epoch=int(meta["epoch"]))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_loop(dataset: Dataset, state: TrainState, out_dir,
               log_fn=None) -> list[LossReport]:
    """Run epochs ``state.epoch .. cfg.epochs``; writes checkpoints under
    ``out_dir`` and returns all step reports. On a numeric failure, raises
    NumericError naming the last good checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = state.cfg
    reports: list[LossReport] = []
    last_good = None
    try:
        while state.epoch < cfg.epochs:
            for inputs, targets in dataset.epoch_batches(cfg.batch_size, state.rng):
                report = train_step(state, inputs, targets)
                reports.append(report)
                if log_fn:
                    log_fn(state.epoch, report)
            state.epoch += 1
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                last_good = out_dir / f"checkpoint_{state.epoch:06d}.txsp"
                checkpoint_save(last_good, state)
    except NumericError as e:
        raise NumericError(f"{e} (last good checkpoint: {last_good})") from e
    final = out_dir / f"checkpoint_{state.epoch:06d}.txsp"
    checkpoint_save(final, state)
    return reports
