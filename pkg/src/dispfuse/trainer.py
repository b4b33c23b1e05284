"""Sample assembly, confidence rules and the alternating critic/refiner loop."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from . import tensor as T
from .energy import (
    ConfigurationError,
    EnergyConfig,
    LossBreakdown,
    constraint_loss,
    is_finite,
    photometric_loss,
    refiner_adversarial,
    smoothness_loss,
    total_objective,
    wgan_losses,
)
from .imaging import normalize, pad_to_32, sobel
from .nets import EVAL, Critic, Mode, NetConfig, NetConfigError, Refiner, build_discriminator, build_refiner
from .optim import Adam
from .tensor import Tensor
from .warp import photometric_region_mask, reconstruct_right, sample_right


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, breakdown: dict, step: int | None = None):
        self.term = term
        self.breakdown = breakdown
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r}{where}; breakdown: {json.dumps(breakdown)}")


# -- samples -----------------------------------------------------------------------

@dataclass
class FusionSample:
    """One padded training or inference example.

    Images are normalised to [-1, 1]; disparities are in pixels.  ``gt`` is
    only ever used for reporting.
    """

    left: np.ndarray  # (H, W)
    right: np.ndarray  # (H, W)
    right_grad: np.ndarray  # (H, W) Sobel magnitude of the normalised right image
    disp_inputs: np.ndarray  # (Z, H, W)
    confidences: np.ndarray  # (Z, H, W)
    frame_mask: np.ndarray  # (H, W)
    height: int
    width: int
    gt: np.ndarray | None = None

    @property
    def num_inputs(self) -> int:
        return self.disp_inputs.shape[0]

    def flipped(self) -> FusionSample:
        """Vertical flip; disparity values are unchanged by row reversal."""
        def f(a):
            return None if a is None else np.ascontiguousarray(a[..., ::-1, :])

        # The frame mask is flipped too, so content stays aligned with it.
        return dataclasses.replace(
            self,
            left=f(self.left), right=f(self.right), right_grad=f(self.right_grad),
            disp_inputs=f(self.disp_inputs), confidences=f(self.confidences),
            frame_mask=f(self.frame_mask), gt=f(self.gt),
        )


def make_sample(left, right, disp_inputs, confidences, gt=None) -> FusionSample:
    """Build a padded sample from raw [0, 255] images and pixel disparities."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    h, w = left.shape
    if right.shape != (h, w):
        raise ValueError(f"right image is {right.shape[0]}x{right.shape[1]}, left is {h}x{w}")
    disps = np.stack([np.asarray(d, dtype=np.float64) for d in disp_inputs])
    confs = np.stack([np.asarray(c, dtype=np.float64) for c in confidences])
    if disps.shape[1:] != (h, w):
        raise ValueError(f"disparity inputs are {disps.shape[1:]}, images are {(h, w)}")
    if confs.shape != disps.shape:
        raise ValueError(f"confidences {confs.shape} do not match disparity inputs {disps.shape}")
    disps = np.where(np.isfinite(disps), disps, 0.0)
    nl, nr = normalize(left), normalize(right)
    grad = sobel(nr).magnitude
    pad = pad_to_32
    return FusionSample(
        left=pad(nl).content, right=pad(nr).content, right_grad=pad(grad).content,
        disp_inputs=pad(disps).content, confidences=pad(confs).content,
        frame_mask=pad(nl).mask, height=h, width=w,
        gt=None if gt is None else pad(np.asarray(gt, dtype=np.float64)).content,
    )


def augment(sample: FusionSample, rng: np.random.Generator, flip_prob: float = 0.5) -> FusionSample:
    return sample.flipped() if rng.random() < flip_prob else sample


# -- confidence rules --------------------------------------------------------------------

SOURCE_RULES = {
    "dispnet": "threshold:4,0.1,0.9",
    "sgm": "validmask:0.8",
    "lidar": "const:1.0",
    "stereo": "const:0.5",
}


def _rule_args(rule: str, spec: str, n: int) -> list[float]:
    try:
        vals = [float(v) for v in spec.split(",")] if spec else []
    except ValueError as exc:
        raise ConfigurationError(f"confidence rule {rule!r}: arguments must be numbers") from exc
    if len(vals) != n:
        raise ConfigurationError(f"confidence rule {rule!r}: expected {n} argument(s), got {len(vals)}")
    return vals


def confidence_weights(disp_inputs, rules=()) -> list[np.ndarray]:
    """Per-pixel confidence for each disparity input.

    Starts from ``1/Z``.  ``agree:<t>[,<hi>,<lo>]`` (Z=2) gives both inputs
    ``hi`` (0.99) where they differ by less than ``t`` pixels and ``lo``
    (0.5) elsewhere; it is always applied before the other rules.  The
    remaining rules override, in order, either every input or only input
    ``k`` when written ``k=<rule>``:

    - ``const:<w>``
    - ``threshold:<d>,<lo>,<hi>``: ``lo`` where disparity < d, else ``hi``
    - ``validmask:<w>``: ``w`` on finite positive disparities, 0 elsewhere
    - source tags ``dispnet``, ``sgm``, ``lidar``, ``stereo``
    """
    disps = [np.asarray(d, dtype=np.float64) for d in disp_inputs]
    z = len(disps)
    if z < 1:
        raise ConfigurationError("confidence_weights: need at least one disparity input")
    weights = [np.full(d.shape, 1.0 / z) for d in disps]
    parsed = []
    for rule in rules:
        target = None
        body = rule.strip()
        if "=" in body:
            idx, body = body.split("=", 1)
            try:
                target = int(idx)
            except ValueError as exc:
                raise ConfigurationError(f"confidence rule {rule!r}: bad input index {idx!r}") from exc
            if not 0 <= target < z:
                raise ConfigurationError(f"confidence rule {rule!r}: input index {target} out of range for Z={z}")
        body = SOURCE_RULES.get(body, body)
        kind, _, args = body.partition(":")
        if kind not in ("agree", "const", "threshold", "validmask"):
            raise ConfigurationError(f"unknown confidence rule {rule!r}")
        parsed.append((kind, args, target, rule))
    # agreement first, then overrides in the given order
    parsed.sort(key=lambda r: r[0] != "agree")
    for kind, args, target, rule in parsed:
        if kind == "agree":
            if z != 2:
                raise ConfigurationError(f"confidence rule {rule!r} needs exactly two inputs, got {z}")
            vals = args.split(",") if args else []
            t, hi, lo = _rule_args(rule, args, 1) + [0.99, 0.5] if len(vals) <= 1 else _rule_args(rule, args, 3)
            with np.errstate(invalid="ignore"):
                close = np.abs(disps[0] - disps[1]) < t
            for k in range(2):
                weights[k] = np.where(close, hi, lo)
            continue
        for k in range(z) if target is None else (target,):
            d = disps[k]
            if kind == "const":
                (w,) = _rule_args(rule, args, 1)
                weights[k] = np.full(d.shape, w)
            elif kind == "threshold":
                thr, lo, hi = _rule_args(rule, args, 3)
                weights[k] = np.where(d < thr, lo, hi)
            else:
                (w,) = _rule_args(rule, args, 1)
                valid = np.isfinite(d) & (d > 0)
                weights[k] = np.where(valid, w, 0.0)
    return weights


# -- configuration ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    lr_start: float = 0.005
    lr_end: float = 0.0001
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    flip_prob: float = 0.5
    critic_steps: int = 1  # critic updates per refiner update
    clip_grad_norm: float = 0.0  # refiner gradient norm cap; 0 = off
    checkpoint_every: int = 10
    deterministic: bool = True
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("train.epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigurationError("learning rates must satisfy lr_start >= lr_end > 0")
        if self.clip_grad_norm < 0:
            raise ConfigurationError("train.clip_grad_norm must be >= 0")
        if self.critic_steps < 1:
            raise ConfigurationError("train.critic_steps must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigurationError("train.checkpoint_every must be >= 1")
        if self.energy.num_inputs != self.net.c1:
            raise ConfigurationError(
                f"energy.num_inputs ({self.energy.num_inputs}) must equal net.c1 ({self.net.c1})")

    def to_dict(self) -> dict:
        d = {k.name: getattr(self, k.name) for k in dataclasses.fields(self) if k.name not in ("energy", "net")}
        d["energy"] = {k.name: getattr(self.energy, k.name) for k in dataclasses.fields(self.energy)}
        d["net"] = self.net.to_dict()
        return json.loads(json.dumps(d))


def learning_rate(cfg: TrainConfig, epoch: float) -> float:
    """Linear decay over 1-based ``epoch`` from ``lr_start`` (first) to ``lr_end`` (last)."""
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * progress(cfg, epoch)


def progress(cfg: TrainConfig, epoch: float) -> float:
    if cfg.epochs == 1:
        return 0.0
    return min(1.0, max(0.0, (epoch - 1) / (cfg.epochs - 1)))


# -- state --------------------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    refiner: Refiner
    critic: Critic
    opt_refiner: Adam
    opt_critic: Adam
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    log: list = field(default_factory=list)
    steps: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    seq = np.random.SeedSequence(cfg.seed)
    r_seed, c_seed, t_seed = seq.spawn(3)
    refiner = build_refiner(cfg.net, np.random.default_rng(r_seed))
    critic = build_discriminator(cfg.net, np.random.default_rng(c_seed), sigmoid=cfg.energy.critic_sigmoid)
    if critic.num_scales != cfg.energy.num_scales:
        raise ConfigurationError(
            f"energy.num_scales ({cfg.energy.num_scales}) must equal the critic head count ({critic.num_scales})")
    return TrainState(
        cfg=cfg,
        refiner=refiner,
        critic=critic,
        opt_refiner=Adam(refiner.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_grad_norm),
        opt_critic=Adam(critic.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps),
        rng=np.random.default_rng(t_seed),
    )


def save_state(state: TrainState, path) -> None:
    arrays = {}
    for prefix, src in (("refiner", state.refiner.state()), ("critic", state.critic.state()),
                        ("adam_refiner", state.opt_refiner.state()), ("adam_critic", state.opt_critic.state())):
        arrays.update({f"{prefix}/{k}": v for k, v in src.items()})
    meta = {
        "format": "dispfuse-train",
        "epoch": state.epoch,
        "steps": state.steps,
        "config": state.cfg.to_dict(),
        "rng": state.rng.bit_generator.state,
        "log": state.log,
    }
    checkpoint.save(path, arrays, meta)


def _split(arrays: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def _check_net(meta_net: dict, cfg: NetConfig, path) -> None:
    want = cfg.to_dict()
    diff = sorted(k for k in set(want) | set(meta_net) if want.get(k) != meta_net.get(k))
    if diff:
        detail = ", ".join(f"{k}: checkpoint {meta_net.get(k)!r} vs config {want.get(k)!r}" for k in diff)
        raise checkpoint.CheckpointError(f"{path}: network configuration mismatch ({detail})")


def load_state(path, cfg: TrainConfig) -> TrainState:
    """Resume from ``path``; refuses checkpoints written for a different network."""
    arrays, meta = checkpoint.load(path)
    if meta.get("format") != "dispfuse-train":
        raise checkpoint.CheckpointError(f"{path}: not a training checkpoint")
    _check_net(meta["config"]["net"], cfg.net, path)
    state = init_state(cfg)
    state.refiner.load_state(_split(arrays, "refiner"))
    state.critic.load_state(_split(arrays, "critic"))
    state.opt_refiner.load_state(_split(arrays, "adam_refiner"))
    state.opt_critic.load_state(_split(arrays, "adam_critic"))
    state.rng.bit_generator.state = meta["rng"]
    state.epoch = meta["epoch"]
    state.steps = meta["steps"]
    state.log = list(meta["log"])
    return state


def load_refiner(path, cfg: NetConfig | None = None) -> Refiner:
    """Refiner weights from a training checkpoint, optionally checked against ``cfg``."""
    arrays, meta = checkpoint.load(path)
    if meta.get("format") != "dispfuse-train":
        raise checkpoint.CheckpointError(f"{path}: not a training checkpoint")
    net_meta = meta["config"]["net"]
    if cfg is not None:
        _check_net(net_meta, cfg, path)
    net_cfg = NetConfig(**net_meta)
    params = _split(arrays, "refiner")
    probe = next(v for k, v in params.items() if k.startswith("param/"))
    with T.precision("f64" if probe.dtype == np.float64 else "f32"):
        refiner = build_refiner(net_cfg, 0)
    refiner.load_state(params)
    return refiner


# -- one step -------------------------------------------------------------------------------

@dataclass
class Batch:
    left: np.ndarray  # (b, 1, H, W)
    right: np.ndarray
    right_grad: np.ndarray
    disp: np.ndarray  # (b, Z, H, W) pixels
    conf: np.ndarray  # (b, Z, H, W)
    mask: np.ndarray  # (b, 1, H, W)


def collate(samples: list[FusionSample]) -> Batch:
    dt = T.get_dtype()

    def s(name, expand):
        arr = np.stack([getattr(x, name) for x in samples])
        return (arr[:, None] if expand else arr).astype(dt)

    shapes = {x.left.shape for x in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples in a batch must share padded extents, got {sorted(shapes)}")
    return Batch(s("left", True), s("right", True), s("right_grad", True),
                 s("disp_inputs", False), s("confidences", False), s("frame_mask", True))


def normalized_disparity(disp: np.ndarray, max_disparity: float) -> np.ndarray:
    return 2.0 * disp / max_disparity - 1.0


def refiner_input(batch: Batch, net: NetConfig) -> np.ndarray:
    """Disparity inputs in [-1, 1]-ish units, then left, right, right gradient."""
    nd = normalized_disparity(batch.disp, net.max_disparity)
    return np.concatenate([nd, batch.left, batch.right, batch.right_grad], axis=1)


def critic_condition(batch: Batch, net: NetConfig) -> np.ndarray:
    """Conditioning channels shared by real and fake packs: left, right gradient, inputs."""
    nd = normalized_disparity(batch.disp, net.max_disparity)
    return np.concatenate([batch.left, batch.right_grad, nd], axis=1)


def refine(refiner: Refiner, x: Tensor, net: NetConfig, mode: Mode) -> Tensor:
    """Refiner output mapped back to pixels."""
    return (refiner(x, mode) + 1.0) * (net.max_disparity / 2.0)


@dataclass
class RefinerPass:
    """Refiner output and everything derived from it for one batch."""

    batch: Batch
    disp: Tensor  # (b, 1, H, W) pixels
    recon: object
    region: np.ndarray  # photometric region: covered by the warp and inside the frame
    cond: np.ndarray
    fake: Tensor  # critic pack with the reconstructed right image


def forward_refiner(state: TrainState, batch: Batch, ecfg: EnergyConfig) -> RefinerPass:
    net = state.cfg.net
    if batch.disp.shape[1] != net.c1:
        raise NetConfigError(f"samples carry {batch.disp.shape[1]} disparity inputs, network expects {net.c1}")
    state.refiner.set_requires_grad(True)
    mode = Mode(training=True, bn="batch", update_stats=True, rng=state.rng)
    disp = refine(state.refiner, Tensor(refiner_input(batch, net)), net, mode)
    recon, region = warp_right(batch, disp, ecfg)
    cond = critic_condition(batch, net)
    fake = T.concat([Tensor(cond), recon.image * region], axis=1)
    return RefinerPass(batch, disp, recon, region, cond, fake)


def warp_right(batch: Batch, disp: Tensor, ecfg: EnergyConfig):
    """Reconstruction of the right view and its photometric region.

    Source pixels outside the frame are sent out of the image so padding
    never splats into the content.
    """
    w = batch.left.shape[-1]
    m = batch.mask
    src = disp * Tensor(m) + Tensor((m - 1.0) * (w + 1.0))
    if ecfg.warp == "splat":
        recon = reconstruct_right(batch.left * m, src, ecfg.kappa)
    else:
        recon = sample_right(batch.left * m, disp * Tensor(m))
    region = photometric_region_mask(recon, m).astype(batch.left.dtype)
    return recon, region


def energy_terms(batch: Batch, disp: Tensor, recon, ecfg: EnergyConfig):
    """Constraint, photometric and smoothness terms, in that order."""
    l_c = constraint_loss(disp, batch.disp, batch.conf, batch.mask)
    l_l1 = photometric_loss(recon, batch.right, batch.right_grad, ecfg.alpha, batch.mask)
    l_sm = smoothness_loss(disp, batch.left, ecfg.beta, ecfg.gamma, batch.mask)
    return l_c, l_l1, l_sm


def critic_update(state: TrainState, rp: RefinerPass, lr: float, ecfg: EnergyConfig) -> list:
    """``critic_steps`` Adam steps on the critic; the refiner pass is held fixed."""
    critic = state.critic
    real = np.concatenate([rp.cond, rp.batch.right * rp.region], axis=1)
    fake = rp.fake.detach()
    b = real.shape[0]
    train_mode = Mode(training=True, bn="batch", update_stats=True)
    critic.set_requires_grad(True)
    terms = []
    for _ in range(state.cfg.critic_steps):
        eps = state.rng.random(b)
        terms = wgan_losses(lambda z: critic(z, train_mode), real, fake, ecfg.lambda_gp, eps,
                            penalty_critic=lambda z: critic(z, EVAL))
        total = terms[0].critic_loss
        for t in terms[1:]:
            total = total + t.critic_loss
        if not math.isfinite(float(total.data)):
            vals = {f"critic_loss_{i}": float(t.critic_loss.data) for i, t in enumerate(terms)}
            raise TrainingDiverged("total_critic", vals, state.steps)
        critic.zero_grad()
        total.backward()
        state.opt_critic.step(lr)
    critic.set_requires_grad(False)
    return terms


def refiner_update(state: TrainState, rp: RefinerPass, lr: float, ecfg: EnergyConfig,
                   critic_terms=()) -> LossBreakdown:
    """One Adam step on the refiner against the current (frozen) critic."""
    adv = []
    if ecfg.theta4 > 0:
        state.critic.set_requires_grad(False)
        adv = refiner_adversarial(state.critic(rp.fake, Mode(training=True, bn="batch")))
    l_c, l_l1, l_sm = energy_terms(rp.batch, rp.disp, rp.recon, ecfg)
    bd = total_objective(ecfg, l_l1, l_sm, l_c, adv, critic_terms)
    ok, term = is_finite(bd)
    if not ok:
        raise TrainingDiverged(term, bd.to_dict(), state.steps)
    state.refiner.zero_grad()
    bd.refiner_graph.backward()
    state.opt_refiner.step(lr)
    return bd


def train_step(state: TrainState, samples: list[FusionSample], lr: float, ecfg: EnergyConfig) -> LossBreakdown:
    """One critic update followed by one refiner update on ``samples``.

    The refiner graph is built once: critic updates never touch refiner
    parameters, so re-running the refiner forward would give the same map.
    With ``theta4 == 0`` the critic cannot influence the refiner and is not
    trained at all.
    """
    rp = forward_refiner(state, collate(samples), ecfg)
    terms = critic_update(state, rp, lr, ecfg) if ecfg.theta4 > 0 else []
    bd = refiner_update(state, rp, lr, ecfg, terms)
    state.steps += 1
    return bd


# -- epochs -------------------------------------------------------------------------------------

def fuse(refiner: Refiner, sample: FusionSample) -> np.ndarray:
    """Deterministic refined disparity (pixels) cropped to the original extents."""
    net = refiner.cfg
    if sample.num_inputs != net.c1:
        raise NetConfigError(f"sample has {sample.num_inputs} disparity inputs, network expects {net.c1}")
    with T.no_grad():
        out = refine(refiner, Tensor(refiner_input(collate([sample]), net)), net, EVAL)
    return np.asarray(out.data[0, 0, : sample.height, : sample.width], dtype=np.float64)


def validation_mae(refiner: Refiner, samples: list[FusionSample]) -> float | None:
    errs = []
    for s in samples:
        if s.gt is None:
            continue
        est = fuse(refiner, s)
        errs.append(float(np.mean(np.abs(est - s.gt[: s.height, : s.width]))))
    return float(np.mean(errs)) if errs else None


def _write_log(path, log: list[dict]) -> None:
    try:
        with open(path, "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write training log {path}: {exc.strerror or exc}") from exc


def fit(
    train: list[FusionSample],
    cfg: TrainConfig,
    val: list[FusionSample] | None = None,
    out_dir=None,
    state: TrainState | None = None,
    until_epoch: int | None = None,
    on_epoch=None,
) -> tuple[TrainState, list[dict]]:
    """Train for ``cfg.epochs`` epochs (or up to ``until_epoch``).

    Pass a loaded ``state`` to resume.  With ``out_dir`` set, the JSON-lines
    log is rewritten after every epoch and checkpoints land every
    ``checkpoint_every`` epochs and after the last epoch run.
    """
    if not train:
        raise ValueError("fit: training set is empty")
    state = state or init_state(cfg)
    last = min(cfg.epochs, until_epoch or cfg.epochs)
    b = cfg.net.batch
    limits = threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    with limits:
        for epoch in range(state.epoch + 1, last + 1):
            lr = learning_rate(cfg, epoch)
            ecfg = cfg.energy.at(progress(cfg, epoch))
            order = state.rng.permutation(len(train))
            sums: dict[str, float] = {}
            n_steps = 0
            for lo in range(0, len(order), b):
                chunk = [augment(train[i], state.rng, cfg.flip_prob) for i in order[lo : lo + b]]
                bd = train_step(state, chunk, lr, ecfg)
                for k, v in bd.scalars().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
            rec = {"epoch": epoch, "lr": lr, "steps": n_steps}
            rec.update({k: v / n_steps for k, v in sorted(sums.items())})
            if val:
                rec["val_mae"] = validation_mae(state.refiner, val)
            state.log.append(rec)
            state.epoch = epoch
            if on_epoch is not None:
                on_epoch(rec)
            if out_dir is not None:
                _write_log(os.path.join(out_dir, "log.jsonl"), state.log)
                if epoch % cfg.checkpoint_every == 0 or epoch == last:
                    save_state(state, os.path.join(out_dir, f"ckpt_e{epoch:04d}.bin"))
                    save_state(state, os.path.join(out_dir, "last.bin"))
    return state, state.log
