"""Refiner and multi-scale critic built from ReLU-BatchNorm-conv modules.

Both networks are plain Python objects holding named parameter Tensors and
batch-norm running statistics.  A forward pass takes a :class:`Mode` that
selects dropout and which batch-norm statistics to use.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NetConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    lg: int = 32  # refiner channels after the first convolution
    ld: int = 32  # critic channels
    c1: int = 2  # disparity inputs
    c2: int = 3  # refiner auxiliaries: left, right, right gradient
    c3: int = 2  # critic conditioning auxiliaries: left, right gradient
    dropout_rate: float = 0.5
    stages: int = 3  # refiner down-sampling stages
    critic_strides: tuple = (2, 2, 1, 2, 2)
    height: int = 64
    width: int = 96
    batch: int = 4
    skip_connections: bool = True
    max_disparity: float = 16.0  # disparity normalisation: [0, max] -> [-1, 1]
    init_std: float = 0.02

    def __post_init__(self):
        self.critic_strides = tuple(int(s) for s in self.critic_strides)
        if self.lg < 1 or self.ld < 1:
            raise NetConfigError("lg and ld must be >= 1")
        if self.c1 < 1:
            raise NetConfigError("c1 (number of disparity inputs) must be >= 1")
        if self.height % 32 or self.width % 32:
            raise NetConfigError(f"input extents must be multiples of 32, got {self.height}x{self.width}")
        if not 0 <= self.dropout_rate < 1:
            raise NetConfigError("dropout_rate must lie in [0, 1)")
        if self.max_disparity <= 0:
            raise NetConfigError("max_disparity must be positive")

    @property
    def refiner_in(self) -> int:
        return self.c1 + self.c2

    @property
    def critic_in(self) -> int:
        return self.c1 + self.c3 + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["critic_strides"] = list(self.critic_strides)
        return d


@dataclass
class Mode:
    """How to run a forward pass.

    ``bn`` is ``"batch"`` (batch statistics) or ``"running"`` (the affine
    evaluation form, differentiable to second order).
    """

    training: bool = False
    bn: str = "running"
    update_stats: bool = False
    rng: np.random.Generator | None = None


EVAL = Mode()


def _check_extent(x: Tensor) -> None:
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise NetConfigError(f"network input must be a multiple of 32 in both extents, got {h}x{w}")


class _Net:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self._rng = rng
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    # -- parameter factories ---------------------------------------------------
    def _conv(self, name: str, ci: int, co: int, k: int, stride: int, pad: int, transpose: bool = False):
        shape = (ci, co, k, k) if transpose else (co, ci, k, k)
        dt = T.get_dtype()
        self.params[f"{name}.weight"] = Tensor(self._rng.normal(0.0, self.cfg.init_std, shape).astype(dt), True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(co, dtype=dt), True)
        return {"name": name, "stride": stride, "pad": pad, "transpose": transpose, "co": co}

    def _bn(self, name: str, c: int):
        dt = T.get_dtype()
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dt), True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dt), True)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dt)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=dt)
        return name

    def _module(self, name: str, ci: int, co: int, k: int, stride: int, pad: int, transpose: bool = False):
        """ReLU -> BatchNorm -> conv."""
        return {"bn": self._bn(f"{name}.bn", ci), "conv": self._conv(f"{name}.conv", ci, co, k, stride, pad, transpose)}

    def _dense(self, name: str, ci: int, n_modules: int, growth: int):
        mods = [self._module(f"{name}.{i}", ci + i * growth, growth, 3, 1, 1) for i in range(n_modules)]
        return mods, ci + n_modules * growth

    # -- forward helpers ----------------------------------------------------------
    def _apply_conv(self, spec, x: Tensor, out_hw=None) -> Tensor:
        w = self.params[spec["name"] + ".weight"]
        b = self.params[spec["name"] + ".bias"]
        if spec["transpose"]:
            y = T.conv_transpose2d(x, w, spec["stride"], spec["pad"], out_hw)
        else:
            y = T.conv2d(x, w, spec["stride"], spec["pad"])
        return y + b.reshape(1, spec["co"], 1, 1)

    def _apply_bn(self, name: str, x: Tensor, mode: Mode) -> Tensor:
        gamma = self.params[f"{name}.gamma"]
        beta = self.params[f"{name}.beta"]
        rm_key, rv_key = f"{name}.running_mean", f"{name}.running_var"
        c = x.shape[1]
        if mode.bn == "batch":
            y, mu, var = T.batch_norm_train(x, gamma, beta)
            if mode.update_stats:
                n = x.size // c
                m = 0.1
                self.buffers[rm_key] = ((1 - m) * self.buffers[rm_key] + m * mu).astype(x.dtype)
                unbiased = var * n / max(n - 1, 1)
                self.buffers[rv_key] = ((1 - m) * self.buffers[rv_key] + m * unbiased).astype(x.dtype)
            return y
        scale = gamma * (1.0 / np.sqrt(self.buffers[rv_key] + 1e-5))
        shift = beta - scale * self.buffers[rm_key]
        return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)

    def _apply_module(self, mod, x: Tensor, mode: Mode, out_hw=None) -> Tensor:
        return self._apply_conv(mod["conv"], self._apply_bn(mod["bn"], x.relu(), mode), out_hw)

    def _apply_dense(self, mods, x: Tensor, mode: Mode) -> Tensor:
        feats = [x]
        for mod in mods:
            inp = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
            feats.append(self._apply_module(mod, inp, mode))
        return T.concat(feats, axis=1)

    # -- parameter access -------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state())
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise NetConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for key, arr in state.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                cur = self.params[name]
                if cur.shape != arr.shape:
                    raise NetConfigError(f"{name}: shape {arr.shape} != {cur.shape}")
                cur.data = np.array(arr, dtype=cur.dtype)
            else:
                self.buffers[name] = np.array(arr, dtype=self.buffers[name].dtype)


class Refiner(_Net):
    """U-shaped dense network mapping disparity inputs + auxiliaries to one disparity map."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        lg, c_in = cfg.lg, cfg.refiner_in
        self.stem = self._conv("stem", c_in, lg, 3, 1, 1)
        self.down_blocks, self.downs, skip_ch = [], [], []
        c = lg
        for k in range(cfg.stages):
            mods, c_out = self._dense(f"enc{k}", c, 2, max(1, c // 2))
            self.down_blocks.append(mods)
            skip_ch.append(c_out + (c_in if k == 0 else 0))
            self.downs.append(self._module(f"down{k}", c_out, 2 * c, 4, 2, 1))
            c = 2 * c
        self.bottleneck, c = self._dense("bottleneck", c, 2, max(1, c // 2))
        self.ups, self.up_blocks = [], []
        for k in reversed(range(cfg.stages)):
            ck = lg * 2**k
            self.ups.append(self._module(f"up{k}", c, ck, 4, 2, 1, transpose=True))
            ci = ck + (skip_ch[k] if cfg.skip_connections else 0)
            mods, c = self._dense(f"dec{k}", ci, 2, max(1, ck // 2))
            self.up_blocks.append(mods)
        self.head = self._conv("head", c, 1, 3, 1, 1)

    def __call__(self, x: Tensor, mode: Mode = EVAL) -> Tensor:
        _check_extent(x)
        if x.shape[1] != self.cfg.refiner_in:
            raise NetConfigError(f"refiner expects {self.cfg.refiner_in} channels, got {x.shape[1]}")
        h = self._apply_conv(self.stem, x)
        skips = []
        for k, (mods, down) in enumerate(zip(self.down_blocks, self.downs)):
            h = self._apply_dense(mods, h, mode)
            skips.append(T.concat([x, h], axis=1) if k == 0 else h)
            h = self._apply_module(down, h, mode)
        h = self._apply_dense(self.bottleneck, h, mode)
        for up, mods, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            h = self._apply_module(up, h, mode, out_hw=skip.shape[-2:])
            h = self._dropout(h, mode)
            if self.cfg.skip_connections:
                h = T.concat([h, skip], axis=1)
            h = self._apply_dense(mods, h, mode)
        return self._apply_conv(self.head, h)

    def _dropout(self, h: Tensor, mode: Mode) -> Tensor:
        p = self.cfg.dropout_rate
        if not mode.training or p == 0:
            return h
        if mode.rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (mode.rng.random(h.shape) >= p).astype(h.dtype) / (1.0 - p)
        return h * keep


class Critic(_Net):
    """Dense critic with one score map per transition layer."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, sigmoid: bool = True):
        super().__init__(cfg, rng)
        ld = cfg.ld
        growth = max(1, ld // 2)
        self.sigmoid = sigmoid
        self.stem = self._conv("stem", cfg.critic_in, ld, 3, 1, 1)
        self.blocks, self.transitions, self.heads = [], [], []
        for i, stride in enumerate(cfg.critic_strides):
            mods, c = self._dense(f"block{i}", ld, 4, growth)
            self.blocks.append(mods)
            self.transitions.append(self._module(f"tran{i}", c, ld, 4, stride, 1))
            self.heads.append(self._conv(f"head{i}", ld, 1, 3, 1, 1))

    @property
    def num_scales(self) -> int:
        return len(self.heads)

    def __call__(self, x: Tensor, mode: Mode = EVAL) -> list[Tensor]:
        _check_extent(x)
        if x.shape[1] != self.cfg.critic_in:
            raise NetConfigError(f"critic expects {self.cfg.critic_in} channels, got {x.shape[1]}")
        h = self._apply_conv(self.stem, x)
        outs = []
        for mods, tran, head in zip(self.blocks, self.transitions, self.heads):
            h = self._apply_dense(mods, h, mode)
            h = self._apply_module(tran, h, mode)
            score = self._apply_conv(head, h)
            outs.append(score.sigmoid() if self.sigmoid else score)
        return outs


def build_refiner(cfg: NetConfig, seed: int | np.random.Generator = 0) -> Refiner:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Refiner(cfg, rng)


def build_discriminator(cfg: NetConfig, seed: int | np.random.Generator = 0, sigmoid: bool = True) -> Critic:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Critic(cfg, rng, sigmoid=sigmoid)
