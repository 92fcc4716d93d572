"""Small frozen transformer stack hosting the adapters.

Pre-norm blocks over a flattened token grid:

    h   = x + Attn(unit(LN1(x)))      # unit output replaces the attention input
    out = h + MLP(LN2(h))

The physical-prior unit sits between the first layer norm and multi-head
attention and consumes the tokens reshaped back to their 2D grid; the
low-rank baseline instead adds deltas inside the query and value
projections. All host weights are frozen; only adapter parameters train.

There is no class token and no patch embedding: inputs are already
(width, height, channels) grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import spectral
from .adapters import ALL_PATHS, LoraAdapter, MoppaUnit, match_budget
from .autodiff import Parameter, Tape
from .errors import ConfigError, DimensionError
from .physics import DEFAULT_ETA, HeadLayout

ADAPTER_KINDS = ("moppa", "lora", "none")

_HOST_STREAM, _ADAPTER_STREAM = 0, 1


@dataclass(frozen=True)
class ModelConfig:
    """Host geometry plus the adapter kind to attach."""

    width: int = 8
    height: int = 8
    channels: int = 96
    heads: int = 4
    depth: int = 4
    adapter: str = "moppa"
    seed: int = 0
    lora_rank: int | None = None
    eta: float = DEFAULT_ETA
    moppa_paths: tuple = ALL_PATHS

    def __post_init__(self):
        if min(self.width, self.height, self.channels, self.heads) < 1:
            raise ConfigError(
                f"grid/channels/heads must be positive, got "
                f"{self.width}x{self.height}, D={self.channels}, N={self.heads}"
            )
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"heads must divide channels, got N={self.heads}, D={self.channels}"
            )
        if self.adapter not in ADAPTER_KINDS:
            raise ConfigError(f"adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")
        if self.lora_rank is not None and not (1 <= self.lora_rank < self.channels):
            raise ConfigError(
                f"lora_rank must be in [1, {self.channels - 1}], got {self.lora_rank}"
            )
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")

    @property
    def tokens(self) -> int:
        return self.width * self.height

    def layout(self) -> HeadLayout:
        return HeadLayout(channels=self.channels, heads=self.heads, tokens=self.tokens)


@dataclass
class BlockWeights:
    """Frozen weights of one pre-norm transformer block."""

    ln1_gain: Parameter
    ln1_bias: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter
    w1: Parameter
    w2: Parameter

    def parameters(self) -> list:
        return [
            self.ln1_gain, self.ln1_bias, self.wq, self.wk, self.wv, self.wo,
            self.ln2_gain, self.ln2_bias, self.w1, self.w2,
        ]


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # Redraw anything beyond 2 sigma; deterministic for a given generator state.
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class ToyModel:
    """Frozen transformer stack with optional adapters per block."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.layout = cfg.layout()
        d = cfg.channels
        host_ss, adapter_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        host_rng = np.random.Generator(np.random.PCG64(host_ss))

        def frozen(name, value):
            return Parameter(name, value, trainable=False)

        self.blocks = []
        for i in range(cfg.depth):
            prefix = f"block{i}"
            self.blocks.append(BlockWeights(
                ln1_gain=frozen(f"{prefix}.ln1.gain", np.ones(d)),
                ln1_bias=frozen(f"{prefix}.ln1.bias", np.zeros(d)),
                wq=frozen(f"{prefix}.attn.wq", _trunc_normal(host_rng, (d, d))),
                wk=frozen(f"{prefix}.attn.wk", _trunc_normal(host_rng, (d, d))),
                wv=frozen(f"{prefix}.attn.wv", _trunc_normal(host_rng, (d, d))),
                wo=frozen(f"{prefix}.attn.wo", _trunc_normal(host_rng, (d, d))),
                ln2_gain=frozen(f"{prefix}.ln2.gain", np.ones(d)),
                ln2_bias=frozen(f"{prefix}.ln2.bias", np.zeros(d)),
                w1=frozen(f"{prefix}.mlp.w1", _trunc_normal(host_rng, (d, 4 * d))),
                w2=frozen(f"{prefix}.mlp.w2", _trunc_normal(host_rng, (4 * d, d))),
            ))

        self.units = None
        self.loras = None
        self.lora_rank = None
        if cfg.adapter == "lora" and cfg.depth > 0:
            self.lora_rank = cfg.lora_rank or match_budget(
                self.layout, placement=("q", "v"), blocks=cfg.depth
            ).rank
        self.reinit_adapters(np.random.Generator(np.random.PCG64(adapter_ss)))

    def reinit_adapters(self, rng: np.random.Generator):
        """Draw fresh adapter parameters; host weights are untouched."""
        cfg = self.cfg
        if cfg.adapter == "moppa":
            self.units = [
                MoppaUnit(
                    self.layout, cfg.width, cfg.height, rng,
                    eta=cfg.eta, paths=cfg.moppa_paths, name=f"block{i}.moppa",
                )
                for i in range(cfg.depth)
            ]
        elif cfg.adapter == "lora":
            self.loras = [
                {
                    proj: LoraAdapter(cfg.channels, self.lora_rank, rng,
                                      name=f"block{i}.lora.{proj}")
                    for proj in ("q", "v")
                }
                for i in range(cfg.depth)
            ]

    def adapter_parameters(self) -> list:
        params = []
        for unit in self.units or []:
            params.extend(unit.parameters())
        for pair in self.loras or []:
            for proj in ("q", "v"):
                params.extend(pair[proj].parameters())
        return params

    def host_parameters(self) -> list:
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def adapter_param_count(self) -> int:
        return sum(p.value.size for p in self.adapter_parameters() if p.trainable)

    def _attention(self, tape: Tape, index: int, z: ad.Node) -> ad.Node:
        cfg = self.cfg
        bw = self.blocks[index]
        tokens, d = z.shape
        heads, dh = cfg.heads, cfg.channels // cfg.heads
        lora = self.loras[index] if self.loras else None

        q = ad.matmul(z, tape.param(bw.wq))
        k = ad.matmul(z, tape.param(bw.wk))
        v = ad.matmul(z, tape.param(bw.wv))
        if lora:
            q = ad.add(q, lora["q"].delta(tape, z))
            v = ad.add(v, lora["v"].delta(tape, z))

        qh = ad.transpose(ad.reshape(q, (tokens, heads, dh)), (1, 0, 2))
        kh = ad.transpose(ad.reshape(k, (tokens, heads, dh)), (1, 0, 2))
        vh = ad.transpose(ad.reshape(v, (tokens, heads, dh)), (1, 0, 2))

        scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores)
        mixed = ad.matmul(attn, vh)  # (heads, tokens, dh)
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (tokens, d))
        return ad.matmul(merged, tape.param(bw.wo))

    def build_forward(self, tape: Tape, x: np.ndarray):
        """Record the full forward pass; returns (output node, per-unit penalties)."""
        cfg = self.cfg
        x = spectral.check_spatial(x)
        if x.shape != (cfg.width, cfg.height, cfg.channels):
            raise DimensionError(
                f"input shape {x.shape} does not match the configured "
                f"{cfg.width}x{cfg.height}x{cfg.channels} grid"
            )
        tokens = ad.reshape(tape.constant(x), (cfg.tokens, cfg.channels))
        regs = []
        for i in range(cfg.depth):
            bw = self.blocks[i]
            z = ad.layer_norm(tokens, tape.param(bw.ln1_gain), tape.param(bw.ln1_bias))
            if self.units:
                unit = self.units[i]
                alpha = unit.route(tape)
                grid = ad.reshape(z, (cfg.width, cfg.height, cfg.channels))
                z = ad.reshape(unit.apply(tape, grid, alpha), (cfg.tokens, cfg.channels))
                regs.append(unit.regularization(tape, alpha))
            hidden = ad.add(tokens, self._attention(tape, i, z))
            z2 = ad.layer_norm(hidden, tape.param(bw.ln2_gain), tape.param(bw.ln2_bias))
            mlp = ad.matmul(ad.gelu(ad.matmul(z2, tape.param(bw.w1))), tape.param(bw.w2))
            tokens = ad.add(hidden, mlp)
        out = ad.reshape(tokens, (cfg.width, cfg.height, cfg.channels))
        return out, regs


def build_model(cfg: ModelConfig) -> ToyModel:
    """Deterministically build the frozen host and its adapters from cfg.seed."""
    return ToyModel(cfg)


def forward(model: ToyModel, x: np.ndarray) -> np.ndarray:
    """Plain forward evaluation; returns the output grid as an array."""
    tape = Tape()
    y, _ = model.build_forward(tape, x)
    return y.value
