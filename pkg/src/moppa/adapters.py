"""Pluggable adapters: the physical-prior unit and a low-rank baseline.

:class:`MoppaUnit` owns the trainable parameters of one unit (filter
coefficients, per-channel times, rank-1 source factors, router logits) and
builds its fused forward pass on an autodiff tape. :class:`LoraAdapter` is
the matched-budget low-rank baseline attached to one linear projection.

Parameter accounting functions realize the head-sharing count: the Poisson
source costs L*N + D/N trainable values instead of the dense L*D.

Checkpoints are flat, versioned JSON files mapping parameter paths to shape
plus base64-encoded row-major float64 bytes, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import spectral
from .autodiff import Parameter
from .errors import BudgetError, CheckpointError, ConfigError, DimensionError, ParameterError
from .physics import (
    DEFAULT_ETA,
    HeadLayout,
    HeatParams,
    MoppaUnitParams,
    PoissonParams,
    WaveParams,
)
from .routing import RouterState

ALL_PATHS = ("heat", "wave", "poisson")


def moppa_param_count(layout: HeadLayout) -> int:
    """Trainable values in one full unit: k, t_heat, c, t_wave, h1, h2, logits."""
    ln = layout.tokens * layout.heads
    return 2 * (ln + layout.channels) + poisson_param_count(layout) + 3


def poisson_param_count(layout: HeadLayout) -> int:
    """Head-shared source distribution: L*N + D/N."""
    return layout.tokens * layout.heads + layout.channels_per_head


def dense_source_param_count(layout: HeadLayout) -> int:
    """The unshared alternative: one source value per token per channel."""
    return layout.tokens * layout.channels


class MoppaUnit:
    """Trainable mixture of frequency-domain physical operators.

    ``paths`` selects the active operators ("heat", "wave", "poisson"); the
    router carries one logit per active path. At initialization the filters
    start near identity (t = 1, small positive k and c), the additive field
    near zero, and the router uniform.
    """

    def __init__(
        self,
        layout: HeadLayout,
        width: int,
        height: int,
        rng: np.random.Generator,
        eta: float = DEFAULT_ETA,
        paths=ALL_PATHS,
        name: str = "moppa",
    ):
        paths = tuple(paths)
        if not paths or any(p not in ALL_PATHS for p in paths):
            raise ConfigError(f"paths must be a non-empty subset of {ALL_PATHS}, got {paths}")
        if len(set(paths)) != len(paths):
            raise ConfigError(f"duplicate paths in {paths}")
        if eta <= 0:
            raise ParameterError(f"eta must be > 0, got {eta}")
        if layout.tokens != width * height:
            raise DimensionError(
                f"layout has {layout.tokens} tokens but the grid is {width}x{height}"
            )
        self.layout = layout
        self.width = width
        self.height = height
        self.eta = eta
        self.paths = paths
        self.name = name

        self._grid = spectral.frequency_grid(width, height)
        self._inv_denom = 1.0 / (self._grid.omega_sq + eta)

        self.k = self.t_heat = self.c = self.t_wave = None
        self.h1 = self.h2 = None
        self.logits = None
        self.reinit(rng)

    def reinit(self, rng: np.random.Generator):
        """Draw fresh initial values (filters near identity, field near zero)."""
        lay = self.layout
        coeff_shape = (lay.tokens, lay.heads)
        if "heat" in self.paths:
            self.k = Parameter(f"{self.name}.heat.k", rng.uniform(0.0, 0.05, coeff_shape))
            self.t_heat = Parameter(
                f"{self.name}.heat.t", np.ones(lay.channels), weight_decay=False
            )
        if "wave" in self.paths:
            self.c = Parameter(f"{self.name}.wave.c", rng.uniform(0.0, 0.05, coeff_shape))
            self.t_wave = Parameter(
                f"{self.name}.wave.t", np.ones(lay.channels), weight_decay=False
            )
        if "poisson" in self.paths:
            self.h1 = Parameter(f"{self.name}.poisson.h1", rng.normal(0.0, 0.01, coeff_shape))
            self.h2 = Parameter(
                f"{self.name}.poisson.h2", rng.normal(0.0, 0.01, lay.channels_per_head)
            )
        self.logits = Parameter(
            f"{self.name}.router.logits", np.zeros(len(self.paths)), weight_decay=False
        )

    def parameters(self) -> list:
        params = []
        if "heat" in self.paths:
            params += [self.k, self.t_heat]
        if "wave" in self.paths:
            params += [self.c, self.t_wave]
        if "poisson" in self.paths:
            params += [self.h1, self.h2]
        params.append(self.logits)
        return params

    def trainable_count(self) -> int:
        return sum(p.value.size for p in self.parameters() if p.trainable)

    def route(self, tape: ad.Tape) -> ad.Node:
        """Router blend weights as a node (softmax of the logits)."""
        return ad.softmax(tape.param(self.logits))

    def regularization(self, tape: ad.Tape, alpha: ad.Node) -> ad.Node:
        """Negative entropy sum(alpha * log(alpha)) of the blend."""
        return ad.sum_all(ad.mul(alpha, ad.log(alpha)))

    def apply(self, tape: ad.Tape, x: ad.Node, alpha: ad.Node) -> ad.Node:
        """Fused unit forward on the tape: one DCT/IDCT pair for all paths."""
        w, h, d = self.width, self.height, self.layout.channels
        if x.shape != (w, h, d):
            raise DimensionError(f"unit expects input shape {(w, h, d)}, got {x.shape}")
        grid = self._grid
        mix_filter = None
        additive = None
        for i, path in enumerate(self.paths):
            a_i = ad.select(alpha, i)
            if path == "heat":
                term = ad.mul(
                    ad.heat_filter(tape.param(self.k), tape.param(self.t_heat),
                                   grid.omega_sq, w, h, d),
                    a_i,
                )
            elif path == "wave":
                term = ad.mul(
                    ad.wave_filter(tape.param(self.c), tape.param(self.t_wave),
                                   grid.omega_abs, w, h, d),
                    a_i,
                )
            else:
                field = ad.poisson_source_field(
                    tape.param(self.h1), tape.param(self.h2), self._inv_denom, w, h
                )
                additive = ad.mul(field, a_i)
                continue
            mix_filter = term if mix_filter is None else ad.add(mix_filter, term)

        if mix_filter is not None:
            coeffs = ad.mul(ad.dct2d(x), mix_filter)
            if additive is not None:
                coeffs = ad.add(coeffs, additive)
        else:
            coeffs = additive
        return ad.idct2d(coeffs)

    def param_struct(self) -> MoppaUnitParams:
        """Current values as the plain parameter struct used by the operators.

        Only defined for a full three-path unit.
        """
        if self.paths != ALL_PATHS:
            raise ConfigError(f"param_struct requires all paths, unit has {self.paths}")
        return MoppaUnitParams(
            heat=HeatParams(self.k.value.copy(), self.t_heat.value.copy()),
            wave=WaveParams(self.c.value.copy(), self.t_wave.value.copy()),
            poisson=PoissonParams(self.h1.value.copy(), self.h2.value.copy(), self.eta),
            router=RouterState(self.logits.value.copy()),
            layout=self.layout,
        )


@dataclass
class LoraParams:
    """Low-rank factors of one adapted projection: delta = scale * (x @ a @ b)."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    scale: float


def lora_forward(x: np.ndarray, p: LoraParams) -> np.ndarray:
    """Low-rank delta for a token matrix (L, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a token matrix (L, D), got shape {x.shape}")
    d = x.shape[1]
    if p.rank >= d:
        raise ConfigError(f"rank must be < channels, got rank={p.rank} D={d}")
    if p.a.shape != (d, p.rank) or p.b.shape != (p.rank, d):
        raise DimensionError(
            f"factor shapes {p.a.shape}/{p.b.shape} do not match D={d}, rank={p.rank}"
        )
    return p.scale * ((x @ p.a) @ p.b)


class LoraAdapter:
    """Trainable low-rank delta attached to one linear projection.

    Standard zero-delta start: a ~ Normal(0, 0.02), b = 0, scale = 1/rank.
    """

    def __init__(self, channels: int, rank: int, rng: np.random.Generator, name: str):
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}")
        if rank >= channels:
            raise ConfigError(f"rank must be < channels, got rank={rank} D={channels}")
        self.channels = channels
        self.rank = rank
        self.scale = 1.0 / rank
        self.name = name
        self.a = self.b = None
        self.reinit(rng)

    def reinit(self, rng: np.random.Generator):
        self.a = Parameter(f"{self.name}.a", rng.normal(0.0, 0.02, (self.channels, self.rank)))
        self.b = Parameter(f"{self.name}.b", np.zeros((self.rank, self.channels)))

    def parameters(self) -> list:
        return [self.a, self.b]

    def trainable_count(self) -> int:
        return self.a.value.size + self.b.value.size

    def delta(self, tape: ad.Tape, z: ad.Node) -> ad.Node:
        return ad.scale(ad.matmul(ad.matmul(z, tape.param(self.a)), tape.param(self.b)),
                        self.scale)

    def param_struct(self) -> LoraParams:
        return LoraParams(self.a.value.copy(), self.b.value.copy(), self.rank, self.scale)


@dataclass(frozen=True)
class BudgetMatch:
    """Largest feasible rank and both totals it was derived from."""

    rank: int
    moppa_total: int
    lora_total: int


def match_budget(layout: HeadLayout, placement=("q", "v"), blocks: int = 1) -> BudgetMatch:
    """Largest rank whose total low-rank count stays within the unit budget.

    ``placement`` names the adapted projections per block; each costs
    2 * D * rank trainable values. Raises :class:`BudgetError` when even
    rank 1 exceeds the unit count.
    """
    if blocks < 1 or not placement:
        raise ConfigError("need at least one block and one adapted projection")
    moppa_total = blocks * moppa_param_count(layout)
    per_rank = blocks * len(placement) * 2 * layout.channels
    rank = moppa_total // per_rank
    if rank < 1:
        raise BudgetError(
            f"no feasible rank: rank-1 low-rank count {per_rank} exceeds "
            f"unit count {moppa_total}"
        )
    rank = min(rank, layout.channels - 1)
    return BudgetMatch(rank=rank, moppa_total=moppa_total, lora_total=rank * per_rank)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, meta=None) -> None:
    """Write parameters to a flat, versioned JSON key-value file.

    Arrays are stored as base64 little-endian float64 bytes in row-major
    order, so the round trip is bit-exact. Keys are sorted for byte-stable
    output.
    """
    entries = {}
    for p in params:
        if p.name in entries:
            raise CheckpointError(f"duplicate parameter path {p.name!r}")
        arr = np.ascontiguousarray(p.value, dtype="<f8")
        entries[p.name] = {
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "params": entries,
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params dict name -> array, meta dict)."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {doc.get('format_version')!r} in {path}"
        )
    out = {}
    for name, entry in doc.get("params", {}).items():
        try:
            shape = tuple(entry["shape"])
            raw = base64.b64decode(entry["data"], validate=True)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        except (KeyError, ValueError, TypeError) as e:
            raise CheckpointError(f"corrupt entry {name!r} in {path}: {e}") from e
        out[name] = arr
    return out, dict(doc.get("meta", {}))


def restore_parameters(params, loaded: dict) -> None:
    """Copy loaded arrays into matching parameters (by name, exact shape)."""
    for p in params:
        if p.name not in loaded:
            raise CheckpointError(f"checkpoint is missing parameter {p.name!r}")
        arr = loaded[p.name]
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: checkpoint {arr.shape}, "
                f"parameter {p.value.shape}"
            )
        p.value[...] = arr
