"""Command-line entry point.

Subcommands:

* ``properties``   -- run the operator/transform invariant suite
* ``gradcheck``    -- finite-difference check of every trainable group
* ``regress``      -- the two-arm adaptation-analysis comparison
* ``ablate``       -- prior-removal and regularization on/off grid
* ``dump-filters`` -- emit learned k / c / h1 arrays from a checkpoint

Every command writes CSV reports into the output directory and prints a
summary. Exit codes: 0 success, 1 check failure, 2 configuration error.
Runs are byte-deterministic given (config, seed) when the thread count is 1
(``--threads`` or the MOPPA_THREADS environment variable).
"""

from __future__ import annotations

import argparse
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .adapters import load_checkpoint, save_checkpoint
from .autodiff import Tape, grad_check
from .config import ExperimentConfig, load_config
from .errors import CheckpointError, ConfigError, MoppaError
from .physics import (
    HeadLayout,
    HeatParams,
    MoppaUnitParams,
    PoissonParams,
    WaveParams,
    heat_apply,
    moppa_forward,
    moppa_forward_unfused,
    pde_residual_heat,
    pde_residual_poisson,
    pde_residual_wave,
    wave_apply,
)
from .routing import RouterState, route_regularization, route_weights
from .spectral import dct2d, frequency_grid, idct2d
from .toymodel import build_model
from .training import loss_nodes, make_task, run_trial, summarize

GRADCHECK_TOLERANCE = 1e-5


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _ensure_out(directory):
    os.makedirs(directory, exist_ok=True)
    return directory


def _thread_count(args) -> int:
    if getattr(args, "threads", None) is not None:
        count = args.threads
    else:
        raw = os.environ.get("MOPPA_THREADS", "1")
        try:
            count = int(raw)
        except ValueError:
            raise ConfigError(f"MOPPA_THREADS must be an integer, got {raw!r}")
    if count < 1:
        raise ConfigError(f"thread count must be >= 1, got {count}")
    return count


def _run_jobs(jobs, threads):
    """Run zero-argument callables, preserving order; fan out if threads > 1."""
    if threads == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: job(), jobs))


# ---------------------------------------------------------------------------
# properties


def _random_unit(rng, layout, eta):
    coeff = (layout.tokens, layout.heads)
    return MoppaUnitParams(
        heat=HeatParams(rng.uniform(-0.05, 0.05, coeff), rng.uniform(0.0, 2.0, layout.channels)),
        wave=WaveParams(rng.uniform(-0.05, 0.05, coeff), rng.uniform(0.0, 2.0, layout.channels)),
        poisson=PoissonParams(
            rng.normal(0.0, 0.01, coeff), rng.normal(0.0, 0.01, layout.channels_per_head), eta
        ),
        router=RouterState(rng.normal(0.0, 1.0, 3)),
        layout=layout,
    )


def _check_dct_roundtrip(rng, eta):
    worst = 0.0
    for w, h, c in ((4, 4, 1), (8, 8, 8), (14, 14, 4)):
        x = rng.standard_normal((w, h, c))
        worst = max(worst, float(np.max(np.abs(idct2d(dct2d(x)) - x))))
    return worst


def _check_dct_parseval(rng, eta):
    worst = 0.0
    for w, h, c in ((4, 4, 1), (8, 8, 8), (14, 14, 4)):
        x = rng.standard_normal((w, h, c))
        worst = max(worst, abs(float(np.linalg.norm(dct2d(x)) - np.linalg.norm(x))))
    return worst


def _check_fusion_identity(rng, eta):
    layout = HeadLayout(channels=16, heads=4, tokens=64)
    g = frequency_grid(8, 8)
    worst = 0.0
    for _ in range(20):
        unit = _random_unit(rng, layout, eta)
        x = rng.standard_normal((8, 8, 16))
        delta = moppa_forward(x, unit, g) - moppa_forward_unfused(x, unit, g)
        worst = max(worst, float(np.max(np.abs(delta))))
    return worst


def _check_heat_semigroup(rng, eta):
    g = frequency_grid(8, 8)
    k = rng.uniform(0.0, 0.5, (64, 2))
    t1 = rng.uniform(0.0, 1.0, 8)
    t2 = rng.uniform(0.0, 1.0, 8)
    x = rng.standard_normal((8, 8, 8))
    once = heat_apply(x, HeatParams(k, t1 + t2), g)
    twice = heat_apply(heat_apply(x, HeatParams(k, t1), g), HeatParams(k, t2), g)
    return float(np.max(np.abs(twice - once)))


def _check_identity_t0_heat(rng, eta):
    g = frequency_grid(8, 8)
    x = rng.standard_normal((8, 8, 8))
    p = HeatParams(rng.uniform(0.0, 0.5, (64, 2)), np.zeros(8))
    return float(np.max(np.abs(heat_apply(x, p, g) - x)))


def _check_identity_t0_wave(rng, eta):
    g = frequency_grid(8, 8)
    x = rng.standard_normal((8, 8, 8))
    p = WaveParams(rng.uniform(0.0, 0.5, (64, 2)), np.zeros(8))
    return float(np.max(np.abs(wave_apply(x, p, g) - x)))


def _check_mean_preservation(rng, eta):
    g = frequency_grid(8, 8)
    x = rng.standard_normal((8, 8, 8))
    heat = heat_apply(x, HeatParams(rng.uniform(0.0, 0.5, (64, 2)), rng.uniform(0, 2, 8)), g)
    wave = wave_apply(x, WaveParams(rng.uniform(0.0, 0.5, (64, 2)), rng.uniform(0, 2, 8)), g)
    means = np.mean(x, axis=(0, 1))
    worst_heat = float(np.max(np.abs(np.mean(heat, axis=(0, 1)) - means)))
    worst_wave = float(np.max(np.abs(np.mean(wave, axis=(0, 1)) - means)))
    return max(worst_heat, worst_wave)


def _check_pde_heat(rng, eta):
    g = frequency_grid(8, 8)
    return pde_residual_heat(0.5, 1.0, rng.standard_normal((8, 8, 1)), g, dt=1e-5)


def _check_pde_wave(rng, eta):
    g = frequency_grid(8, 8)
    return pde_residual_wave(1.0, 0.7, rng.standard_normal((8, 8, 1)), g, dt=1e-4)


def _check_pde_poisson(rng, eta):
    # Unit source distribution, so the defect equals the eta/(omega^2+eta) ratio.
    layout = HeadLayout(channels=2, heads=2, tokens=64)
    g = frequency_grid(8, 8)
    p = PoissonParams(np.ones((64, 2)), np.ones(1), eta)
    return pde_residual_poisson(p, g, layout)


def _check_poisson_input_independence(rng, eta):
    layout = HeadLayout(channels=16, heads=4, tokens=64)
    g = frequency_grid(8, 8)
    unit = _random_unit(rng, layout, eta)
    # Saturated router: alpha = (0, 0, 1) exactly in double precision.
    unit.router.logits[...] = (-1e4, -1e4, 1e4)
    y1 = moppa_forward(rng.standard_normal((8, 8, 16)), unit, g)
    y2 = moppa_forward(rng.standard_normal((8, 8, 16)), unit, g)
    return float(np.max(np.abs(y1 - y2)))


def _check_route_reg_simplex(rng, eta):
    log3 = math.log(3.0)
    worst = abs(route_regularization(np.full(3, 1.0 / 3.0)) + log3)
    worst = max(worst, abs(route_regularization(np.array([1.0, 0.0, 0.0]))))
    for i in range(21):
        for j in range(21 - i):
            alpha = np.array([i, j, 20 - i - j], dtype=np.float64) / 20.0
            value = route_regularization(alpha)
            worst = max(worst, max(0.0, -log3 - value), max(0.0, value))
    return worst


_PROPERTY_CHECKS = (
    ("dct_roundtrip", _check_dct_roundtrip, 1e-10),
    ("dct_parseval", _check_dct_parseval, 1e-10),
    ("fusion_identity", _check_fusion_identity, 1e-12),
    ("heat_semigroup", _check_heat_semigroup, 1e-10),
    ("identity_at_t0_heat", _check_identity_t0_heat, 1e-12),
    ("identity_at_t0_wave", _check_identity_t0_wave, 1e-12),
    ("mean_preservation", _check_mean_preservation, 1e-12),
    ("pde_residual_heat", _check_pde_heat, 1e-4),
    ("pde_residual_wave", _check_pde_wave, 1e-3),
    ("pde_residual_poisson", _check_pde_poisson, 0.01),
    ("poisson_input_independence", _check_poisson_input_independence, 1e-15),
    ("route_reg_simplex", _check_route_reg_simplex, 1e-12),
)


def run_property_checks(eta: float = 0.001):
    """Evaluate every invariant check; returns rows (name, error, tol, passed)."""
    rows = []
    for name, fn, tol in _PROPERTY_CHECKS:
        rng = np.random.default_rng(20240 + len(name))
        try:
            error = float(fn(rng, eta))
        except MoppaError as e:
            print(f"check {name} raised: {e}", file=sys.stderr)
            error = float("inf")
        rows.append((name, error, tol, error <= tol))
    return rows


def cmd_properties(args) -> int:
    out = _ensure_out(args.out)
    rows = run_property_checks(eta=args.eta)
    _write_csv(
        os.path.join(out, "properties.csv"),
        ("name", "max_error", "tolerance", "pass"),
        [(n, e, t, "pass" if ok else "fail") for n, e, t, ok in rows],
    )
    for name, error, tol, ok in rows:
        print(f"{name}: max_error={error:.3e} tolerance={tol:.1e} "
              f"{'PASS' if ok else 'FAIL'}")
    failed = [n for n, _, _, ok in rows if not ok]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _loss_builder(model, task, reg_coeff):
    def build():
        tape = Tape()
        loss, _ = loss_nodes(model, tape, task, reg_coeff)
        return tape, loss

    return build


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    out = _ensure_out(args.out or cfg.output.directory)
    seed = cfg.train.seeds[0]
    task = make_task(cfg.model.width, cfg.model.height, cfg.model.channels, seed)
    rows = []
    worst = 0.0
    for kind in ("moppa", "lora"):
        model = build_model(cfg.model_for(kind))
        reg_coeff = cfg.adapter.w if kind == "moppa" else 0.0
        result = grad_check(
            _loss_builder(model, task, reg_coeff),
            model.adapter_parameters(),
            eps=1e-4,
        )
        for name in sorted(result.per_param):
            rows.append((name, result.per_param[name]))
        worst = max(worst, result.max_rel_err)
    _write_csv(os.path.join(out, "gradcheck.csv"), ("param", "max_rel_err"), rows)
    for name, err in rows:
        print(f"{name}: rel_err={err:.3e}")
    if worst > GRADCHECK_TOLERANCE:
        print(f"gradient check failed: worst {worst:.3e} > {GRADCHECK_TOLERANCE:.1e}",
              file=sys.stderr)
        return 1
    print(f"all gradients within {GRADCHECK_TOLERANCE:.1e} (worst {worst:.3e})")
    return 0


# ---------------------------------------------------------------------------
# regress


def _apply_seed_override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed_override", None) is None:
        return cfg
    from dataclasses import replace

    return replace(cfg, train=replace(cfg.train, seeds=(args.seed_override,)))


def _metrics_row(metrics, prefix=()):
    status = "diverged" if metrics.diverged else "ok"
    return (*prefix, metrics.seed, metrics.adapter, metrics.iterations,
            metrics.final_mse, metrics.param_count, status)


def cmd_regress(args) -> int:
    cfg = _apply_seed_override(load_config(args.config), args)
    out = _ensure_out(args.out or cfg.output.directory)
    threads = _thread_count(args)

    jobs = []
    for kind in ("moppa", "lora"):
        model_cfg = cfg.model_for(kind)
        for seed in cfg.train.seeds:
            jobs.append(lambda mc=model_cfg, s=seed: run_trial(mc, cfg.train, s))
    results = _run_jobs(jobs, threads)

    rows = []
    by_kind = {"moppa": [], "lora": []}
    index = 0
    for kind in ("moppa", "lora"):
        for seed in cfg.train.seeds:
            metrics, model = results[index]
            index += 1
            by_kind[kind].append(metrics)
            rows.append(_metrics_row(metrics))
            _write_csv(
                os.path.join(out, f"history_{kind}_seed{seed}.csv"),
                ("iteration", "mse"),
                list(metrics.history),
            )
            if kind == "moppa" and not metrics.diverged:
                save_checkpoint(
                    os.path.join(out, f"checkpoint_moppa_seed{seed}.json"),
                    model.adapter_parameters(),
                    meta={
                        "width": cfg.model.width,
                        "height": cfg.model.height,
                        "channels": cfg.model.channels,
                        "heads": cfg.model.heads,
                        "depth": cfg.model.depth,
                        "seed": seed,
                    },
                )
    for kind in ("moppa", "lora"):
        mean, std = summarize(by_kind[kind])
        rows.append(("summary", kind, cfg.train.iterations,
                     f"{_fmt(mean)}±{_fmt(std)}",
                     by_kind[kind][0].param_count, "summary"))
        print(f"{kind}: final MSE {mean:.4f}±{std:.4f} over {len(by_kind[kind])} seeds "
              f"({by_kind[kind][0].param_count} trainable params)")

    _write_csv(
        os.path.join(out, "regress.csv"),
        ("seed", "adapter", "iterations", "final_mse", "param_count", "status"),
        rows,
    )
    return 0


# ---------------------------------------------------------------------------
# ablate

_ABLATION_VARIANTS = (
    ("full", None),
    ("no_heat", "heat"),
    ("no_wave", "wave"),
    ("no_poisson", "poisson"),
    ("no_adapter", "all"),
)


def cmd_ablate(args) -> int:
    from dataclasses import replace

    cfg = _apply_seed_override(load_config(args.config), args)
    out = _ensure_out(args.out or cfg.output.directory)
    threads = _thread_count(args)

    def variant_model_cfg(removed):
        if removed is None:
            return cfg.model_for("moppa")
        if removed == "all":
            return cfg.model_for("none")
        paths = tuple(p for p in ("heat", "wave", "poisson") if p != removed)
        return cfg.model_for("moppa", paths=paths)

    jobs, keys = [], []
    for variant, removed in _ABLATION_VARIANTS:
        model_cfg = variant_model_cfg(removed)
        reg_settings = [cfg.adapter.w, 0.0] if removed != "all" else [None]
        for reg_w in reg_settings:
            train_cfg = cfg.train if reg_w is None else replace(cfg.train, w=reg_w)
            for seed in cfg.train.seeds:
                keys.append((variant, reg_w, seed))
                jobs.append(lambda mc=model_cfg, tc=train_cfg, s=seed: run_trial(mc, tc, s))
    results = _run_jobs(jobs, threads)

    rows = []
    grouped = {}
    for (variant, reg_w, seed), (metrics, _model) in zip(keys, results):
        reg_values = [reg_w] if reg_w is not None else [cfg.adapter.w, 0.0]
        for rv in reg_values:  # the no-adapter run is emitted under both settings
            rows.append((variant, rv, *_metrics_row(metrics)))
            grouped.setdefault((variant, rv), []).append(metrics)
    summary_rows = []
    for (variant, rv), metrics_list in sorted(grouped.items()):
        mean, std = summarize(metrics_list)
        summary_rows.append((variant, rv, "summary", metrics_list[0].adapter,
                             cfg.train.iterations, f"{_fmt(mean)}±{_fmt(std)}",
                             metrics_list[0].param_count, "summary"))
        print(f"{variant} (w={rv}): final MSE {mean:.4f}±{std:.4f}")

    _write_csv(
        os.path.join(out, "ablation.csv"),
        ("variant", "reg_w", "seed", "adapter", "iterations", "final_mse",
         "param_count", "status"),
        rows + summary_rows,
    )
    return 0


# ---------------------------------------------------------------------------
# dump-filters

_FILTER_KEY = re.compile(r"^block(\d+)\.moppa\.(heat\.k|wave\.c|poisson\.h1)$")


def cmd_dump_filters(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    try:
        width, height = int(meta["width"]), int(meta["height"])
    except KeyError as e:
        raise CheckpointError(
            f"checkpoint {args.checkpoint} lacks grid metadata ({e})"
        ) from e
    blocks = sorted(
        {int(m.group(1)) for m in map(_FILTER_KEY.match, params) if m}
    )
    if not blocks:
        raise CheckpointError(f"no unit filter arrays found in {args.checkpoint}")
    out = _ensure_out(args.out)
    rows = []
    for b in blocks:
        arrays = {}
        for label, key in (("k", f"block{b}.moppa.heat.k"),
                           ("c", f"block{b}.moppa.wave.c"),
                           ("h1", f"block{b}.moppa.poisson.h1")):
            if key not in params:
                raise CheckpointError(f"checkpoint is missing {key!r}")
            arrays[label] = params[key]
        tokens, heads = arrays["k"].shape
        if tokens != width * height:
            raise CheckpointError(
                f"block {b} arrays have {tokens} token rows, expected {width * height}"
            )
        for n in range(heads):
            for p in range(width):
                for q in range(height):
                    l = p * height + q
                    rows.append((b, n, p, q, float(arrays["k"][l, n]),
                                 float(arrays["c"][l, n]), float(arrays["h1"][l, n])))
    path = os.path.join(out, "filters.csv")
    _write_csv(
        path,
        ("block", "head", "omega_x_index", "omega_y_index", "k", "c", "h1"),
        rows,
    )
    print(f"wrote {len(rows)} rows to {path}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moppa",
        description="Physical-prior adapter engine: invariant suites, gradient "
                    "checks, the regression comparison, ablations, and filter dumps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("properties", help="run the operator invariant suite")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--eta", type=float, default=0.001,
                   help="stabilizer override for the poisson checks (fault injection)")
    p.set_defaults(handler=cmd_properties)

    p = sub.add_parser("gradcheck", help="finite-difference check of all trainable groups")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(handler=cmd_gradcheck)

    for name, handler, help_text in (
        ("regress", cmd_regress, "run the two-arm regression comparison"),
        ("ablate", cmd_ablate, "run the prior-removal / regularization grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the configured seed list with this one seed")
        p.add_argument("--threads", type=int, default=None,
                       help="parallel trials (default: MOPPA_THREADS or 1)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("dump-filters", help="emit learned filter arrays from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file to read")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(handler=cmd_dump_filters)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MoppaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
