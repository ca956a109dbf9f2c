"""Command-line entry point: ``deqbilevel {train,grid,eval,naive-demo,selftest}``.

Configuration comes from a preset, an optional YAML file and command-line
flags, applied in that order.  A YAML file has up to four sections::

    train:   # any TrainConfig field; tau may be "auto"
    data:    # dataset source, see DataConfig
    grid:    # lists for the sweep, see GridConfig
    naive:   # snapshot iterations for naive-demo

Unknown sections or keys are rejected.
"""

import argparse
import contextlib
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .data_io import (
    Dataset,
    kernel_tiles,
    load_image_dir,
    load_mnist_idx,
    save_grid,
    smooth_image,
    synth_dataset,
)
from .equilibrium import EquilibriumProblem, StoppingRule, contraction_bound, solve_forward
from .forward_models import ProblemKind, build_operator
from .linops import Identity, RowMask, image_to_vector, vector_to_image
from .regnet import load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    grid_run,
    init_params,
    masked_mse,
    measurements,
    mse_loss,
    new_state,
    success_counts,
    train,
    train_naive,
    write_boxplot_data,
    write_epoch_csv,
    write_epoch_histogram,
    write_grid_summary,
)

logger = logging.getLogger("deqbilevel")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """``source`` is ``synthetic``, ``smooth`` (one piecewise-smooth image), ``mnist`` or ``dir``."""

    source: str = "synthetic"
    path: str = None  # IDX image file or image directory
    labels: str = None
    rows: int = 16
    cols: int = 16
    n_train: int = 32
    n_test: int = 8
    seed: int = 0


@dataclass
class GridConfig:
    taus: list = field(default_factory=lambda: [0.01, 0.1, 0.5, 0.9, 1.1, 2.1])
    gammas: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    activations: list = field(default_factory=lambda: ["relu", "softshrink", "identity"])
    alphas: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.5, 1.0])
    modes: list = field(default_factory=lambda: ["bilevel", "deq"])


@dataclass
class NaiveConfig:
    iterations: int = 100
    snapshots: list = field(default_factory=lambda: [1, 25, 50, 75, 100])


@dataclass
class Experiment:
    train: dict
    data: DataConfig
    grid: GridConfig
    naive: NaiveConfig
    preset: str = None


_CONV_PRESET = dict(
    task="denoise", activation="tanh", arch="conv", conv_channels=2, conv_size=11, conv_init="tv",
    xi=100.0, gamma=1.0, lam=18.156, alpha=0.1, spectral_normalize=True, tau="auto",
    rel_tol=1e-14, max_iter=1000, lr=3.2e-3, lr_end=3.2e-5, epochs=50, mode="deq",
)
_INPAINT = dict(task="inpaint", activation="softshrink", tau=0.5, gamma=1.0, alpha=0.05,
                hidden=64, epochs=150)

PRESETS = {
    "mnist-denoise": {
        "train": dict(task="denoise", activation="relu", tau=0.5, gamma=0.1, alpha=0.05),
        "data": dict(source="synthetic", rows=16, cols=16, n_train=32, n_test=8),
    },
    "mnist-inpaint": {
        "train": _INPAINT,
        "data": dict(source="synthetic", rows=16, cols=16, n_train=128, n_test=32),
    },
    "mnist-deblur": {
        "train": dict(task="deblur", activation="softshrink", tau=0.5, gamma=0.5, alpha=0.05,
                      epochs=100),
        "data": dict(source="synthetic", rows=16, cols=16, n_train=32, n_test=8),
    },
    "celeb-denoise": {
        "train": _CONV_PRESET,
        "data": dict(source="smooth", rows=64, cols=64, n_train=1, n_test=1),
    },
    "celeb-deblur": {
        "train": dict(_CONV_PRESET, task="deblur", conv_channels=30, conv_size=3),
        "data": dict(source="smooth", rows=64, cols=64, n_train=1, n_test=1),
    },
    "naive-inpaint": {
        "train": dict(_INPAINT, mode="naive"),
        "data": dict(source="synthetic", rows=16, cols=16, n_train=128, n_test=32),
    },
}

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _merge_section(target, values, allowed, section):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(values) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    target.update(values)


def load_experiment(preset=None, config_path=None, overrides=None):
    """Merge preset, YAML file and flag overrides into an :class:`Experiment`."""
    sections = {"train": {}, "data": {}, "grid": {}, "naive": {}}
    allowed = {
        "train": _TRAIN_KEYS,
        "data": {f.name for f in dataclasses.fields(DataConfig)},
        "grid": {f.name for f in dataclasses.fields(GridConfig)},
        "naive": {f.name for f in dataclasses.fields(NaiveConfig)},
    }
    file_cfg = {}
    if config_path is not None:
        with open(config_path) as fh:
            file_cfg = yaml.safe_load(fh) or {}
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must contain a mapping")
        unknown = set(file_cfg) - set(sections) - {"preset"}
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
        preset = preset or file_cfg.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        for name, values in PRESETS[preset].items():
            _merge_section(sections[name], values, allowed[name], name)
    for name in sections:
        if name in file_cfg:
            _merge_section(sections[name], file_cfg[name], allowed[name], name)
    _merge_section(sections["train"], overrides or {}, allowed["train"], "train")
    return Experiment(
        sections["train"], DataConfig(**sections["data"]), GridConfig(**sections["grid"]),
        NaiveConfig(**sections["naive"]), preset,
    )


def load_data(dc):
    """Train and test :class:`Dataset` for a data section."""
    if dc.source == "synthetic":
        full = synth_dataset(dc.seed, dc.n_train + dc.n_test, dc.rows, dc.cols)
        return full.split_at(dc.n_train)
    if dc.source == "smooth":
        # one image: training and test differ only in their noise
        img = image_to_vector(smooth_image(dc.seed, dc.rows, dc.cols))[None]
        shape = (dc.rows, dc.cols)
        return (Dataset(np.repeat(img, dc.n_train, 0), shape, "train", "smooth"),
                Dataset(np.repeat(img, dc.n_test, 0), shape, "test", "smooth"))
    if dc.path is None:
        raise ConfigError(f"data source {dc.source!r} needs a path")
    if dc.source == "mnist":
        full = load_mnist_idx(dc.path, dc.labels, limit=dc.n_train + dc.n_test)
    elif dc.source == "dir":
        full = load_image_dir(dc.path, limit=dc.n_train + dc.n_test)
    else:
        raise ConfigError(f"unknown data source {dc.source!r}")
    if len(full) < dc.n_train + dc.n_test:
        raise ConfigError(f"{len(full)} images available, {dc.n_train + dc.n_test} requested")
    return full.split_at(dc.n_train)


def resolve_config(train_section, image_shape):
    """Build the :class:`TrainConfig`; ``tau: auto`` becomes 0.9 times the contraction bound."""
    values = dict(train_section)
    auto = values.get("tau") == "auto"
    if auto:
        values["tau"] = 1.0
    try:
        cfg = TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if auto:
        K = build_operator(ProblemKind(cfg.task), image_shape)
        prob = EquilibriumProblem(K, np.zeros((1, K.shape[0])), cfg.lam, 1.0)
        tau = 0.9 * contraction_bound(prob, init_params(cfg, image_shape))
        cfg = dataclasses.replace(cfg, tau=tau)
        logger.info("tau=auto resolved to %.6g", tau)
    return cfg


def _echo(out, exp, cfg, extra=None):
    doc = {
        "preset": exp.preset,
        "train": cfg.to_dict(),
        "data": dataclasses.asdict(exp.data),
        "config_hash": cfg.config_hash(),
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def _kernel_images(params, image_shape, limit=16):
    """Kernel tiles of ``A``: conv kernels, or dense rows reshaped to the image."""
    W = params.A.weights
    if params.is_conv:
        tiles = kernel_tiles(W[:limit])
    else:
        tiles = kernel_tiles([vector_to_image(row, image_shape) for row in W[:limit]])
    per_row = int(math.ceil(math.sqrt(len(tiles))))
    return [tiles[i:i + per_row] for i in range(0, len(tiles), per_row)]


def _figure_rows(K, X, F, U, shape, count=8):
    """Originals / degraded / reconstructions, plus the re-degraded output when ``K`` is not the identity."""
    count = min(count, X.shape[0])
    rows = [
        [vector_to_image(x, shape) for x in X[:count]],
        [vector_to_image(f[: shape[0] * shape[1]], shape) for f in F[:count]],
        [vector_to_image(u, shape) for u in U[:count]],
    ]
    if not isinstance(K, Identity):
        rows.append([vector_to_image(v, shape) for v in K.apply(U[:count])])
    return rows


def _write_timings(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_ms"])
        for r in records:
            w.writerow([r.epoch, f"{r.wall_ms:.3f}"])


def cmd_train(args, exp):
    train_ds, test_ds = load_data(exp.data)
    shape = train_ds.shape
    cfg = resolve_config(exp.train, shape)
    os.makedirs(args.out, exist_ok=True)
    _echo(args.out, exp, cfg)

    init = init_params(cfg, shape)
    save_grid(_kernel_images(init, shape), os.path.join(args.out, "kernels_before.pgm"))

    def progress(state, rec):
        logger.info("epoch %d train %.6g test %.6g iters %.1f [%s]", rec.epoch, rec.train_loss,
                    rec.test_loss, rec.mean_iters, rec.status)

    if cfg.mode == "naive":
        state = train_naive(cfg, train_ds.images, shape, init)
    else:
        state = train(cfg, train_ds.images, test_ds.images, shape, init, callback=progress)
    write_epoch_csv(os.path.join(args.out, "epochs.csv"), state.records, timing=not args.deterministic)
    _write_timings(os.path.join(args.out, "timings.csv"), state.records)
    save_checkpoint(os.path.join(args.out, "checkpoint.npz"), state.params, cfg.sigma, cfg.seed)
    save_grid(_kernel_images(state.params, shape), os.path.join(args.out, "kernels_after.pgm"))

    F = measurements(state, test_ds.images, 0, test=True)
    res = solve_forward(state.problem(F), state.params, cfg.sigma)
    save_grid(_figure_rows(state.K, test_ds.images, F, res.u_star, shape),
              os.path.join(args.out, "reconstructions.pgm"))
    final = state.records[-1]
    print(f"epochs={state.epoch} final_train_loss={final.train_loss:.6g} "
          f"final_test_loss={mse_loss(res.u_star, test_ds.images)[0]:.6g} tau={state.tau:g}")
    if state.aborted:
        print("training aborted: divergence persisted after tau-backoff", file=sys.stderr)
        return 1
    return 0


def cmd_grid(args, exp):
    train_ds, test_ds = load_data(exp.data)
    cfg = resolve_config(exp.train, train_ds.shape)
    g = exp.grid
    cells = len(g.taus) * len(g.gammas) * len(g.activations) * len(g.alphas) * len(g.modes)
    jobs = 1 if args.deterministic else (args.jobs or min(cells, os.cpu_count() or 1))
    os.makedirs(args.out, exist_ok=True)
    _echo(args.out, exp, cfg, {"grid": dataclasses.asdict(g)})
    t0 = time.perf_counter()
    results = grid_run(cfg, train_ds.images, test_ds.images, train_ds.shape, g.taus, g.gammas,
                       g.activations, g.alphas, tuple(g.modes), jobs=jobs)
    write_grid_summary(os.path.join(args.out, "grid_summary.csv"), results)
    write_boxplot_data(os.path.join(args.out, f"boxplot_{cfg.task}.csv"), results)
    write_epoch_histogram(os.path.join(args.out, "epochs_histogram.csv"), results)
    cell_dir = os.path.join(args.out, "cells")
    os.makedirs(cell_dir, exist_ok=True)
    for r in results:
        write_epoch_csv(os.path.join(cell_dir, f"{r['config_hash']}.csv"), r["records"],
                        timing=not args.deterministic)
    for mode, (ok, total) in sorted(success_counts(results).items()):
        print(f"{mode}: {ok}/{total} configurations reached test loss < 0.5")
    logger.info("grid finished in %.1fs", time.perf_counter() - t0)
    return 0


def cmd_eval(args, exp):
    params, sigma, _ = load_checkpoint(args.checkpoint)
    _, test_ds = load_data(exp.data)
    values = dict(exp.train)
    values["activation"] = sigma.kind
    if sigma.kind == "softshrink":
        values["eps"] = sigma.eps
    values["gamma"], values["xi"] = params.gamma, params.xi
    values["mode"] = "bilevel" if params.tied else "deq"
    cfg = resolve_config(values, test_ds.shape)
    state = new_state(cfg, test_ds.shape, params)
    F = measurements(state, test_ds.images, 0, test=True)
    res = solve_forward(state.problem(F), params, sigma)
    rows = []
    for i, (u, x) in enumerate(zip(np.atleast_2d(res.u_star), test_ds.images)):
        row = [i, repr(mse_loss(u, x)[0])]
        if isinstance(state.K, RowMask):
            row.append(repr(masked_mse(u, x, state.K)))
        rows.append(row)
    header = ["image", "mse"] + (["masked_mse"] if isinstance(state.K, RowMask) else [])
    writer = csv.writer(sys.stdout)
    writer.writerow(header)
    writer.writerows(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        save_grid(_figure_rows(state.K, test_ds.images, F, res.u_star, test_ds.shape),
                  os.path.join(args.out, "reconstructions.pgm"))
    return 0 if not res.diverged else 1


def naive_trajectory(state, X, iterations, snapshots):
    """Run fixed-point iterations from zero; returns ``{k: u_k}`` and the masked MSE per step."""
    F = measurements(state, X, 0, test=True)
    prob = EquilibriumProblem(state.K, F, state.cfg.lam, state.tau, state.cfg.map_kind,
                              StoppingRule(rel_tol=1e-300, max_iter=iterations))
    res = solve_forward(prob, state.params, state.cfg.sigma, record_tape=True)
    masked = isinstance(state.K, RowMask)
    errors = [masked_mse(u, X, state.K) if masked else mse_loss(u, X)[0] for u in res.tape[1:]]
    return {k: res.tape[k] for k in snapshots if k < len(res.tape)}, errors, F


def cmd_naive_demo(args, exp):
    values = dict(exp.train, mode="naive")
    train_ds, test_ds = load_data(exp.data)
    shape = train_ds.shape
    cfg = resolve_config(values, shape)
    os.makedirs(args.out, exist_ok=True)
    _echo(args.out, exp, cfg, {"naive": dataclasses.asdict(exp.naive)})
    state = train_naive(cfg, train_ds.images, shape)
    write_epoch_csv(os.path.join(args.out, "epochs.csv"), state.records, timing=not args.deterministic)
    save_checkpoint(os.path.join(args.out, "checkpoint.npz"), state.params, cfg.sigma, cfg.seed)
    snaps, errors, F = naive_trajectory(state, test_ds.images, exp.naive.iterations, exp.naive.snapshots)
    with open(os.path.join(args.out, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "masked_mse"])
        for k, e in enumerate(errors, 1):
            w.writerow([k, repr(e)])
    count = min(6, test_ds.images.shape[0])
    rows = [[vector_to_image(x, shape) for x in test_ds.images[:count]],
            [vector_to_image(f, shape) for f in F[:count]]]
    rows += [[vector_to_image(u, shape) for u in snaps[k][:count]] for k in sorted(snaps)]
    save_grid(rows, os.path.join(args.out, "snapshots.pgm"))
    for k in sorted(snaps):
        print(f"k={k:4d} masked_mse={errors[k - 1]:.6g}")
    return 0


def cmd_selftest(args, exp):
    from .selftest import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "train": cmd_train,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "naive-demo": cmd_naive_demo,
    "selftest": cmd_selftest,
}

# flag name -> TrainConfig field
_FLAG_FIELDS = {
    "seed": "seed", "epochs": "epochs", "tau": "tau", "gamma": "gamma", "sigma": "activation",
    "alpha": "alpha", "mode": "mode", "lam": "lam", "xi": "xi", "spectral_norm": "spectral_normalize",
    "task": "task",
}


def _tau(value):
    return value if value == "auto" else float(value)


def build_parser():
    p = argparse.ArgumentParser(prog="deqbilevel", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML experiment file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="single thread, zeroed wall times in epoch CSVs")
    p.add_argument("--tau", type=_tau, help='step size, or "auto"')
    p.add_argument("--gamma", type=float)
    p.add_argument("--sigma", choices=["identity", "relu", "softshrink", "tanh"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=["deq", "bilevel", "naive"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--xi", type=float)
    p.add_argument("--spectral-norm", dest="spectral_norm", action="store_true", default=None)
    p.add_argument("--task", choices=["denoise", "inpaint", "deblur"])
    p.add_argument("--jobs", type=int, help="parallel grid cells")
    p.add_argument("--checkpoint", help="checkpoint for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {_FLAG_FIELDS[k]: v for k, v in vars(args).items() if k in _FLAG_FIELDS and v is not None}
    if args.command == "eval" and not args.checkpoint:
        print("error: eval needs --checkpoint", file=sys.stderr)
        return 2
    try:
        exp = load_experiment(args.preset, args.config, overrides)
        limit = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
        with limit:
            return COMMANDS[args.command](args, exp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
