"""Command-line driver: experiment runners, config files, manifests.

Every subcommand writes its data files plus summary.json and manifest.json
into --out-dir.  Options may come from a flat `key = value` config file;
explicit command-line flags override file values.  Re-running a command
with an identical configuration reproduces byte-identical data files.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, diversity, dims, lowerbound, stability
from .problems import (
    Dataset,
    LeastSquares,
    Logistic,
    QuadraticDistance,
    gen_gaussian_dataset,
    gen_rademacher_dataset,
    load_dataset,
    replicate_dataset,
    save_dataset,
)
from .sgd import (
    SgdConfig,
    convergence_parity_experiment,
    run_sgd,
    tuned_step_size,
    write_trajectory_csv,
)
from .util import parallel_map, seed_list, sha256_file, write_csv

REPLICATION_CSV_HEADER = "r,B_small,B_large,gamma_small,gamma_large,mean_loss_ratio,stderr,seeds"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(Exception):
    """Invalid configuration: bad key, bad value, or unusable parameters."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _dim_kind(token: str):
    name, _, param = token.partition(":")
    name = name.strip().lower()
    if name == "dropout":
        return dims.Dropout(float(param))
    if name == "sgld":
        return dims.Sgld(float(param))
    if name in ("quant", "quantize"):
        return dims.Quantize()
    raise ValueError(f"unknown mechanism {token!r}")


def _dim_list(text: str):
    return [_dim_kind(tok) for tok in text.split(",") if tok.strip()]


# Option tables: name -> (converter, default, help).  Converters always see
# strings, whether a value arrives from the command line or a config file.
_COMMON = {
    "out_dir": (str, ".", "output directory"),
    "config": (str, "", "flat key = value config file"),
}

_COMMANDS: dict[str, dict] = {
    "gen-data": {
        "dist": (str, "gaussian", "feature distribution: gaussian | rademacher"),
        "n": (int, 128, "sample count"),
        "d": (int, 8, "dimension"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "replicate": (int, 1, "replication factor r (r divides n)"),
        "seed": (int, 0, "generator seed"),
    },
    "diversity": {
        "data": (str, "", "dataset CSV (generated when empty)"),
        "dist": (str, "gaussian", "generator when --data is empty"),
        "n": (int, 128, "sample count for generated data"),
        "d": (int, 8, "dimension for generated data"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "data_seed": (int, 0, "generator seed"),
        "model": (str, "logistic", "loss: logistic | leastsq | quadratic"),
        "lam": (float, 1.0, "curvature for the quadratic model"),
        "w": (str, "zeros", "evaluation points: zeros | random"),
        "w_seed": (int, 0, "seed for random evaluation points"),
        "w_count": (int, 1, "number of random evaluation points"),
    },
    "sgd-run": {
        "data": (str, "", "dataset CSV (generated when empty)"),
        "dist": (str, "gaussian", "generator when --data is empty"),
        "n": (int, 128, "sample count for generated data"),
        "d": (int, 8, "dimension for generated data"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "data_seed": (int, 0, "generator seed"),
        "model": (str, "logistic", "loss: logistic | leastsq | quadratic"),
        "lam": (float, 1.0, "curvature for the quadratic model"),
        "gamma": (float, 0.05, "step size"),
        "batch_size": (int, 1, "batch size"),
        "budget": (int, 512, "total gradient updates"),
        "seed": (int, 0, "run seed"),
        "record_every": (int, 8, "iteration stride between records"),
        "dim": (str, "", "mechanism: dropout:p | sgld:s2 | quant (empty = none)"),
    },
    "parity": {
        "dist": (str, "gaussian", "feature distribution"),
        "n": (int, 200, "sample count"),
        "d": (int, 10, "dimension"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "data_seed": (int, 0, "dataset seed"),
        "function_class": (str, "strongly_convex", "strongly_convex | convex | smooth | pl"),
        "epsilon": (float, 0.05, "target suboptimality"),
        "delta": (float, 1.0, "batch oversize factor"),
        "seeds": (int, 50, "number of evaluation seeds"),
        "seed": (int, 0, "master seed"),
    },
    "replication-sweep": {
        "dist": (str, "gaussian", "feature distribution"),
        "n": (int, 512, "sample count (every r must divide it)"),
        "d": (int, 10, "dimension"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "data_seed": (int, 0, "dataset seed"),
        "r_grid": (_int_list, [1, 2, 4, 8], "replication factors"),
        "b_small": (int, 8, "small batch size"),
        "b_large": (int, 128, "large batch size"),
        "budget": (int, 2048, "total gradient updates per run"),
        "seeds": (int, 20, "number of evaluation seeds"),
        "tune_seeds": (int, 3, "seeds used by the step-size grid search"),
        "seed": (int, 0, "master seed"),
    },
    "dims": {
        "dist": (str, "gaussian", "feature distribution"),
        "n": (int, 64, "sample count"),
        "d": (int, 8, "dimension"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "data_seed": (int, 0, "dataset seed"),
        "w_seed": (int, 0, "seed for the evaluation point"),
        "kinds": (
            _dim_list,
            [dims.Dropout(0.1), dims.Dropout(0.5), dims.Sgld(0.1), dims.Sgld(1.0), dims.Quantize()],
            "mechanisms, e.g. dropout:0.1,sgld:1,quant",
        ),
        "trials": (int, 2000, "Monte Carlo trials per mechanism"),
        "seed": (int, 0, "Monte Carlo seed"),
    },
    "stability": {
        "dist": (str, "gaussian", "feature distribution"),
        "n": (int, 100, "sample count per dataset"),
        "d": (int, 5, "dimension"),
        "sigma": (float, 1.0, "gaussian entry standard deviation"),
        "b_grid": (_int_list, [8, 32, 128], "batch sizes to sweep"),
        "budget": (int, 1280, "total gradient updates per run"),
        "seeds": (int, 50, "coupled pairs per batch size"),
        "seed": (int, 0, "master seed"),
        "gamma": (float, 0.0, "step size (0 = 0.9x the smallest-B threshold)"),
    },
    "lowerbound": {
        "n": (int, 8, "number of circle anchors"),
        "lam": (float, 1.0, "curvature"),
        "gamma": (float, 0.055, "step size"),
        "delta_grid": (_float_list, [0.5, 1.0, 2.0, 4.0], "batch oversize factors"),
        "budget": (int, 0, "gradient updates per run (0 = ceil(10/(lam*gamma)))"),
        "seeds": (int, 500, "seeds per grid point"),
        "seed": (int, 0, "master seed"),
        "div_batch": (int, 0, "divergence batch size (0 = ceil(2/(gamma*lam)) + 1)"),
        "div_trials": (int, 10000, "one-step Monte Carlo trials"),
        "div_steps": (int, 50, "iterations per divergence trajectory"),
    },
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="graddiv", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name, opts in _COMMANDS.items():
        p = sub.add_parser(name, conflict_handler="resolve")
        for key in list(opts) + list(_COMMON):
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, type=str)
    return parser


def _parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve(command: str, ns: argparse.Namespace) -> dict:
    spec = {**_COMMANDS[command], **_COMMON}
    resolved = {k: default for k, (_, default, _h) in spec.items()}

    def apply(key: str, raw: str, origin: str):
        norm = key.replace("-", "_")
        if norm not in spec or norm == "config":
            raise ConfigError(f"unknown config key: {key} ({origin})")
        conv = spec[norm][0]
        try:
            resolved[norm] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc

    config_path = getattr(ns, "config", None)
    if config_path:
        for key, raw in _parse_config_file(config_path).items():
            apply(key, raw, config_path)
    for key in spec:
        if key == "config":
            continue
        raw = getattr(ns, key, None)
        if raw is not None:
            apply(key, raw, "command line")
    resolved["config"] = config_path or ""
    return resolved


def _jsonable(value):
    if isinstance(value, (dims.Dropout, dims.Sgld, dims.Quantize)):
        name, param = dims._kind_fields(value)
        return f"{name}:{param}" if name != "quant" else "quant"
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _emit(outdir: Path, command: str, resolved: dict, files: dict, summary: dict, t0: float):
    summary_path = outdir / "summary.json"
    summary_path.write_text(
        json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    files = dict(files)
    files["summary.json"] = summary_path
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in resolved.items()},
        "version": __version__,
        "wall_clock_s": time.time() - t0,
        "files": {name: sha256_file(path) for name, path in sorted(files.items())},
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _make_model(name: str, lam: float):
    if name == "logistic":
        return Logistic()
    if name == "leastsq":
        return LeastSquares()
    if name == "quadratic":
        return QuadraticDistance(lam)
    raise ConfigError(f"unknown model {name!r}")


def _gen_dataset(dist: str, n: int, d: int, sigma: float, seed) -> Dataset:
    if dist == "gaussian":
        return gen_gaussian_dataset(n, d, sigma, seed)
    if dist == "rademacher":
        return gen_rademacher_dataset(n, d, seed)
    raise ConfigError(f"unknown distribution {dist!r}")


def _load_or_gen(cfg: dict) -> Dataset:
    if cfg.get("data"):
        return load_dataset(cfg["data"])
    return _gen_dataset(cfg["dist"], cfg["n"], cfg["d"], cfg["sigma"], cfg["data_seed"])


def _cmd_gen_data(cfg: dict, outdir: Path):
    data = _gen_dataset(cfg["dist"], cfg["n"], cfg["d"], cfg["sigma"], cfg["seed"])
    if cfg["replicate"] > 1:
        data = replicate_dataset(data, cfg["replicate"], [cfg["seed"], 1])
    path = outdir / "dataset.csv"
    save_dataset(data, path)
    return {"dataset.csv": path}, {"n": data.n, "d": data.d}


def _cmd_diversity(cfg: dict, outdir: Path):
    data = _load_or_gen(cfg)
    model = _make_model(cfg["model"], cfg["lam"])
    if cfg["w"] == "zeros":
        points = [np.zeros(data.d)]
    elif cfg["w"] == "random":
        rng = np.random.default_rng(cfg["w_seed"])
        points = [rng.standard_normal(data.d) for _ in range(cfg["w_count"])]
    else:
        raise ConfigError(f"unknown evaluation point rule {cfg['w']!r}")
    entries = []
    for k, w in enumerate(points):
        entries.append((k, 0, diversity.gradient_diversity(model, data, w)))
    path = outdir / "stats.csv"
    diversity.write_stats_csv(path, entries)
    bs_values = [s.bs for _, _, s in entries]
    print(f"bs={bs_values[0]!r}")
    summary = {"bs": bs_values, "n": data.n, "d": data.d}
    if cfg["model"] in ("logistic", "leastsq"):
        summary["glm_bound"] = diversity.glm_bound(data)
    return {"stats.csv": path}, summary


def _cmd_sgd_run(cfg: dict, outdir: Path):
    data = _load_or_gen(cfg)
    model = _make_model(cfg["model"], cfg["lam"])
    config = SgdConfig(
        gamma=cfg["gamma"],
        batch_schedule=cfg["batch_size"],
        budget=cfg["budget"],
        seed=cfg["seed"],
        record_every=cfg["record_every"],
    )
    w0 = np.zeros(data.d)
    if cfg["dim"]:
        traj = dims.run_sgd_with_dim(model, data, config, _dim_kind(cfg["dim"]), w0)
    else:
        traj = run_sgd(model, data, config, w0)
    path = outdir / "trajectory.csv"
    write_trajectory_csv(path, traj)
    final = traj.final
    return {"trajectory.csv": path}, {
        "final_loss": final.loss,
        "final_grad_norm2": final.grad_norm2,
        "final_bs": final.bs,
        "updates": final.n_cum,
    }


def _cmd_parity(cfg: dict, outdir: Path):
    data = _gen_dataset(cfg["dist"], cfg["n"], cfg["d"], cfg["sigma"], cfg["data_seed"])
    model = LeastSquares()
    hess = data.features.T @ data.features / data.n
    eig = np.linalg.eigvalsh(hess)
    lam, beta = float(eig[0]), float(eig[-1])
    if lam <= 0:
        raise ConfigError("dataset Hessian is singular; increase n or change seed")
    w_star, *_ = np.linalg.lstsq(data.features, data.labels, rcond=None)
    report = convergence_parity_experiment(
        model,
        data,
        cfg["function_class"],
        cfg["epsilon"],
        cfg["delta"],
        seed_list(cfg["seed"], cfg["seeds"]),
        lam=lam,
        beta=beta,
        mu=lam,
        w_star=w_star,
    )
    payload = {
        "class": report.function_class,
        "B": report.batch_size,
        "delta": report.delta,
        "gamma": report.gamma,
        "T": report.budget,
        "serial_mean": report.serial_mean,
        "minibatch_mean": report.minibatch_mean,
        "ratio": report.ratio,
        "seeds": report.n_seeds,
    }
    path = outdir / "parity.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"parity.json": path}, payload


def tune_step_size(model, dataset, batch_size, budget, tune_seeds, master_seed):
    """Pick the step-size with the lowest mean terminal loss on a geometric
    grid gamma0 * 2^k, k = -4..4, anchored at the convex tuned step-size."""
    m2 = diversity.gradient_diversity(model, dataset, np.zeros(dataset.d)).m2
    gamma0 = tuned_step_size("convex", 0.1, m2=m2)
    grid = [gamma0 * 2.0**k for k in range(-4, 5)]
    seeds = seed_list(master_seed, tune_seeds)

    def loss_for(gamma):
        total = 0.0
        for s in seeds:
            cfg = SgdConfig(
                gamma=gamma,
                batch_schedule=batch_size,
                budget=budget,
                seed=s,
                record_every=max(1, budget // batch_size),
            )
            final = run_sgd(model, dataset, cfg, np.zeros(dataset.d)).final.loss
            if not math.isfinite(final):
                return math.inf
            total += final
        return total / len(seeds)

    losses = parallel_map(loss_for, grid)
    best = int(np.argmin(losses))
    if not math.isfinite(losses[best]):
        raise RuntimeError("step-size tuning failed: every grid point diverged")
    return grid[best], {f"{g!r}": losses[i] for i, g in enumerate(grid)}


def replication_sweep(
    dataset: Dataset,
    r_grid,
    b_small: int,
    b_large: int,
    budget: int,
    seeds,
    *,
    tune_seeds: int = 3,
    master_seed: int = 0,
):
    """Loss ratio (large batch / small batch) versus replication factor.

    Both batch sizes get an equal gradient budget and an independently
    grid-tuned step-size; the per-seed ratio averages the recorded loss
    ratios at shared checkpoints (multiples of lcm(b_small, b_large)).
    """
    model = Logistic()
    align = math.lcm(b_small, b_large)
    if budget % align or budget < align:
        raise ValueError(f"budget must be a positive multiple of {align}")
    rows = []
    tuning = {}
    for r in r_grid:
        data_r = replicate_dataset(dataset, r, [master_seed, r])
        gammas = {}
        for b in (b_small, b_large):
            gammas[b], grid_losses = tune_step_size(
                model, data_r, b, budget, tune_seeds, [master_seed, r, b]
            )
            tuning[f"r={r},B={b}"] = {"gamma": gammas[b], "grid": grid_losses}

        def ratio_for(seed, _data=data_r, _gammas=gammas):
            losses = {}
            for b in (b_small, b_large):
                cfg = SgdConfig(
                    gamma=_gammas[b],
                    batch_schedule=b,
                    budget=budget,
                    seed=seed,
                    record_every=align // b,
                )
                traj = run_sgd(model, _data, cfg, np.zeros(_data.d))
                losses[b] = np.array([p.loss for p in traj.points[1:]])
            return float((losses[b_large] / losses[b_small]).mean())

        ratios = np.array(parallel_map(ratio_for, list(seeds)))
        stderr = float(ratios.std(ddof=1) / math.sqrt(len(ratios))) if len(ratios) > 1 else math.inf
        rows.append(
            (r, b_small, b_large, gammas[b_small], gammas[b_large], float(ratios.mean()), stderr, len(ratios))
        )
    return rows, tuning


def _cmd_replication_sweep(cfg: dict, outdir: Path):
    data = _gen_dataset(cfg["dist"], cfg["n"], cfg["d"], cfg["sigma"], cfg["data_seed"])
    rows, tuning = replication_sweep(
        data,
        cfg["r_grid"],
        cfg["b_small"],
        cfg["b_large"],
        cfg["budget"],
        seed_list(cfg["seed"], cfg["seeds"]),
        tune_seeds=cfg["tune_seeds"],
        master_seed=cfg["seed"],
    )
    path = outdir / "replication.csv"
    write_csv(path, REPLICATION_CSV_HEADER, rows)
    summary = {
        "ratios": {str(row[0]): row[5] for row in rows},
        "tuning": tuning,
    }
    return {"replication.csv": path}, summary


def _cmd_dims(cfg: dict, outdir: Path):
    data = _gen_dataset(cfg["dist"], cfg["n"], cfg["d"], cfg["sigma"], cfg["data_seed"])
    model = Logistic()
    w = np.random.default_rng(cfg["w_seed"]).standard_normal(data.d)
    base = diversity.gradient_diversity(model, data, w)
    rows = []
    rng = np.random.default_rng(cfg["seed"])
    for kind in cfg["kinds"]:
        analytic = dims.dim_batch_bound_analytic(model, data, w, kind)
        mc = dims.dim_batch_bound_mc(model, data, w, kind, cfg["trials"], rng)
        rows.append((kind, base.bs, analytic, mc))
    path = outdir / "dims.csv"
    dims.write_dim_sweep_csv(path, rows)
    return {"dims.csv": path}, {"bs": base.bs, "kinds": [str(k) for k in cfg["kinds"]]}


def _cmd_stability(cfg: dict, outdir: Path):
    model = Logistic()
    master = cfg["seed"]

    def pair_factory(seed):
        return stability.make_coupled_sample(cfg["dist"], cfg["n"], cfg["d"], [seed, 0], sigma=cfg["sigma"])

    ref = pair_factory(seed_list(master, 1)[0])
    lipschitz = model.lipschitz_bound(ref.s)
    beta = lipschitz**2 / 4.0
    # the spectral floor can fall below the universal floor of 1 on small data
    b_bar = max(1.0, diversity.glm_bound(ref.s))
    b_min = min(cfg["b_grid"])
    gamma = cfg["gamma"]
    if gamma <= 0:
        gamma = 0.9 * stability.step_size_threshold(beta, None, b_min, b_bar, cfg["n"])
    config_base = SgdConfig(gamma=gamma, batch_schedule=b_min, budget=cfg["budget"], seed=0)
    reports = stability.stability_sweep(
        model,
        pair_factory,
        cfg["b_grid"],
        config_base,
        seed_list(master, cfg["seeds"]),
        lipschitz=lipschitz,
        beta=beta,
        b_bar=b_bar,
    )
    path = outdir / "stability.csv"
    stability.write_stability_csv(path, reports)
    summary = {
        "gamma": gamma,
        "lipschitz": lipschitz,
        "b_bar": b_bar,
        "mean_norm_dist": {str(r.batch_size): r.mean_norm_dist for r in reports},
    }
    return {"stability.csv": path}, summary


def _cmd_lowerbound(cfg: dict, outdir: Path):
    lam, gamma = cfg["lam"], cfg["gamma"]
    budget = cfg["budget"] or math.ceil(10.0 / (lam * gamma))
    report = lowerbound.floor_experiment(
        cfg["n"],
        lam,
        gamma,
        cfg["delta_grid"],
        budget,
        seed_list(cfg["seed"], cfg["seeds"]),
        pilot_seed=[cfg["seed"], 1],
    )
    path = outdir / "floor.csv"
    lowerbound.write_floor_csv(path, report)
    div_batch = cfg["div_batch"] or (math.ceil(2.0 / (gamma * lam)) + 1)
    div = lowerbound.divergence_check(
        cfg["n"],
        lam,
        gamma,
        div_batch,
        cfg["div_trials"],
        cfg["div_steps"],
        seed=[cfg["seed"], 2],
    )
    summary = {
        "bs_estimate": report.bs_estimate,
        "budget": budget,
        "floors": {str(p.delta): p.measured_floor for p in report.points},
        "divergence": {
            "B": div.batch_size,
            "base_dist": div.base_dist,
            "mean_step_dist": div.mean_step_dist,
            "stderr": div.stderr,
            "one_step_increase": div.one_step_increase,
            "mean_terminal_dist": div.mean_terminal_dist,
            "nonconvergent": div.nonconvergent,
        },
    }
    return {"floor.csv": path}, summary


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "diversity": _cmd_diversity,
    "sgd-run": _cmd_sgd_run,
    "parity": _cmd_parity,
    "replication-sweep": _cmd_replication_sweep,
    "dims": _cmd_dims,
    "stability": _cmd_stability,
    "lowerbound": _cmd_lowerbound,
}


def cli_dispatch(argv) -> int:
    t0 = time.time()
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if not getattr(ns, "command", None):
            raise ConfigError("missing subcommand; one of: " + ", ".join(_COMMANDS))
        resolved = _resolve(ns.command, ns)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"usage: graddiv {{{','.join(_COMMANDS)}}} [--key value ...]", file=sys.stderr)
        return EXIT_CONFIG
    try:
        outdir = Path(resolved["out_dir"])
        outdir.mkdir(parents=True, exist_ok=True)
        files, summary = _HANDLERS[ns.command](resolved, outdir)
        _emit(outdir, ns.command, resolved, files, summary, t0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: report and signal exit code 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(cli_dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
