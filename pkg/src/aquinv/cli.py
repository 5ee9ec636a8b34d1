"""
Command-line interface.

    aquinv sample-prior --count N --out DIR
    aquinv simulate --params DIR/params.aqtn --out DIR [--jobs N]
    aquinv train --dataset DIR --out DIR [--mode ar-net-wl] [--w-c 1 3 5 ...]
    aquinv invert --obs FILE --out DIR [--evaluator simulator|surrogate:CKPT]
    aquinv metrics --truth DIR (--checkpoint CKPT | --prediction DIR) --out DIR

Every command accepts ``--config PATH`` and ``--seed``. Exit codes: 0 success,
2 configuration or usage error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import forward as fwd
from .config import ConfigError, ExperimentConfig, load_config, resolve
from .dataset import Dataset, simulate_dataset
from .evaluators import SimulatorEvaluator, SurrogateEvaluator, parameter_bounds, sample_prior, sample_sources
from .grid import REFERENCE_SOURCE, SOURCE_PARAM_NAMES, ParameterVector, pack
from .ilues import run_ilues, write_boxplot_csv
from .io import read_tensor, write_json, write_tensor
from .kle import cached_basis, synthesize_many
from .metrics import surrogate_report
from .nn.data import Normalizer
from .nn.train import MODES, Surrogate, train

logger = logging.getLogger("aquinv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _basis(cfg: ExperimentConfig):
    return cached_basis(cfg.grid, cfg.covariance, cfg.target_energy, resolve(cfg, cfg.cache_dir))


def _known_xi(cfg: ExperimentConfig, n_kl: int):
    if cfg.known_xi is None:
        return np.zeros(n_kl)
    xi = read_tensor(resolve(cfg, cfg.known_xi)).ravel()
    if xi.size != n_kl:
        raise ConfigError(f"known_xi has {xi.size} entries, the basis has {n_kl} modes")
    return xi


def cmd_sample_prior(cfg: ExperimentConfig, args) -> int:
    basis = _basis(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds["prior"] if args.seed is None else args.seed
    if args.reference:
        xi = _known_xi(cfg, basis.n_kl)
        rows = pack(ParameterVector(xi, REFERENCE_SOURCE))[None]
    elif cfg.unknowns == "source":
        rng = np.random.default_rng(seed)
        xi = _known_xi(cfg, basis.n_kl)
        rows = np.hstack([np.tile(xi, (args.count, 1)), sample_sources(args.count, rng, cfg.prior)])
    else:
        rows = sample_prior(args.count, basis.n_kl, seed, cfg.prior)
    write_tensor(out / "params.aqtn", rows)
    write_json(out / "prior_manifest.json", {"count": len(rows), "seed": seed, "n_kl": basis.n_kl,
                                             "reference": bool(args.reference), "config_hash": cfg.hash()})
    print(f"wrote {len(rows)} x {rows.shape[1]} parameters to {out / 'params.aqtn'}")
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    basis = _basis(cfg)
    params = read_tensor(args.params)
    man = simulate_dataset(params, cfg.forward, basis, args.out, jobs=args.jobs,
                           meta={"config_hash": cfg.hash(), "params_source": str(args.params)})
    print(f"{man['n_complete']} of {man['n_records']} records complete, {len(man['failures'])} failed")
    return EXIT_OK if not man["failures"] else EXIT_NUMERIC


def cmd_train(cfg: ExperimentConfig, args) -> int:
    basis = _basis(cfg)
    data = Dataset.open(args.dataset).simulation_set(basis)
    mode = args.mode or cfg.mode
    tc = cfg.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    norm = Normalizer.fit(data, cfg.covariance.mean, np.sqrt(cfg.covariance.variance),
                          max(abs(b) for b in cfg.prior["strength"]))
    # several --w-c values train one network each, in out/wc_<value>
    weights = [tc.w_c] if not args.w_c else args.w_c
    for w in weights:
        run_cfg = replace(tc, w_c=w)
        out = Path(args.out) if len(weights) == 1 else Path(args.out) / f"wc_{w:g}"
        res = train(data, cfg.network, run_cfg, mode, norm, out_dir=out)
        print(f"trained {mode} (w_c={w:g}) for {run_cfg.epochs} epochs, final loss {res.history[-1][1]:.6g}"
              if res.history else f"{mode}: zero epochs, initial network saved to {out}")
    return EXIT_OK


def _read_obs(cfg: ExperimentConfig, args):
    _, rows = fwd.read_observations_csv(args.obs)
    d = rows[args.record]
    mask = cfg.forward.design.concentration_mask()
    if args.add_noise:
        seed = cfg.seeds["noise"] if args.seed is None else args.seed
        return fwd.make_noise(d, cfg.noise_level, seed, mask)[0], fwd.noise_sigma(d, cfg.noise_level, mask)[0]
    return d, fwd.noise_sigma(d, cfg.noise_level, mask)[0]


def cmd_invert(cfg: ExperimentConfig, args) -> int:
    basis = _basis(cfg)
    d, sigma = _read_obs(cfg, args)
    source_only = cfg.unknowns == "source"
    xi = _known_xi(cfg, basis.n_kl) if source_only else None
    ilc = cfg.ilues if args.seed is None else replace(cfg.ilues, seed=args.seed)
    if args.evaluator == "simulator":
        evaluator = SimulatorEvaluator(fwd.ForwardModel(cfg.forward, basis), xi)
    elif args.evaluator.startswith("surrogate:"):
        sur = Surrogate.load(args.evaluator.split(":", 1)[1])
        evaluator = SurrogateEvaluator(sur, basis, cfg.forward.design, xi)
    else:
        raise ConfigError(f"unknown evaluator {args.evaluator!r}")
    rng = np.random.default_rng(ilc.seed)
    prior = (sample_prior(ilc.n_e, basis.n_kl, rng, cfg.prior) if not source_only
             else sample_prior(ilc.n_e, 0, rng, cfg.prior))
    lo, hi = parameter_bounds(basis.n_kl, cfg.prior, source_only)
    calls0 = fwd.simulator_calls()
    res = run_ilues(prior, evaluator, d, sigma, ilc, lo, hi, out_dir=args.out, evaluator_name=args.evaluator)
    calls = fwd.simulator_calls() - calls0
    out = Path(args.out)
    n_m = prior.shape[1]
    src_cols = list(range(n_m - 7, n_m))
    write_boxplot_csv(out / "source_boxplot.csv", res.history, src_cols, SOURCE_PARAM_NAMES)
    final = res.final.M
    summary = {
        "simulator_calls": calls,
        "median_sswr": [s.median_sswr for s in res.stats],
        "posterior_mean": dict(zip(SOURCE_PARAM_NAMES, final[:, src_cols].mean(axis=0).tolist())),
        "posterior_std": dict(zip(SOURCE_PARAM_NAMES, final[:, src_cols].std(axis=0, ddof=1).tolist())),
    }
    if not source_only:
        logk = synthesize_many(basis, final[:, : basis.n_kl])
        write_tensor(out / "logk_mean.aqtn", logk.mean(axis=0))
        write_tensor(out / "logk_var.aqtn", logk.var(axis=0, ddof=1))
    write_json(out / "summary.json", summary)
    print(f"median SSWR {res.stats[0].median_sswr:.4g} -> {res.stats[-1].median_sswr:.4g}; "
          f"{calls} simulator calls")
    return EXIT_OK


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    basis = _basis(cfg)
    truth_ds = Dataset.open(args.truth)
    truth = truth_ds.simulation_set(basis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        sur = Surrogate.load(args.checkpoint)
        head, conc = sur.predict_set(truth)
    else:
        pred_ds = Dataset.open(args.prediction)
        if pred_ds.complete() != truth_ds.complete():
            raise ValueError("truth and prediction datasets hold different records")
        stacks = np.array([pred_ds.fields(i) for i in truth_ds.complete()])
        head, conc = stacks[:, 0], stacks[:, 1:]
    report = surrogate_report(truth.head, truth.conc, head, conc, truth.n_release)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "emax.csv")
    print(f"R2 {report.r2:.5f}  RMSE {report.rmse:.5g}  |e_c|max {report.emax_mean:.4g} +- {report.emax_std:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aquinv", description="Contaminant source identification with surrogate-accelerated ensemble smoothing.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the command's seed")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    sp = sub.add_parser("sample-prior", help="draw parameter vectors from the prior")
    common(sp)
    sp.add_argument("--count", type=int, default=400)
    sp.add_argument("--reference", action="store_true", help="write the reference parameter vector instead")
    sp.set_defaults(func=cmd_sample_prior)

    sp = sub.add_parser("simulate", help="run the forward model on a parameter file")
    common(sp)
    sp.add_argument("--params", type=Path, required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a surrogate network")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--mode", choices=MODES, default=None)
    sp.add_argument("--w-c", type=float, nargs="+", default=None,
                    help="extra loss weight around the source; several values run a sweep")
    sp.add_argument("--epochs", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("invert", help="ensemble-smoother inversion of observations")
    common(sp)
    sp.add_argument("--obs", type=Path, required=True, help="observation CSV (as written by simulate)")
    sp.add_argument("--record", type=int, default=0, help="row of the observation CSV to invert")
    sp.add_argument("--add-noise", action="store_true", help="treat the row as noiseless and add synthetic noise")
    sp.add_argument("--evaluator", default="simulator", help="'simulator' or 'surrogate:CHECKPOINT_DIR'")
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("metrics", help="surrogate accuracy on a dataset")
    common(sp)
    sp.add_argument("--truth", type=Path, required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", type=Path)
    g.add_argument("--prediction", type=Path)
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, fwd.ForwardError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, IndexError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
