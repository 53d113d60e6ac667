"""Command-line harness: simulate datasets, run estimators, orchestrate Monte
Carlo comparisons, draw score bootstraps, and emit feature tables.

All randomness flows from the config's master seed; replication seeds derive
from (master seed, replication index). Outputs are written atomically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Optional

import numpy as np

from . import analysis, baselines, bootstrap as bt, dgp, iterative as it
from .model import ModelSpec, model_from_dict, model_to_dict
from .numkit import QuadratureConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_ESTIMATION = 4
EXIT_AGGREGATE = 5

ESTIMATORS = ("iterative", "amn", "iv-translog", "cobb-douglas-moments")


class ConfigError(ValueError):
    pass


def load_config(path: str, overrides: Optional[dict] = None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if cfg.get("version") != 1:
        raise ConfigError(f"unsupported config version {cfg.get('version')!r}")
    cfg = dict(cfg)
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    cfg.setdefault("out_dir", "out")
    cfg.setdefault("estimators", ["iterative"])
    for est in cfg["estimators"]:
        if est not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {est!r}; expected subset of {ESTIMATORS}")
    if not cfg["estimators"]:
        raise ConfigError("estimator list must be non-empty")
    return cfg


def _dgp_config(cfg: dict, seed: int) -> dgp.DgpConfig:
    d = dict(cfg.get("dgp", {}))
    preset = d.get("preset")
    if preset is None:
        raise ConfigError("config.dgp.preset is required")
    custom = None
    if preset == "custom":
        if "model" not in d:
            raise ConfigError("custom preset requires config.dgp.model")
        custom = model_from_dict(d["model"])
    try:
        return dgp.DgpConfig(
            preset=preset,
            n=int(d.get("n", 2000)),
            seed=seed,
            mixture_weights=tuple(d.get("mixture_weights", (0.5, 0.5))),
            production_shock_sd=float(d.get("production_shock_sd", 0.1)),
            custom_model=custom,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fit_config(cfg: dict, seed: int) -> it.FitConfig:
    e = dict(cfg.get("estimation", {}))
    quad = QuadratureConfig(draws=int(e.get("draws", 10_000)), burn=int(e.get("burn", 20)),
                            seed=seed)
    return it.FitConfig(
        quad=quad,
        mixture_components=int(e.get("mixture_components", 2)),
        restarts=int(e.get("restarts", 3)),
        jitter_sd=float(e.get("jitter_sd", 0.1)),
        fix_intercepts=bool(e.get("fix_intercepts", False)),
        fix_first_skill_loadings=e.get("fix_first_skill_loadings"),
        endogenous_investment=bool(e.get("endogenous_investment", False)),
        kde_density=bool(e.get("kde_density", False)),
        synthetic_draws=e.get("synthetic_draws"),
        max_iter=int(e.get("max_iter", 300)),
        tol=float(e.get("tol", 1e-5)),
        seed=seed,
        init_from_amn=bool(e.get("init_from_amn", True)),
    )


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _checksum(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg["seed"])
    try:
        dcfg = _dgp_config(cfg, seed)
        model = dgp.build_preset(dcfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ds = dgp.simulate_dataset(model, dcfg.n, seed)
        path = os.path.join(out_dir, "dataset.csv")
        checksum = dgp.save_dataset(ds, path, model=model, seed=seed)
    except Exception as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    print(f"wrote {path} (n={ds.n}) sha256={checksum}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _run_estimator(name: str, ds, template: ModelSpec, cfg: dict, seed: int):
    """Returns (estimate document dict, estimated model or None, converged)."""
    if name == "iterative":
        fit = _fit_config(cfg, seed)
        ests = it.estimate_all(ds, template, fit)
        doc = it.estimates_to_dict(ests)
        return doc, ests.model, ests.converged, ests
    if name == "amn":
        a = dict(cfg.get("amn", {}))
        acfg = baselines.AmnConfig(L=int(a.get("L", 2)), nls_draws=int(a.get("nls_draws", 10_000)),
                                   seed=seed)
        res = baselines.amn_pipeline(ds, acfg, template=template)
        doc = baselines.baseline_estimate_to_dict(
            "amn", res.model,
            {"converged": res.converged, "em": {k: v for k, v in res.em_info.items() if k != "loglik_path"},
             "md_objective": res.md_objective, "L": acfg.L, "seed": seed})
        return doc, res.model, res.converged, res
    if name == "iv-translog":
        iv_cfg_d = dict(cfg.get("iv", {}))
        ivcfg = baselines.IvConfig(proxy=int(iv_cfg_d.get("proxy", 0)),
                                   instrument=int(iv_cfg_d.get("instrument", 1)))
        ivr = baselines.iv_translog(ds, ivcfg)
        initial = _initial_for_moment_estimators(ds, template, cfg, seed)
        model = baselines.assemble_model_iv(ds, ivr, template, initial, seed=seed)
        doc = baselines.baseline_estimate_to_dict(
            "iv-translog", model, {"converged": True, "production": ivr["production"],
                                   "investment": ivr["investment"], "seed": seed})
        return doc, model, True, ivr
    if name == "cobb-douglas-moments":
        cd = baselines.cobb_douglas_moments(ds)
        ivr = {"production": [{**p, "gamma3": 0.0, "first_stage_F": []} for p in cd],
               "investment": baselines.iv_translog(ds, baselines.IvConfig())["investment"]}
        initial = _initial_for_moment_estimators(ds, template, cfg, seed)
        model = baselines.assemble_model_iv(ds, ivr, template, initial, seed=seed)
        doc = baselines.baseline_estimate_to_dict(
            "cobb-douglas-moments", model, {"converged": True, "production": cd, "seed": seed})
        return doc, model, True, cd
    raise ConfigError(f"unknown estimator {name}")


def _initial_for_moment_estimators(ds, template, cfg, seed):
    """Moment estimators need an initial joint distribution for features; use
    the mixture fit of the observed vector (shared with the amn pipeline)."""
    a = dict(cfg.get("amn", {}))
    acfg = baselines.AmnConfig(L=int(a.get("L", 2)), seed=seed)
    res = baselines.amn_pipeline(ds, acfg, template=template)
    if res.model is None:
        raise RuntimeError("initial-distribution fit failed")
    return res.model.initial


def cmd_estimate(cfg: dict, data_path: str, allow_nonconverged: bool = False) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    try:
        ds, sidecar = dgp.load_dataset(data_path)
    except (OSError, ValueError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    template = sidecar.get("model")
    if template is None:
        try:
            template = dgp.build_preset(_dgp_config(cfg, int(cfg["seed"])))
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    any_fail = False
    for name in cfg["estimators"]:
        try:
            doc, model, converged, _ = _run_estimator(name, ds, template, cfg, int(cfg["seed"]))
        except Exception as exc:
            print(f"estimation error ({name}): {exc}", file=sys.stderr)
            return EXIT_ESTIMATION
        path = os.path.join(out_dir, f"estimate_{name}.json")
        _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True, default=float))
        print(f"wrote {path} converged={converged}")
        if not converged:
            any_fail = True
    if any_fail and not allow_nonconverged:
        print("at least one estimator did not converge", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# montecarlo
# ---------------------------------------------------------------------------


def _replication(args) -> dict:
    """One Monte Carlo replication; never raises (failures are reported)."""
    cfg, rep = args
    try:
        master = int(cfg["seed"])
        rep_seed = int(np.random.SeedSequence([master, rep]).generate_state(1)[0]) % (2**31)
        dcfg = _dgp_config(cfg, rep_seed)
        model = dgp.build_preset(dcfg)
        ds = dgp.simulate_dataset(model, dcfg.n, rep_seed)
        mc = dict(cfg.get("montecarlo", {}))
        n_sim = int(mc.get("feature_n_sim", 100_000))
        out = {"rep": rep, "status": "ok", "features": {}, "converged": {}}
        for name in cfg["estimators"]:
            try:
                _, est_model, converged, _ = _run_estimator(name, ds, model, cfg, rep_seed)
                if est_model is None or not converged:
                    out["converged"][name] = False
                    continue
                fg = analysis.features_from_model(est_model, n_sim=n_sim, seed=master + 1)
                out["features"][name] = {k: v.tolist() for k, v in fg.values.items()}
                out["converged"][name] = bool(converged)
            except Exception:
                out["converged"][name] = False
        if not any(name in out["features"] for name in cfg["estimators"]):
            out["status"] = "failed"
            out["error"] = "no estimator produced features"
        return out
    except Exception as exc:
        return {"rep": rep, "status": "failed", "error": f"{exc}\n{traceback.format_exc()}"}


def cmd_montecarlo(cfg: dict, jobs: int = 1) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    mc = dict(cfg.get("montecarlo", {}))
    R = int(mc.get("replications", 100))
    if R < 1:
        print("config error: replications must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dcfg = _dgp_config(cfg, int(cfg["seed"]))
        model = dgp.build_preset(dcfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    truth = dgp.true_features(model, n_oracle=int(mc.get("truth_n_sim", 1_000_000)),
                              seed=int(cfg["seed"]) + 7)
    tasks = [(cfg, rep) for rep in range(R)]
    if jobs <= 1:
        results = [_replication(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replication, tasks))
    failed = [r for r in results if r["status"] != "ok"]
    for r in failed:
        print(f"replication {r['rep']} failed: {r.get('error', '')[:200]}", file=sys.stderr)
    alphas = np.asarray(truth.alphas)
    rows = ["estimator,feature,bias,std,replications"]
    for name in cfg["estimators"]:
        grids = []
        for r in results:
            if r["status"] == "ok" and name in r["features"]:
                grids.append(analysis.FeatureGrid(
                    alphas=alphas, values={k: np.array(v) for k, v in r["features"][name].items()}))
        if len(grids) >= 2:
            for row in analysis.feature_table(grids, truth):
                rows.append(f"{name},{row['feature']},{row['bias']:.6f},{row['std']:.6f},{row['replications']}")
        else:
            print(f"estimator {name}: fewer than 2 successful replications", file=sys.stderr)
    table_path = os.path.join(out_dir, "montecarlo_table.csv")
    _atomic_write(table_path, "\n".join(rows) + "\n")
    detail_path = os.path.join(out_dir, "montecarlo_replications.json")
    _atomic_write(detail_path, json.dumps(results, indent=1, sort_keys=True, default=float))
    print(f"wrote {table_path} ({R - len(failed)}/{R} replications succeeded)")
    if len(failed) > 0.1 * R:
        print("more than 10% of replications failed", file=sys.stderr)
        return EXIT_AGGREGATE
    return EXIT_OK


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


def cmd_bootstrap(cfg: dict, data_path: str, estimate_path: str) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    try:
        ds, _ = dgp.load_dataset(data_path)
        with open(estimate_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("estimator") != "iterative":
            raise ValueError("bootstrap requires an estimate JSON produced by the iterative estimator")
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    b = dict(cfg.get("bootstrap", {}))
    bcfg = bt.BootstrapConfig(
        n_draws=int(b.get("n_draws", 500)),
        seed=int(cfg["seed"]),
        compute_features=bool(b.get("compute_features", True)),
        feature_n_sim=int(b.get("feature_n_sim", 50_000)),
        identity_resample=bool(b.get("identity_resample", False)),
    )
    try:
        ests = it.rebuild_estimates(doc, ds)
        cache = bt.build_score_cache(ests, ds)
        result = bt.run_bootstrap(ests, ds, bcfg, cache=cache)
    except Exception as exc:
        print(f"bootstrap error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    rows = ["draw,step,parameter,value"]
    for rec in bt.draws_to_csv_rows(ests, result.draws):
        rows.append(f"{rec[0]},{rec[1]},{rec[2]},{rec[3]:.10g}")
    draws_path = os.path.join(out_dir, "bootstrap_draws.csv")
    _atomic_write(draws_path, "\n".join(rows) + "\n")
    ci_path = os.path.join(out_dir, "bootstrap_intervals.json")
    _atomic_write(ci_path, bt.intervals_to_json(result, analysis.DEFAULT_ALPHAS))
    print(f"wrote {draws_path} and {ci_path}: {len(result.draws) - result.invalid} valid draws, "
          f"{result.per_draw_seconds:.2f}s per draw")
    return EXIT_OK


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def cmd_features(cfg: dict, estimate_path: str, scenario: Optional[str] = None) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    try:
        with open(estimate_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("model") is None:
            raise ValueError("estimate JSON has no model")
        model = model_from_dict(doc["model"])
    except (OSError, ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = int(cfg["seed"])
    n_sim = int(dict(cfg.get("montecarlo", {})).get("feature_n_sim", 100_000))
    fg = analysis.features_from_model(model, n_sim=n_sim, seed=seed + 1)
    rows = ["feature,t,alpha,value"]
    for name, vals in sorted(fg.values.items()):
        t = name.rsplit("_t", 1)[-1]
        for a, v in zip(fg.alphas, vals):
            rows.append(f"{name},{t},{a:.2f},{v:.8f}")
    _atomic_write(os.path.join(out_dir, "features.csv"), "\n".join(rows) + "\n")
    scenarios = [scenario] if scenario else ["baseline", "shift-t0", "shift-t1", "median-both",
                                             "targeted-below-median"]
    cdf_rows = ["scenario,grid,cdf"]
    for sc in scenarios:
        try:
            res = analysis.counterfactual_distribution(model, analysis.Scenario(sc),
                                                       n_sim=n_sim, seed=seed + 1)
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for g, c in zip(res.grid, res.cdf):
            cdf_rows.append(f"{sc},{g:.8f},{c:.8f}")
    _atomic_write(os.path.join(out_dir, "counterfactual_cdfs.csv"), "\n".join(cdf_rows) + "\n")
    print(f"wrote features.csv and counterfactual_cdfs.csv to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="skillform",
                                     description="skill formation model simulation and estimation")
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="parallel workers for montecarlo")
    parser.add_argument("--out", default=None, help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate")
    p_est = sub.add_parser("estimate")
    p_est.add_argument("--data", required=True)
    p_est.add_argument("--allow-nonconverged", action="store_true")
    sub.add_parser("montecarlo")
    p_boot = sub.add_parser("bootstrap")
    p_boot.add_argument("--data", required=True)
    p_boot.add_argument("--estimate", required=True)
    p_feat = sub.add_parser("features")
    p_feat.add_argument("--estimate", required=True)
    p_feat.add_argument("--scenario", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "simulate":
        return cmd_simulate(cfg)
    if args.command == "estimate":
        return cmd_estimate(cfg, args.data, allow_nonconverged=args.allow_nonconverged)
    if args.command == "montecarlo":
        return cmd_montecarlo(cfg, jobs=args.jobs)
    if args.command == "bootstrap":
        return cmd_bootstrap(cfg, args.data, args.estimate)
    if args.command == "features":
        return cmd_features(cfg, args.estimate, scenario=args.scenario)
    return EXIT_CONFIG  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
