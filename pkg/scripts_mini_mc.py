"""Reduced-scale preflight of the acceptance criteria bands (R=12, n=2000).

Not part of the package; a throwaway validation harness.
"""
import sys
import time

import numpy as np

sys.path.insert(0, "tests")
from test_acceptance import fit_iterative, fit_iv, make_fit_amn, run_monte_carlo, table_value

from skillform import analysis, baselines as bl, dgp

R = int(sys.argv[1]) if len(sys.argv) > 1 else 12
which = sys.argv[2] if len(sys.argv) > 2 else "123"

if "1" in which:
    t0 = time.time()
    _, truth, grids, fails = run_monte_carlo("ces-original-means", 2000, R,
                                             {"iterative": fit_iterative, "amn": make_fit_amn(2)},
                                             master_seed=101)
    it_row = table_value(grids["iterative"], truth, "skill_elasticity_t0")
    amn_row = table_value(grids["amn"], truth, "skill_elasticity_t0")
    print(f"[crit1 mini R={R}] iter bias {it_row['bias']:.4f} (<=0.010) std {it_row['std']:.4f} "
          f"([0.015,0.035]); amn bias {amn_row['bias']:.4f} ([0.012,0.032]); fails {fails}; "
          f"{(time.time()-t0)/60:.1f} min", flush=True)

if "2" in which:
    t0 = time.time()
    _, truth, grids, fails = run_monte_carlo("ces-new-means", 2000, R,
                                             {"iterative": fit_iterative, "amn2": make_fit_amn(2),
                                              "amn4": make_fit_amn(4)}, master_seed=102)
    it_row = table_value(grids["iterative"], truth, "skill_elasticity_t0")
    a2 = table_value(grids["amn2"], truth, "skill_elasticity_t0")
    a4 = table_value(grids["amn4"], truth, "skill_elasticity_t0")
    print(f"[crit2 mini R={R}] amn2 bias {a2['bias']:.4f} ([0.07,0.11]) std {a2['std']:.4f}; "
          f"amn4 bias {a4['bias']:.4f} std {a4['std']:.4f}; iter bias {it_row['bias']:.4f} (<=0.01); "
          f"fails {fails}; {(time.time()-t0)/60:.1f} min", flush=True)

if "3" in which:
    t0 = time.time()
    _, truth, grids, fails = run_monte_carlo("translog-approx", 2000, R,
                                             {"iterative": fit_iterative, "iv": fit_iv},
                                             master_seed=103)
    it_row = table_value(grids["iterative"], truth, "skill_elasticity_t0")
    iv_row = table_value(grids["iv"], truth, "skill_elasticity_t0")
    print(f"[crit3 mini R={R}] iter bias {it_row['bias']:.4f} std {it_row['std']:.4f}; "
          f"iv bias {iv_row['bias']:.4f} std {iv_row['std']:.4f}; iter std <= iv std: "
          f"{it_row['std'] <= iv_row['std']}; fails {fails}; {(time.time()-t0)/60:.1f} min", flush=True)

if "5" in which:
    t0 = time.time()
    model = dgp.build_preset(dgp.DgpConfig(preset="ces-new-means"))
    vals0, vals1 = [], []
    for rep in range(R):
        seed = int(np.random.SeedSequence([505, rep]).generate_state(1)[0]) % (2**31)
        ds = dgp.simulate_dataset(model, 2000, seed)
        res = bl.amn_pipeline(ds, bl.AmnConfig(L=2, seed=seed), template=model)
        if res.model is None or not res.converged:
            continue
        a0 = analysis.quantile_path(res.model, 0, alphas=[0.1], n_sim=100_000, seed=506)
        a1 = analysis.quantile_path(res.model, 1, alphas=[0.1], n_sim=100_000, seed=506)
        vals0.append(float(a0.values["quantile_path_t0"][0]))
        vals1.append(float(a1.values["quantile_path_t1"][0]))
    print(f"[crit5 mini R={R}] amn paths {np.mean(vals0):.3f}/{np.mean(vals1):.3f} "
          f"vs 0.81/0.89 (+-0.05); {(time.time()-t0)/60:.1f} min", flush=True)
