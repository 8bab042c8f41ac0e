"""Compute frozen oracle values for the test suite.

Two kinds of value are written to tests/oracles.json:

* closed forms, evaluated with mpmath at 30 digits without importing hyperext,
* corpus calibrations (the empirical constants frozen in hyperext.pipeline),
  which necessarily run the library on the test corpus.

Run from the repository root:  python3 tools/compute_oracles.py [--skip-calibration]
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import mpmath as mp
import numpy as np

mp.mp.dps = 30
OUT = Path(__file__).resolve().parents[1] / "tests" / "oracles.json"
FIT_RHOS = np.geomspace(0.1, 8.0, 801)


# -- closed forms -----------------------------------------------------------------


def sinh_power(t, n):
    return mp.quad(lambda r: mp.sinh(r) ** n, [0, t])


def delta_of(rho, n):
    rho = mp.mpf(rho)
    return min(rho * sinh_power(rho / 2, n) / (4 * sinh_power(5 * rho / 2, n)), rho / 2)


def eta_of(rho):
    rho = mp.mpf(rho)
    return 4 * mp.sinh(2 * rho) / rho


def kappa_of(rho, delta):
    rho, delta = mp.mpf(rho), mp.mpf(delta)
    return 1 + eta_of(rho) * mp.log(mp.tanh(rho) / mp.tanh(delta / 2))


def colour_bound(rho, n):
    rho = mp.mpf(rho)
    return sinh_power(4.5 * rho, n) / sinh_power(rho / 2, n)


def multiplicity(sigma, rho, n):
    return sinh_power(mp.mpf(sigma) + mp.mpf(rho) / 2, n) / sinh_power(mp.mpf(rho) / 2, n)


def log_factor(rho, delta):
    # integral of 1/sinh over (delta, rho) by quadrature, not the tanh closed form
    return mp.quad(lambda r: 1 / mp.sinh(r), [delta, rho])


def fit_asymptotics(n):
    q, d, e, k = [], [], [], []
    for rho in FIT_RHOS:
        r = mp.mpf(rho)
        dl = delta_of(r, n)
        q.append(colour_bound(r, n) / mp.exp(4 * r))
        d.append(dl / (r * mp.exp(-3 * r)))
        e.append(eta_of(r) * r / mp.exp(2 * r))
        k.append(kappa_of(r, dl) * r**2 / mp.exp(5 * r))
    # a 0.1% cushion covers extrema falling between grid points
    return {
        "C3": float(max(q)) * 1.001,
        "C4": float(min(d)) / 1.001,
        "C5": float(max(e)) * 1.001,
        "C6": float(max(k)) * 1.001,
        "rho_range": [float(FIT_RHOS[0]), float(FIT_RHOS[-1])],
    }


def closed_forms() -> dict:
    out: dict = {}
    out["sinh_power"] = {
        str(n): {repr(t): float(sinh_power(t, n)) for t in (0.05, 0.5, 1.0, 2.0, 4.0, 8.0)} for n in (1, 2)
    }
    scales = {}
    for n in (1, 2):
        rows = {}
        for rho in (0.25, 0.5, 1.0, 2.0, 4.0):
            dl = delta_of(rho, n)
            rows[repr(rho)] = {
                "delta": float(dl),
                "eta": float(eta_of(rho)),
                "kappa": float(kappa_of(rho, dl)),
                "colour_bound": float(colour_bound(rho, n)),
            }
        scales[str(n)] = rows
    out["scales"] = scales
    out["multiplicity"] = {
        f"{rho!r}/{k}": float(multiplicity(k * rho, rho, 1)) for rho in (0.5, 1.0) for k in (1, 2, 4)
    }
    out["annulus"] = {
        f"{rho!r}/{delta!r}": {
            "log_factor": float(log_factor(rho, delta)),
            "factor": float(mp.sinh(rho) * log_factor(rho, delta)),
        }
        for rho, delta in ((1.0, 0.25), (0.5, 0.1))
    }
    # Gagliardo seminorm of z -> z^k on S^1: the Fejer kernel integrates to 2 pi k
    out["circle_seminorm"] = {str(k): float(4 * mp.pi**2 * k) for k in (1, 2, 3)}
    out["circle_w1n_energy"] = {str(k): float(2 * mp.pi * k) for k in (1, 2, 3)}
    # identity of S^2: integrand |y-z|^3/|y-z|^4 and the shell potential is 4 pi
    out["sphere_identity_seminorm"] = float(16 * mp.pi**2)
    out["sphere_identity_w1n_energy"] = float(8 * mp.pi)
    out["asymptotic_constants"] = {str(n): fit_asymptotics(n) for n in (1, 2)}
    return out


# -- corpus calibration -------------------------------------------------------------


def calibration() -> dict:
    from hyperext.extension import hyperharmonic_extension
    from hyperext.pipeline import distribution_function
    from hyperext.radial import CompositeField
    from hyperext.scanner import calibrate_density_constant, good_sphere_density_check, w1n_good_radius_check
    from hyperext.spheremap import CIRCLE_CORPUS, SphereGrid, gagliardo_seminorm, make_test_map, w1n_energy

    grid = SphereGrid.circle(512)
    density, per_map = [], {}
    centres = (np.zeros(2), np.array([0.3, 0.0]), np.array([0.0, -0.5]))
    w1n_rows, c2_rows = {}, {}
    for desc in CIRCLE_CORPUS:
        if desc.startswith("constant"):
            continue
        u = make_test_map(desc, grid)
        field = hyperharmonic_extension(u)
        E = gagliardo_seminorm(u).value
        reps = [good_sphere_density_check(field, E, a=c) for c in centres]
        density.extend(reps)
        per_map[desc] = [r.constants.tolist() for r in reps]
        if desc.startswith("circle-degree"):
            energy = w1n_energy(u)
            w1n_rows[desc] = w1n_good_radius_check(field, energy).constants.tolist()
        # projected extension without improvements: lambda^2 |{|DU| > lambda}| per unit scale
        U = CompositeField(field, (), u.target, final_projection=True)
        dist = distribution_function(U, mc_samples=1 << 16, seed=0)
        c2_rows[desc] = dist.quasinorm / (u.target.lipschitz_bound**2 * np.sqrt(E))
    consts = np.concatenate([r.constants for r in density])
    w1n = np.concatenate([np.asarray(v) for v in w1n_rows.values()])
    return {
        "density_constant": calibrate_density_constant(density),
        "density_variation": float(consts.max() / consts.min()),
        "density_per_map": per_map,
        "w1n_constant": float(w1n.max()),
        "w1n_variation": float(w1n.max() / w1n.min()),
        "w1n_per_map": w1n_rows,
        "aggregate_constant": float(max(c2_rows.values())),
        "aggregate_per_map": c2_rows,
        "density_centres": [c.tolist() for c in centres],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--skip-calibration", action="store_true")
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    data = json.loads(OUT.read_text()) if OUT.exists() else {}
    data["closed_forms"] = closed_forms()
    print(f"closed forms: {time.perf_counter() - t0:.1f}s")
    if not args.skip_calibration:
        data["calibration"] = calibration()
        print(f"calibration: {time.perf_counter() - t0:.1f}s")
    OUT.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    print(json.dumps(data["closed_forms"]["asymptotic_constants"], indent=1))
    if "calibration" in data:
        cal = data["calibration"]
        print({k: cal[k] for k in cal if not k.endswith("per_map")})


if __name__ == "__main__":
    main()
