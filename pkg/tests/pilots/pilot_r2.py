"""Pilot run behind the R^2 fixture used by the acceptance suite.

    python3 tests/pilots/pilot_r2.py > tests/data/pilot_r2.json

Rank-2 model, m=500, n=31, 40% of cells observed with 1000 exposures each,
20% of observed cells held out, ALS(rank 2, lambda 0.01). Seeds 0-9.
"""
import json
import sys

from vodkit import evalx, synth
from vodkit.matest import AlsConfig

M, N, RANK, RHO, EXPOSURES, HOLDOUT, LAM = 500, 31, 2, 0.4, 1000, 0.2, 0.01


def trial(seed: int) -> float:
    model = synth.generate_model(M, N, RANK, seed=seed)
    obs = synth.sample_observations(model, synth.SamplingConfig(rho=RHO, exposures_per_observed_cell=EXPOSURES, seed=1000 + seed))
    sp = evalx.split(obs, HOLDOUT, seed)
    _, r2_out, _ = evalx.evaluate(sp, "als", AlsConfig(rank=RANK, lam=LAM, seed=seed))
    return r2_out


def main():
    r2 = {str(s): trial(s) for s in range(10)}
    json.dump({
        "config": {"m": M, "n": N, "rank": RANK, "rho": RHO, "exposures": EXPOSURES, "holdout": HOLDOUT, "lambda": LAM},
        "r2_out": r2,
        "min": min(r2.values()),
        "max": max(r2.values()),
    }, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
