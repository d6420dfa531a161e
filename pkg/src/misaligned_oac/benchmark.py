"""Wall-time benchmark of the estimators on one fixed slot.

Run as ``python -m misaligned_oac.benchmark`` to print one JSON line per
measurement as soon as it completes, so a caller enforcing a time budget
still sees every finished measurement.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .channel import SymbolBlock, observe_slot
from .estimators import estimate
from .model import DeviceProfile, validate_geometry

BENCH_OFFSETS = (0.0, 0.2, 0.45, 0.7)


def bench_slot(M: int, L: int, seed: int = 0, *, standard: bool):
    rng = np.random.default_rng([seed, M, L])
    taus = BENCH_OFFSETS[:M] if M <= len(BENCH_OFFSETS) else np.linspace(0.0, 0.9, M)
    geom = validate_geometry([DeviceProfile(float(t), 1.0, float(p)) for t, p in zip(taus, rng.uniform(0, 1.5, M))])
    s = (rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L))) / np.sqrt(2)
    return observe_slot(geom, SymbolBlock(s), esn0_db=10.0, seed=seed, standard=standard)


def time_estimator(estimator_id: str, M: int, L: int, *, repeats: int = 1, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time of one estimator call (slot construction excluded)."""
    obs = bench_slot(M, L, seed, standard=estimator_id == "direct_ml")
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        estimate(estimator_id, obs)
        best = min(best, time.perf_counter() - t0)
    return float(best)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--estimators", default="sp_ml,direct_ml")
    p.add_argument("--lengths", default="1024,4096")
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--repeats", type=int, default=1)
    args = p.parse_args(argv)
    for est in args.estimators.split(","):
        for L in (int(v) for v in args.lengths.split(",")):
            t = time_estimator(est, args.devices, L, repeats=args.repeats)
            print(json.dumps({"estimator": est, "M": args.devices, "L": L, "seconds": t}), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
