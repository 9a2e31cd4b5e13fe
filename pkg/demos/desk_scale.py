"""Two-stage training at desk scale, then a held-out comparison of all methods.

Usage: python3 demos/desk_scale.py [count] [seed]

The defaults reproduce one seed of the acceptance trend run (2000 maps,
about 20 minutes on one core). Pass a smaller count for a quick look; with a
few hundred maps the learned methods already beat bilinear upsampling.
"""
import logging
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

import desk_scale  # noqa: E402

logging.basicConfig(level=logging.INFO)
count = int(sys.argv[1]) if len(sys.argv) > 1 else desk_scale.PROFILE["count"]
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
profile = dict(desk_scale.PROFILE, count=count, held_out=max(10, min(100, count // 20)))

train, test = desk_scale.make_data(profile)
rmse, params = desk_scale.run_seed(seed, train, test, profile)
for m, v in rmse.items():
    print(f"{m:14s} {v:8.2f}")
print("learned scalars:", {k: round(getattr(params, k), 4) for k in ("alpha0", "alpha1", "beta", "gamma", "w_lambda", "theta")})
