"""Render one synthetic scene, degrade it and compare simple upsamplers.

The variational solver is run with an all-zero edge map, i.e. a plain
isotropic second-order model, to show what it does before any learning.
"""
import numpy as np

from depthsr import bench, raycast, tgv

spec = raycast.SceneSpec(size=96)
deg = raycast.DegradationSpec(rho=2, noise_sigma=651.0)
t, s_lr, s_mid = raycast.make_pair(master_seed=3, index=0, scene_spec=spec, deg_spec=deg)
print(f"ground truth {t.shape}, low-res {s_lr.shape}, depth range {t.min():.0f}..{t.max():.0f} mm")

bicubic = bench.bicubic_upsample(s_lr, t.shape[-2:])
smoothed = tgv.solve(s_mid, np.zeros((2,) + t.shape[-2:]), tgv.SolverParams(iters=200))

for name, pred in [("bilinear", s_mid), ("bicubic", bicubic), ("isotropic TGV", smoothed)]:
    print(f"{name:14s} RMSE {bench.rmse(pred, t):7.2f}  MAE {bench.mae(pred, t):7.2f}")
