import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthsr import bench, grid
from depthsr.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from depthsr.cnn import ConvNet, net_forward
from depthsr.raycast import DepthPairs
from depthsr.tgv import SolverParams
from oracles import mae_loop, rmse_loop


def test_metric_examples(rng):
    a = rng.normal(size=(1, 4, 4))
    assert bench.rmse(a, a) == 0 and bench.mae(a, a) == 0
    assert bench.rmse(a + 2, a) == pytest.approx(2.0, abs=1e-15)
    assert bench.mae(np.array([1.0, -3.0]), np.zeros(2)) == 2.0


def test_metrics_match_loop_oracle(rng):
    a = rng.normal(size=(1, 9, 7)) * 100
    b = rng.normal(size=(1, 9, 7)) * 100
    assert bench.rmse(a, b) == pytest.approx(rmse_loop(a, b), rel=1e-12)
    assert bench.mae(a, b) == pytest.approx(mae_loop(a, b), rel=1e-12)


def test_masked_metrics(rng):
    t = rng.uniform(1, 2, size=(1, 5, 5))
    t[0, :2] = 0
    p = t + 1.0
    p[0, :2] = 1000
    mask = bench.valid_mask(t)
    assert bench.rmse(p, t, mask) == pytest.approx(1.0)
    assert bench.mae(p, t, mask) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        bench.rmse(p, t, np.zeros_like(t, dtype=bool))
    with pytest.raises(ValueError):
        bench.mae(p, t[..., :3])


finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50))
def test_metric_properties(a, b, k):
    r, m = bench.rmse(a, b), bench.mae(a, b)
    assert r == bench.rmse(b, a) and m == bench.mae(b, a)
    assert r >= m * (1 - 1e-12) >= 0
    assert bench.rmse(k * a, k * b) == pytest.approx(abs(k) * r, rel=1e-9, abs=1e-9)


def test_bicubic_reproduces_samples_and_constants(rng):
    c = np.full((1, 4, 4), 7.5)
    np.testing.assert_allclose(bench.bicubic_upsample(c, (8, 8)), 7.5, atol=1e-12)
    u = rng.normal(size=(1, 5, 6))
    np.testing.assert_allclose(bench.bicubic_upsample(u, (5, 6)), u, atol=1e-14)


def test_bicubic_kernel_values():
    k = bench._cubic(np.array([0.0, 0.5, 1.0, 1.5, 2.0]))
    np.testing.assert_allclose(k, [1.0, 0.5625, 0.0, -0.0625, 0.0], atol=1e-15)


def test_bicubic_exact_on_interior_ramp():
    xs = np.arange(16.0)
    u = np.tile(xs, (16, 1))[None]
    out = bench.bicubic_upsample(u, (32, 32))
    expected = (np.arange(32) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(out[0, 5, 4:-4], expected[4:-4], atol=1e-12)


def dataset(rng, n=3, size=16):
    t = rng.uniform(1000, 3000, size=(n, 1, size, size))
    lows = grid.downsample(t, 2)
    mids = grid.resize_bilinear(lows, (size, size), align_corners=False)
    return DepthPairs(mids, t, [f"s{i}" for i in range(n)], lows)


def test_bilinear_degenerate_rho_one(rng):
    t = rng.uniform(1, 2, size=(2, 1, 6, 6))
    res = bench.evaluate_method("bilinear", DepthPairs(t.copy(), t, ["a", "b"], t.copy()), 1)
    assert [r.rmse for r in res] == [0.0, 0.0]
    res = bench.evaluate_method("bicubic", DepthPairs(t.copy(), t, ["a", "b"], t.copy()), 1)
    assert [r.rmse for r in res] == [0.0, 0.0]


def test_evaluate_rows_and_missing_models(rng):
    ds = dataset(rng)
    res, errors = bench.evaluate_methods(bench.METHODS, ds, 2, {})
    assert set(errors) == {"cnn_only", "cnn_plus_atgv", "atgv_net"}
    assert [r.sample for r in res if r.method == "bilinear"] == ["s0", "s1", "s2"]
    for r in res:
        assert r.rmse >= r.mae >= 0 and r.rho == 2
    with pytest.raises(ValueError):
        bench.predict("nearest", ds.inputs)


def test_learned_methods_consistent(rng):
    ds = dataset(rng, n=2)
    net = ConvNet.create(2, 3, rng=0, offset=2000.0, scale=500.0)
    p = SolverParams(iters=4)
    models = {m: (net, p) for m in bench.LEARNED}
    res, errors = bench.evaluate_methods(["cnn_only", "atgv_net"], ds, 2, models, batch_size=1)
    assert errors == {}
    g, _ = net_forward(net, ds.inputs[0])
    assert res[0].rmse == pytest.approx(bench.rmse(g, ds.targets[0]), rel=1e-12)
    p0 = SolverParams(iters=0)
    same = bench.evaluate_method("atgv_net", ds, 2, net=net, params=p0)
    assert [r.rmse for r in same] == [r.rmse for r in res[:2]]


def test_summary_csv_and_table(tmp_path, rng):
    ds = dataset(rng)
    res, _ = bench.evaluate_methods(["bilinear", "bicubic"], ds, 2, {})
    bench.write_csv(res, tmp_path / "r.csv")
    head = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert head == "method,sample,rho,rmse,mae"
    assert bench.read_csv(tmp_path / "r.csv") == res
    s = bench.summarize(res)
    assert s["bilinear"]["count"] == 3
    assert s == bench.summarize(list(reversed(res)))
    table = bench.format_table(s)
    assert table.splitlines()[1].startswith("bilinear")


def test_ordering_holds():
    s = {"atgv_net": {"rmse": 1.0}, "cnn_only": {"rmse": 2.0}, "bilinear": {"rmse": 3.0}}
    assert bench.ordering_holds(s)
    s["atgv_net"]["rmse"] = 2.5
    assert not bench.ordering_holds(s)


def test_error_maps(tmp_path, rng):
    paths = bench.write_error_map(np.ones((1, 4, 4)), np.zeros((1, 4, 4)), tmp_path, "x")
    assert all(p.endswith(("_err.pfm", "_err.png")) for p in paths)
    from depthsr.depthio import read_pfm

    np.testing.assert_array_equal(read_pfm(paths[0]), 1.0)


def test_reference_values_documented():
    assert bench.REFERENCE_RMSE[("cones", 2)] == {"bicubic": 3.8392, "atgv_net": 1.0021}


# checkpoints


def test_checkpoint_round_trip(tmp_path):
    net = ConvNet.create(3, 4, rng=1, dtype=np.float32, offset=12.5, scale=3.0)
    params = SolverParams(alpha1=4.0, iters=7).with_scalars({"tau_u": 0.0123})
    save_checkpoint(tmp_path / "m.ckpt", net, params, {"epochs": 3})
    net2, p2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert p2 == params and meta == {"epochs": 3}
    assert net2.dtype == np.float32 and (net2.offset, net2.scale) == (12.5, 3.0)
    for a, b in zip(net.params(), net2.params()):
        np.testing.assert_array_equal(a, b)
    assert [l.activation for l in net2.layers] == [l.activation for l in net.layers]
    net3, _, _ = load_checkpoint(tmp_path / "m.ckpt", dtype=np.float64)
    assert net3.dtype == np.float64


def test_checkpoint_layout(tmp_path):
    net = ConvNet.create(1, 1, rng=0)
    save_checkpoint(tmp_path / "m.ckpt", net)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"DSRCKPT\0"
    assert int.from_bytes(raw[8:12], "little") == 1
    n = int.from_bytes(raw[12:20], "little")
    assert len(raw) == 20 + n + 8 * (27 + 3)
    _, params, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert params is None


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    net = ConvNet.create(2, 2, rng=0)
    save_checkpoint(p, net)
    p.write_bytes(p.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
