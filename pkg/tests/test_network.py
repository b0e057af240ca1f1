import numpy as np
import pytest

from deepcount import formats as F
from deepcount import network as N
from deepcount import tensor as T

FULL = N.NetworkSpec.full()


@pytest.fixture(scope="module")
def full_model():
    return N.build(FULL, seed=0).freeze()


@pytest.fixture(scope="module")
def small():
    return N.build(N.NetworkSpec((64, 64), depth=2, channel_scale=1 / 32), seed=3, dtype=np.float64)


def test_full_scale_parameter_counts(full_model):
    backbone = full_model.num_parameters("frontend.") + full_model.num_parameters("backbone.")
    assert abs(backbone - 21.4e6) <= 0.1e6
    assert abs(full_model.num_parameters() - 58.1e6) <= 0.1e6


def test_same_seed_is_bitwise_reproducible():
    spec = N.NetworkSpec.desk()
    a, b = N.build(spec, seed=9), N.build(spec, seed=9)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    c = N.build(spec, seed=10)
    assert not np.array_equal(a.params["backbone.tap1.weight"].data, c.params["backbone.tap1.weight"].data)


def test_xavier_variance(full_model):
    for name in ("frontend.conv4_1", "backbone.tap1", "backbone.bottleneck", "branch1.up1"):
        w = full_model.params[name + ".weight"].data
        k1, k2, cin, cout = w.shape
        want = 2.0 / (k1 * k2 * (cin + cout))
        assert abs(w.var() / want - 1) < 0.1, name
        assert not full_model.params[name + ".bias"].data.any()


def test_full_scale_dimensions():
    specs = {l.name: l for l in N.layer_specs(FULL)}
    for i, hw in enumerate([(48, 64), (24, 32), (12, 16), (6, 8), (3, 4)], 1):
        tap = specs[f"backbone.tap{i}"]
        assert (tap.out_h, tap.out_w, tap.cout) == hw + (256,)
    bott = specs["backbone.bottleneck"]
    assert (bott.k1, bott.k2, bott.cin, bott.cout, bott.out_h, bott.out_w) == (3, 4, 256, 1024, 1, 1)
    assert (specs["branch5.head"].out_h, specs["branch5.head"].out_w) == (3, 4)
    assert (specs["branch1.head"].out_h, specs["branch1.head"].out_w) == (48, 64)
    up = specs["branch1.up0"]
    assert (up.kind, up.k1, up.k2, up.cin, up.cout) == ("conv_transposed", 3, 4, 1024, 256)
    assert specs["branch1.up1"].cin == 512


@pytest.mark.parametrize("hw,depth", [((100, 128), 5), ((384, 500), 5), ((96, 100), 3)])
def test_input_must_divide_the_bottleneck(hw, depth):
    with pytest.raises(ValueError, match="divisible"):
        N.NetworkSpec(hw, depth)


def test_forward_shapes(small):
    x = np.random.default_rng(0).standard_normal((2, 64, 64, 3))
    count, taps, bottleneck = small.forward_backbone(T.Tensor(x))
    assert count.shape == (2, 1)
    assert [t.shape[1:3] for t in taps] == [(8, 8), (4, 4)]
    assert bottleneck.shape == (2, 1, 1, small.spec.c(1024))
    assert small.forward_branch(1, bottleneck, taps).shape == (2, 8, 8, 1)
    assert small.forward_branch(2, bottleneck, taps).shape == (2, 4, 4, 1)
    with pytest.raises(ValueError):
        small.forward_backbone(T.Tensor(np.zeros((1, 32, 64, 3))))


def test_zero_weights_give_the_final_bias():
    m = N.build(N.NetworkSpec.desk(), seed=0)
    for p in m.params.values():
        p.data[...] = 0
    m.params["backbone.fc.bias"].data[:] = 4.25
    imgs = np.random.default_rng(1).standard_normal((3, 96, 128, 3)).astype(np.float32)
    assert m.predict(imgs).count.tolist() == [4.25] * 3


def test_branch_integral_is_the_map_sum(small):
    x = np.random.default_rng(2).standard_normal((1, 64, 64, 3))
    pred = small.predict(x, branches=(1, 2))
    for k in (1, 2):
        assert pred.density_maps[k].sum() == pytest.approx(float(np.sum(pred.density_maps[k])))
    assert set(pred.density_maps) == {1, 2}


def test_detach(full_model, tmp_path):
    det = full_model.detach_branches()
    assert abs(det.num_parameters() - 21.4e6) <= 0.1e6
    assert not det.has_branches and all(N.branch_of(n) is None for n in det.params)
    F.write_dcwt(tmp_path / "full.dcwt", full_model.state_dict())
    F.write_dcwt(tmp_path / "det.dcwt", det.state_dict())
    assert (tmp_path / "det.dcwt").stat().st_size < (tmp_path / "full.dcwt").stat().st_size


def test_detached_count_is_bitwise_identical():
    m = N.build(N.NetworkSpec.desk(), seed=1)
    x = np.random.default_rng(3).standard_normal((2, 96, 128, 3)).astype(np.float32)
    det = m.detach_branches()
    assert np.array_equal(m.predict(x).count, det.predict(x).count)
    with pytest.raises(N.BranchUnavailable, match="branch unavailable"):
        det.predict(x, branches=(1,))
    # parameters are copies
    det.params["backbone.fc.bias"].data[:] += 1
    assert not np.array_equal(m.predict(x).count, det.predict(x).count)


def test_state_round_trip_rebuilds_spec(tmp_path):
    m = N.build(N.NetworkSpec.desk(), seed=4)
    F.write_dcwt(tmp_path / "w.dcwt", m.state_dict())
    back = N.from_state(F.read_dcwt(tmp_path / "w.dcwt"))
    assert back.spec == m.spec
    det = N.from_state(m.detach_branches().state_dict())
    assert det.spec.depth == 3 and not det.has_branches
    x = np.random.default_rng(5).standard_normal((1, 96, 128, 3)).astype(np.float32)
    assert np.array_equal(back.predict(x).count, m.predict(x).count)


def test_frontend_learns_at_half_rate(small):
    for n, p in small.params.items():
        assert p.learn_rate_scale == (0.5 if n.startswith("frontend.") else 1.0)


@pytest.mark.parametrize("mode", ["relu", "prelu"])
def test_activation_mode_is_configurable(mode):
    m = N.build(N.NetworkSpec.desk(activation_mode=mode), seed=0)
    assert m.spec.activation_mode == mode
    assert N.with_activation(m.spec, "relu").activation_mode == "relu"
