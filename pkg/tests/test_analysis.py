import time

import pytest

from deepcount import analysis as A
from deepcount import network as N

FULL = N.NetworkSpec.full()


def conv(k1, k2, cin, cout):
    return k1 * k2 * cin * cout + cout


# hand-derived per-layer parameter oracle, independent of LayerSpec and the builder
FRONTEND = sum(conv(3, 3, a, b) for a, b in [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256),
                                             (256, 256), (256, 256), (256, 512), (512, 512), (512, 512)])
BACKBONE = 5 * conv(3, 3, 512, 256) + 4 * conv(3, 3, 256, 512) + conv(3, 4, 256, 1024) + 1024 + 1


def branch(k):
    return conv(3, 4, 1024, 256) + (5 - k) * conv(4, 4, 512, 256) + conv(1, 1, 512, 1)


def test_layer_flops_examples():
    assert A.flops(A.LayerSpec("conv", 3, 3, 512, 512, 1, 1, 48, 64)) == 7_247_757_312
    assert A.millions(7_247_757_312) == 7248
    assert A.flops(A.LayerSpec("conv_transposed", 3, 4, 1024, 256, 1, 0, 3, 4)) == 37_748_736
    assert A.flops(A.LayerSpec("conv", 1, 1, 1, 1, 1, 0, 1, 1)) == 1


def test_layer_params_examples():
    assert A.params(A.LayerSpec("conv", 3, 4, 256, 1024, 1, 0, 1, 1)) == 3_145_728 + 1024
    assert A.params(A.LayerSpec("conv", 1, 1, 64, 1, 1, 0, 1, 1)) == 65


def test_millions_rounding():
    assert A.millions(26_499_809_280) == 26500
    assert A.millions(1_500_000) == 2 and A.millions(2_499_999) == 2
    assert A.millions(537_000) == 0.5 and A.millions(0) == 0


def test_parameter_totals_match_the_hand_oracle():
    assert FRONTEND + BACKBONE == 21_403_201
    total = FRONTEND + BACKBONE + sum(branch(k) for k in range(1, 6))
    assert total == 58_109_766
    assert A.audit(FULL, detached=True).total_params == FRONTEND + BACKBONE
    assert A.audit(FULL).total_params == total
    assert abs(total - 58.1e6) <= 0.1e6 and abs(FRONTEND + BACKBONE - 21.4e6) <= 0.1e6


def test_audit_of_a_built_model_matches_the_spec_audit():
    m = N.build(N.NetworkSpec.desk(), seed=0)
    a, b = A.audit(m), A.audit(m.spec)
    assert a.layer_flops == b.layer_flops and a.total_params == m.num_parameters()


def _shape(l):
    return (l.kind, l.k1, l.k2, l.cin, l.cout, l.stride, l.padding, l.out_h, l.out_w)


def test_audit_matches_presets_row_for_row():
    rows = A.audit(FULL).layers
    by_prefix = {
        "vgg16-frontend": [l for l in rows if l.name.startswith("frontend.")],
        "deepcount-backend": [l for l in rows if l.name.startswith("backbone.")],
    }
    for k in range(1, 6):
        by_prefix[f"branch{k}"] = [l for l in rows if l.name.startswith(f"branch{k}.")]
    for name, layers in by_prefix.items():
        assert [_shape(l) for l in A.preset(name).layers] == [_shape(l) for l in layers], name


def test_backend_presets():
    t = time.perf_counter()
    assert abs(A.preset("csrnet-backend").total_mflops - 26500) <= 1
    assert abs(A.preset("deepcount-backend").total_mflops - 6034) <= 2
    assert A.preset("csrnet-backend").total_flops == 26_499_809_280
    assert A.preset("deepcount-backend").total_flops == 6_033_507_328
    assert time.perf_counter() - t < 1.0


@pytest.mark.parametrize("k,mflops", [(1, 8596), (2, 2152), (3, 541), (4, 138), (5, 38)])
def test_branch_presets_follow_the_layer_formula(k, mflops):
    assert A.preset(f"branch{k}").total_mflops == mflops
    hand = 3 * 4 * 1024 * 256 * 3 * 4
    h, w = 3, 4
    for _ in range(5 - k):
        h, w = 2 * h, 2 * w
        hand += h * w * 256 * 4 * 4 * 512
    hand += h * w * 512
    assert A.preset(f"branch{k}").total_flops == hand


def test_channel_scale_quarters_every_conv_row():
    a = A.audit(FULL)
    b = A.audit(N.NetworkSpec.full(channel_scale=0.5))
    for la, lb, fa, fb in zip(a.layers, b.layers, a.layer_flops, b.layer_flops):
        if la.cin == 3 or la.cout == 1:
            continue  # image input and scalar heads keep their width
        assert fb * 4 == fa, la.name


def test_detached_audit_has_no_branch_rows():
    rows = A.audit(FULL, detached=True).layers
    assert rows and all(N.branch_of(l.name) is None for l in rows)


def test_report_formats():
    rep = A.preset("branch5")
    text = rep.to_text()
    assert text.splitlines()[-1].split()[:2] == ["Total", "38"]
    csv_lines = rep.to_csv().splitlines()
    assert csv_lines[0].startswith("layer,name,kind") and csv_lines[-1].startswith("Total")
    with pytest.raises(ValueError):
        A.preset("resnet")
