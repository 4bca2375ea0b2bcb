import numpy as np
import pytest

from enerprune import (
    CONV,
    FC,
    HardwareProfile,
    LayerShape,
    LayerStats,
    MemoryLevel,
    default_profile,
    dense_macs,
    layer_energy,
    load_profile,
    network_energy,
    nonskipped_macs,
    optimize_accesses,
)
from enerprune.energy import (
    EnergyBreakdown,
    fetch_once_lower_bound,
    no_reuse_upper_bound,
    profile_from_dict,
)
from enerprune.errors import ConfigError, InfeasibleProfileError

from oracles import best_tiling, count_nonskipped

TWO_LEVEL = HardwareProfile(
    levels=(MemoryLevel("outer", 100.0, None), MemoryLevel("inner", 1.0, 10**9))
)


def three_level(cap1=256, cap2=32, e0=100.0, e1=10.0, e2=1.0):
    return HardwareProfile(
        levels=(
            MemoryLevel("outer", e0, None),
            MemoryLevel("mid", e1, cap1),
            MemoryLevel("inner", e2, cap2),
        )
    )


def random_small_shape(rng, max_bound=16):
    """CONV shape whose five loop bounds all stay <= max_bound."""
    while True:
        stride = int(rng.integers(1, 3))
        filt_h = int(rng.integers(1, 4))
        filt_w = int(rng.integers(1, 4))
        out_h = int(rng.integers(1, max_bound + 1))
        out_w = int(rng.integers(1, max_bound + 1))
        in_c = int(rng.integers(1, min(max_bound, 6) + 1))
        n = int(rng.integers(1, max_bound + 1))
        batch = int(rng.integers(1, 4))
        in_h = (out_h - 1) * stride + filt_h
        in_w = (out_w - 1) * stride + filt_w
        if in_h <= 40 and in_w <= 40:
            return LayerShape(CONV, in_h, in_w, in_c, filt_h, filt_w, n, stride, 0, batch)


# ---------------------------------------------------------------------------
# MAC counts


def test_dense_macs_fc():
    assert dense_macs(LayerShape(FC, 2, 2, 1, 2, 2, 3)) == 12


def test_dense_macs_conv():
    s = LayerShape(CONV, 4, 4, 1, 3, 3, 1)
    assert dense_macs(s) == 2 * 2 * 1 * 9


def test_dense_macs_zero_filters():
    assert dense_macs(LayerShape(CONV, 4, 4, 1, 3, 3, 0)) == 0


def test_nonskipped_dense_equals_dense():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    assert nonskipped_macs(s, LayerStats()) == dense_macs(s)


def test_nonskipped_zero_weight_density():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    assert nonskipped_macs(s, LayerStats(weight_density=0.0)) == 0


def test_nonskipped_exact_loop_count():
    # frozen oracle value: instrumented loop over a fixed sparse instance
    rng = np.random.default_rng(42)
    s = LayerShape(CONV, 5, 5, 2, 3, 3, 3, stride=1, pad=0, batch=2)
    x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
    x[rng.random(x.shape) < 0.4] = 0.0
    w = rng.standard_normal((s.m, s.n)).astype(np.float32)
    w[rng.random(w.shape) < 0.5] = 0.0
    exact = count_nonskipped(x, w, s)
    assert exact == 238  # frozen from the oracle run

    # independence model within 20% relative error
    x_density = np.count_nonzero(x) / x.size
    w_density = np.count_nonzero(w) / w.size
    model = nonskipped_macs(s, LayerStats(weight_density=w_density, input_act_density=x_density))
    assert abs(model - exact) / exact < 0.2


def test_independence_model_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(10):
        s = LayerShape(
            CONV,
            6,
            6,
            int(rng.integers(1, 4)),
            3,
            3,
            int(rng.integers(2, 6)),
            stride=1,
            pad=0,
            batch=2,
        )
        x = rng.standard_normal((2, s.in_c, 6, 6)).astype(np.float32)
        x[rng.random(x.shape) < rng.uniform(0.2, 0.6)] = 0.0
        w = rng.standard_normal((s.m, s.n)).astype(np.float32)
        w[rng.random(w.shape) < rng.uniform(0.2, 0.6)] = 0.0
        exact = count_nonskipped(x, w, s)
        st = LayerStats(
            weight_density=np.count_nonzero(w) / w.size,
            input_act_density=np.count_nonzero(x) / x.size,
        )
        assert abs(nonskipped_macs(s, st) - exact) / max(exact, 1) < 0.2


def test_measured_override_validated():
    with pytest.raises(ConfigError):
        LayerStats(weight_density=0.5, input_act_density=0.5, nonskipped_mac_fraction=0.6)
    st = LayerStats(weight_density=0.5, input_act_density=0.5, nonskipped_mac_fraction=0.2)
    assert st.effective_nonskipped_fraction == 0.2


# ---------------------------------------------------------------------------
# profiles


def test_profile_energies_must_decrease():
    with pytest.raises(ConfigError):
        HardwareProfile(
            levels=(MemoryLevel("a", 10.0, None), MemoryLevel("b", 10.0, 64))
        )


def test_profile_single_unbounded_level():
    with pytest.raises(ConfigError):
        HardwareProfile(
            levels=(MemoryLevel("a", 10.0, None), MemoryLevel("b", 1.0, None))
        )
    with pytest.raises(ConfigError):
        HardwareProfile(levels=(MemoryLevel("a", 10.0, 64), MemoryLevel("b", 1.0, 32)))


def test_default_profile_loads():
    hw = default_profile()
    assert hw.levels[0].capacity is None
    assert [lv.energy for lv in hw.levels] == [200.0, 6.0, 2.0, 1.0]
    assert hw.mac_energy == 1.0


def test_profile_toml_json_round(tmp_path):
    toml_text = """
mac_energy = 2.0
weight_bits = 8
activation_bits = 4
compression_overhead = 0.2

[[level]]
name = "big"
energy = 50.0

[[level]]
name = "small"
energy = 1.5
capacity = 128
"""
    p = tmp_path / "hw.toml"
    p.write_text(toml_text)
    hw = load_profile(p)
    assert hw.mac_energy == 2.0 and hw.weight_bits == 8 and hw.activation_bits == 4
    assert hw.levels[1].capacity == 128

    q = tmp_path / "hw.json"
    q.write_text(
        '{"mac_energy": 2.0, "weight_bits": 8, "activation_bits": 4,'
        ' "compression_overhead": 0.2,'
        ' "level": [{"name": "big", "energy": 50.0},'
        ' {"name": "small", "energy": 1.5, "capacity": 128}]}'
    )
    assert load_profile(q) == hw


def test_profile_missing_field():
    with pytest.raises(ConfigError):
        profile_from_dict({"level": [{"name": "x"}]})


# ---------------------------------------------------------------------------
# tiling search


def test_full_reuse_single_level():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4, stride=1, pad=0, batch=1)
    point, counts = optimize_accesses(s, TWO_LEVEL)
    assert point.tiles == ((1, 4, 2, 4, 4),)  # whole layer in one tile
    f_if = 1 * 2 * 6 * 6
    f_w = 4 * 2 * 9
    f_o = 1 * 4 * 4 * 4
    assert counts[0].ifmap == f_if
    assert counts[0].weights == f_w
    assert counts[0].ofmap == f_o
    macs = dense_macs(s)
    assert counts[1] == type(counts[1])("inner", macs, macs, 2 * macs)


def test_degenerate_capacity_gives_no_reuse():
    # smallest feasible inner level: one weight + one activation + one psum
    hw = HardwareProfile(
        levels=(MemoryLevel("outer", 100.0, None), MemoryLevel("inner", 1.0, 3))
    )
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4, stride=1, pad=0, batch=1)
    point, counts = optimize_accesses(s, hw)
    assert point.tiles == ((1, 1, 1, 1, 1),)
    macs = dense_macs(s)
    # one outer fetch per MAC operand
    assert counts[0].ifmap == macs
    assert counts[0].weights == macs
    # partial sums accumulate locally across the filter window
    assert counts[0].ofmap == 1 * 4 * 4 * 4 * (2 * s.in_c - 1)


def test_infeasible_capacity_raises():
    hw = HardwareProfile(
        levels=(MemoryLevel("outer", 100.0, None), MemoryLevel("inner", 1.0, 2))
    )
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    with pytest.raises(InfeasibleProfileError, match="infeasible"):
        optimize_accesses(s, hw)


def test_search_matches_enumeration_three_level():
    rng = np.random.default_rng(5)
    hw = three_level()
    for _ in range(8):
        s = random_small_shape(rng, max_bound=8)
        point, counts = optimize_accesses(s, hw)
        got = sum(
            c.ifmap * lv.energy + c.weights * lv.energy + c.ofmap * lv.energy
            for c, lv in zip(counts, hw.levels)
        )
        want_energy, want_flat = best_tiling(s, hw)
        assert got == pytest.approx(want_energy, rel=1e-12)
        assert point.flat() == want_flat


def test_search_matches_enumeration_four_level_default():
    rng = np.random.default_rng(6)
    hw = default_profile()
    for _ in range(4):
        s = random_small_shape(rng, max_bound=5)
        point, counts = optimize_accesses(s, hw)
        got = sum((c.ifmap + c.weights + c.ofmap) * lv.energy for c, lv in zip(counts, hw.levels))
        want_energy, want_flat = best_tiling(s, hw)
        assert got == pytest.approx(want_energy, rel=1e-12)
        assert point.flat() == want_flat


def test_search_tie_break_is_lexicographic_on_symmetric_layer():
    # square spatial dims make h/w-swapped tilings tie exactly in energy
    hw = three_level(cap1=64, cap2=8)
    for n in (1, 2, 4):
        s = LayerShape(CONV, 8, 8, 2, 1, 1, n, stride=1, pad=0, batch=1)
        point, counts = optimize_accesses(s, hw)
        want_energy, want_flat = best_tiling(s, hw)
        got = sum((c.ifmap + c.weights + c.ofmap) * lv.energy for c, lv in zip(counts, hw.levels))
        assert got == pytest.approx(want_energy, rel=1e-12)
        assert point.flat() == want_flat


def test_energy_bounds_hold():
    rng = np.random.default_rng(9)
    hw = three_level()
    for _ in range(10):
        s = random_small_shape(rng, max_bound=10)
        _, counts = optimize_accesses(s, hw)
        moved = sum((c.ifmap + c.weights + c.ofmap) * lv.energy for c, lv in zip(counts, hw.levels))
        assert fetch_once_lower_bound(s, hw) <= moved + 1e-9
        assert moved <= no_reuse_upper_bound(s, hw) + 1e-9


def test_zero_filter_layer_zero_counts():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 0)
    _, counts = optimize_accesses(s, TWO_LEVEL)
    assert all(c.ifmap == c.weights == c.ofmap == 0 for c in counts)
    br = layer_energy(s, LayerStats(), TWO_LEVEL)
    assert br.total == 0.0


# ---------------------------------------------------------------------------
# layer energy scaling laws


def test_dense_16bit_is_identity_scaling():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    hw = TWO_LEVEL
    br = layer_energy(s, LayerStats(), hw)
    _, counts = optimize_accesses(s, hw)
    raw_if = sum(c.ifmap * lv.energy for c, lv in zip(counts, hw.levels))
    raw_w = sum(c.weights * lv.energy for c, lv in zip(counts, hw.levels))
    raw_of = sum(c.ofmap * lv.energy for c, lv in zip(counts, hw.levels))
    assert br.comp == dense_macs(s) * hw.mac_energy
    assert br.input_fmap == raw_if
    assert br.weights == raw_w
    assert br.output_fmap == raw_of


@pytest.mark.parametrize("bits", [2, 4, 8, 16])
def test_bitwidth_scaling_exact(bits):
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    base = layer_energy(s, LayerStats(), TWO_LEVEL)
    hw = TWO_LEVEL.with_bits(bits, bits)
    br = layer_energy(s, LayerStats(), hw)
    assert br.comp == base.comp * (bits / 16) ** 2  # multiplier scales quadratically
    assert br.input_fmap == base.input_fmap * (bits / 16)
    assert br.output_fmap == base.output_fmap * (bits / 16)
    assert br.weights == base.weights * (bits / 16)


def test_mixed_bitwidths():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    base = layer_energy(s, LayerStats(), TWO_LEVEL)
    hw = TWO_LEVEL.with_bits(8, 4)
    br = layer_energy(s, LayerStats(), hw)
    assert br.comp == base.comp * (8 * 4) / 256
    assert br.weights == base.weights * 0.5
    assert br.input_fmap == base.input_fmap * 0.25
    assert br.output_fmap == base.output_fmap * 0.25


def test_weight_compression_factor():
    # movement factor from the compression model: min(1, d * (1 + overhead))
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    base = layer_energy(s, LayerStats(), TWO_LEVEL)
    br = layer_energy(s, LayerStats(weight_density=0.5), TWO_LEVEL)
    factor = min(1.0, 0.5 * (1.0 + TWO_LEVEL.compression_overhead))
    assert factor == pytest.approx(0.55)
    assert br.weights == pytest.approx(base.weights * factor)
    assert br.input_fmap == base.input_fmap  # other datatypes untouched


def test_sparsity_monotonicity_grid():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    hw = default_profile()
    grid = np.linspace(0.0, 1.0, 10)
    totals = np.zeros((10, 10))
    for i, wd in enumerate(grid):
        for j, ad in enumerate(grid):
            totals[i, j] = layer_energy(
                s, LayerStats(weight_density=wd, input_act_density=ad), hw
            ).total
    assert np.all(np.diff(totals, axis=0) >= -1e-12)  # denser weights never cheaper
    assert np.all(np.diff(totals, axis=1) >= -1e-12)
    # output density monotone too
    outs = [
        layer_energy(s, LayerStats(output_act_density=d), hw).total for d in grid
    ]
    assert np.all(np.diff(outs) >= -1e-12)


# ---------------------------------------------------------------------------
# network energy


def test_network_energy_single_layer():
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    per_layer, total = network_energy([("l0", s, LayerStats())], TWO_LEVEL)
    assert len(per_layer) == 1
    direct = layer_energy(s, LayerStats(), TWO_LEVEL)
    assert per_layer[0] == direct
    assert total == direct


def test_network_energy_empty():
    per_layer, total = network_energy([], TWO_LEVEL)
    assert per_layer == [] and total.total == 0.0


def test_network_energy_additivity_exact():
    rng = np.random.default_rng(2)
    layers = []
    for i in range(4):
        s = random_small_shape(rng, max_bound=6)
        layers.append((f"l{i}", s, LayerStats(weight_density=float(rng.uniform(0.2, 1.0)))))
    per_layer, total = network_energy(layers, default_profile())
    assert total.comp == sum(b.comp for b in per_layer)
    assert total.input_fmap == sum(b.input_fmap for b in per_layer)
    assert total.output_fmap == sum(b.output_fmap for b in per_layer)
    assert total.weights == sum(b.weights for b in per_layer)
    assert total.total == total.comp + total.input_fmap + total.output_fmap + total.weights


def test_network_energy_names_infeasible_layer():
    hw = HardwareProfile(
        levels=(MemoryLevel("outer", 100.0, None), MemoryLevel("inner", 1.0, 2))
    )
    s = LayerShape(CONV, 6, 6, 2, 3, 3, 4)
    with pytest.raises(InfeasibleProfileError, match="bad_layer"):
        network_energy([("bad_layer", s, LayerStats())], hw)


def test_breakdown_rejects_negative():
    with pytest.raises(ConfigError):
        EnergyBreakdown(comp=-1.0)
