from dataclasses import replace

import numpy as np
import pytest

from deepfix.layers import FRESH, PRETRAINED, LBCConv
from deepfix.netdef import (DESK, FULL, VARIANTS, ArchiveError, ConfigError, NetworkConfig,
                            WeightArchive, build_network, canonical_variant, composed_receptive_field,
                            get_config, init_weights, load_weights, network_from_archive, output_hw,
                            receptive_field, save_weights)
from deepfix.ops import DimensionError


@pytest.fixture(scope="module")
def desk_net():
    net = build_network(DESK)
    init_weights(net, 0)
    return net


def test_desk_shape_law(desk_net):
    x = np.random.default_rng(0).random((1, 3, 48, 64))
    assert desk_net.forward(x).shape == (1, 1, 6, 8)
    assert desk_net.forward_full(x).shape == (1, 48, 64)


@pytest.mark.parametrize("h, w", [(48, 64), (8, 8), (480, 640), (24, 104)])
def test_symbolic_shape_law(h, w):
    for cfg in (DESK, FULL):
        assert output_hw(cfg, h, w) == (h // 8, w // 8)


def test_full_config_shape_law():
    net = build_network(FULL)
    init_weights(net, 0)
    out = net.forward(np.random.default_rng(1).random((1, 3, 48, 64)))
    assert out.shape == (1, 1, 6, 8)


def test_input_must_be_multiple_of_eight(desk_net):
    with pytest.raises(DimensionError):
        desk_net.forward(np.zeros((1, 3, 50, 64)))


def test_topology_counts():
    defs = DESK.layers()
    kinds = [d.kind for d in defs]
    assert kinds.count("conv") == 13
    assert kinds.count("pool") == 4
    assert kinds.count("inception") == 2
    assert kinds.count("lbc") == 2
    assert kinds.count("dropout") == 1
    assert kinds[-3:] == ["lbc", "dropout", "head"]
    assert kinds.index("lbc") > max(i for i, k in enumerate(kinds) if k == "inception")
    assert [d.pool[1] for d in defs if d.kind == "pool"] == [2, 2, 2, 1]
    assert [d.spec.hole for d in defs if d.name.startswith("conv5")] == [2, 2, 2]
    assert all(d.spec.hole == 6 and d.spec.kernel_h == 5 for d in defs if d.kind == "lbc")
    assert next(d for d in defs if d.kind == "dropout").rate == 0.5
    head = defs[-1]
    assert (head.spec.kernel_h, head.spec.out_channels) == (1, 1)


def test_block_convolution_counts():
    per_block = {}
    for d in DESK.layers():
        if d.kind == "conv":
            block = d.name.split("_")[0]
            per_block[block] = per_block.get(block, 0) + 1
    assert per_block == {"conv1": 2, "conv2": 2, "conv3": 3, "conv4": 3, "conv5": 3}


def test_full_widths():
    assert FULL.block_widths[:4] == (64, 128, 256, 512)
    assert DESK.block_widths[:4] == tuple(w // 8 for w in FULL.block_widths[:4])


def test_bad_block_layout_is_a_config_error():
    with pytest.raises(ConfigError):
        replace(DESK, block_convs=(2, 2, 3)).layers()
    with pytest.raises(ConfigError):
        get_config("huge")
    with pytest.raises(ConfigError):
        canonical_variant("df-magic")


def test_variant_names():
    assert canonical_variant("DF-LBC") == "lbc"
    assert canonical_variant("df-explicit-cb") == "explicit-cb"
    assert set(VARIANTS) == {"lbc", "no-lbc", "explicit-cb"}


def test_no_lbc_has_no_location_parameters():
    net = build_network(get_config("desk", "no-lbc"))
    assert not any("loc_weight" in p.name for p in net.params())
    lbc = build_network(DESK)
    assert sum("loc_weight" in p.name for p in lbc.params()) == 2


def test_learning_rate_groups(desk_net):
    for d, layer in zip(desk_net.defs, desk_net.layers):
        for p in layer.params():
            assert p.group == (PRETRAINED if d.kind == "conv" else FRESH), p.name


def test_variant_equivalence_with_zero_location_weights():
    lbc = build_network(DESK)
    init_weights(lbc, 3)
    plain = build_network(get_config("desk", "no-lbc"))
    params = plain.named_params()
    for name, p in lbc.named_params().items():
        if name.endswith("loc_weight"):
            p.data[...] = 0.0
        else:
            params[name].data[...] = p.data
    x = np.random.default_rng(2).random((2, 3, 48, 64))
    np.testing.assert_array_equal(lbc.forward(x), plain.forward(x))


def test_explicit_cb_adds_mean_map():
    plain = build_network(get_config("desk", "no-lbc"))
    init_weights(plain, 4)
    cb = build_network(get_config("desk", "explicit-cb"))
    load_weights(cb, save_weights(plain))
    mean_map = np.random.default_rng(3).random((48, 64))
    cb.mean_map = mean_map
    x = np.random.default_rng(4).random((1, 3, 48, 64))
    raw = plain.forward_full(x)[0] + mean_map
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(cb.predict(x)[0], expected, rtol=0, atol=1e-12)


def test_explicit_cb_without_mean_map():
    cb = build_network(get_config("desk", "explicit-cb"))
    with pytest.raises(ConfigError):
        cb.predict(np.zeros((1, 3, 48, 64)))


# --- initialisation --------------------------------------------------------

def test_paper_init_rules_in_full_config():
    assert (FULL.fresh_init, FULL.head_init) == (0.01, 10.0)


def test_head_std_statistics():
    cfg = replace(DESK, head_init=10.0)
    draws = []
    for seed in range(160):
        net = build_network(cfg)
        init_weights(net, seed)
        draws.append(net.layers[-1].weight.data.ravel())
    draws = np.concatenate(draws)
    assert draws.size >= 10**4
    assert abs(draws.std() - 10.0) < 0.5


def test_fixed_std_rule():
    cfg = replace(DESK, trunk_init=0.01, fresh_init=0.01)
    net = build_network(cfg)
    init_weights(net, 0)
    w = np.concatenate([p.data.ravel() for p in net.params() if p.name.endswith("weight")
                        and not p.name.startswith("head")])
    assert abs(w.std() - 0.01) < 0.0005


def test_he_rule_uses_combined_fan_in_for_lbc(desk_net):
    layer = next(l for l in desk_net.layers if isinstance(l, LBCConv))
    fan_in = (layer.spec.in_channels + 16) * 25
    both = np.concatenate([layer.weight.data.ravel(), layer.loc_weight.data.ravel()])
    assert abs(both.std() / np.sqrt(2.0 / fan_in) - 1) < 0.05


def test_biases_zero_and_seed_determinism(desk_net):
    assert all(not p.data.any() for p in desk_net.params() if p.name.endswith("bias"))
    other = build_network(DESK)
    init_weights(other, 0)
    for a, b in zip(desk_net.params(), other.params()):
        np.testing.assert_array_equal(a.data, b.data)
    init_weights(other, 1)
    assert not np.array_equal(desk_net.params()[0].data, other.params()[0].data)


# --- receptive fields ------------------------------------------------------

def test_single_layer_receptive_fields():
    defs = DESK.layers()
    conv5 = next(i for i, d in enumerate(defs) if d.name == "conv5_1")
    lbc = next(i for i, d in enumerate(defs) if d.kind == "lbc")
    first = next(i for i, d in enumerate(defs) if d.kind == "conv")
    assert receptive_field(DESK, conv5) == (5, 5)
    assert receptive_field(DESK, lbc) == (25, 25)
    assert receptive_field(DESK, first) == (3, 3)


def test_composed_receptive_field_first_block():
    extent, jump, start = composed_receptive_field(DESK, 2)
    assert (extent, jump, start) == (5, 1, -2)
    extent, jump, _ = composed_receptive_field(DESK, 3)
    assert (extent, jump) == (7, 2)


def test_perturbation_locality():
    """An input pixel outside a unit's composed window cannot affect that unit."""
    cfg = DESK
    net = build_network(cfg)
    init_weights(net, 5)
    upto = next(i for i, d in enumerate(cfg.layers()) if d.name == "pool3")
    extent, jump, start = composed_receptive_field(cfg, upto + 1)
    layers = net.layers[:upto + 1]

    def run(x):
        for layer in layers:
            x = layer.forward(x)
        return x

    rng = np.random.default_rng(6)
    x = rng.random((1, 3, 48, 64))
    base = run(x)
    for py, px in [(0, 0), (20, 31), (47, 63), (10, 50)]:
        bumped = x.copy()
        bumped[0, :, py, px] += 5.0
        changed = np.any(run(bumped) != base, axis=1)[0]
        for qy, qx in zip(*np.nonzero(changed)):
            assert start + qy * jump <= py < start + qy * jump + extent
            assert start + qx * jump <= px < start + qx * jump + extent


# --- archives --------------------------------------------------------------

def test_archive_round_trip_is_byte_identical(desk_net):
    data = save_weights(desk_net).to_bytes()
    net = network_from_archive(WeightArchive.from_bytes(data))
    assert save_weights(net).to_bytes() == data
    for a, b in zip(desk_net.params(), net.params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_archive_keeps_mean_map_and_float32():
    arc = WeightArchive({"a": np.arange(6, dtype=np.float32).reshape(2, 3),
                         "mean_map": np.linspace(0, 1, 12).reshape(3, 4)}, {"config": "desk"})
    back = WeightArchive.from_bytes(arc.to_bytes())
    assert back.arrays["a"].dtype == np.float32
    np.testing.assert_array_equal(back.arrays["mean_map"], arc.arrays["mean_map"])
    assert back.meta == {"config": "desk"}


def test_archive_magic(tmp_path):
    path = tmp_path / "w.dfx"
    WeightArchive({"x": np.zeros(2)}).save(path)
    assert path.read_bytes()[:4] == b"DFX1"
    with pytest.raises(ArchiveError, match="magic"):
        WeightArchive.from_bytes(b"XXXX" + path.read_bytes()[4:])


def test_truncated_archive_fails_checksum(desk_net):
    data = save_weights(desk_net).to_bytes()
    with pytest.raises(ArchiveError, match="checksum"):
        WeightArchive.from_bytes(data[:-100])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 1
    with pytest.raises(ArchiveError, match="checksum"):
        WeightArchive.from_bytes(bytes(flipped))


def test_wrong_shape_rejected_naming_layer(desk_net):
    arc = save_weights(desk_net)
    arc.arrays["lbc1.weight"] = np.zeros((3, 3))
    with pytest.raises(ArchiveError, match="lbc1.weight"):
        load_weights(build_network(DESK), arc)


def test_variant_mismatch_rejected(desk_net):
    with pytest.raises(ArchiveError, match="loc_weight"):
        load_weights(build_network(get_config("desk", "no-lbc")), save_weights(desk_net))


def test_network_config_is_frozen():
    with pytest.raises(Exception):
        DESK.lbc_hole = 3
    assert isinstance(DESK, NetworkConfig)
