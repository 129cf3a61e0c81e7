import numpy as np
import pytest

from octcodec.octave import (GoConv, GoConvFirst, GoTConv, GoTConvLast, MFTensor, OctConv, OctConvFirst, OctTConv,
                             OctTConvLast, split_channels)
from octcodec.tensor import Tensor, gradcheck, no_grad


def _mf(rng, split, h, w, n=1, grad=False):
    hf = Tensor(rng.normal(size=(n, split[0], h, w)), requires_grad=grad)
    lf = Tensor(rng.normal(size=(n, split[1], h // 2, w // 2)), requires_grad=grad)
    return MFTensor(hf, lf)


def _proj(rng, out):
    if isinstance(out, MFTensor):
        ph, pl = Tensor(rng.normal(size=out.hf.shape)), Tensor(rng.normal(size=out.lf.shape))
        return lambda o: (o.hf * ph).sum() + (o.lf * pl).sum()
    p = Tensor(rng.normal(size=out.shape))
    return lambda o: (o * p).sum()


def test_split_channels_at_full_width():
    assert split_channels(192, 0.5) == (96, 96)
    assert split_channels(192, 0.25) == (144, 48)
    assert split_channels(192, 0.75) == (48, 144)


def test_split_channels_rounds_half_up():
    assert split_channels(6, 0.25) == (4, 2)  # 1.5 -> 2


def test_split_channels_rejects_empty_band():
    with pytest.raises(ValueError, match="both must be"):
        split_channels(8, 0.0)
    assert split_channels(8, 0.0, allow_empty=True) == (8, 0)


def test_mftensor_requires_half_resolution_lf():
    with pytest.raises(ValueError, match="half"):
        MFTensor(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 2, 8, 8))))
    with pytest.raises(ValueError, match="even"):
        MFTensor(Tensor(np.zeros((1, 2, 7, 8))), Tensor(np.zeros((1, 2, 3, 4))))


def test_mftensor_alpha():
    t = MFTensor(Tensor(np.zeros((1, 6, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))
    assert t.alpha == 0.25 and t.split == (6, 2)


UNITS = {
    "goconv": lambda s: GoConv((3, 2), (2, 3), 3, 2, "gdn", rng=s),
    "goconv_actout": lambda s: GoConv((3, 2), (2, 3), 3, 2, "gdn", "outside", rng=s),
    "goconv_leaky_s1": lambda s: GoConv((3, 2), (2, 2), 3, 1, "leaky", rng=s),
    "goconv_nocross": lambda s: GoConv((3, 2), (2, 3), 3, 2, "leaky", cross=False, rng=s),
    "gotconv": lambda s: GoTConv((3, 2), (2, 3), 3, 2, "igdn", rng=s),
    "gotconv_actout": lambda s: GoTConv((3, 2), (2, 3), 3, 2, "igdn", "outside", rng=s),
    "octconv": lambda s: OctConv((3, 2), (2, 3), 3, 2, "gdn", rng=s),
    "octtconv": lambda s: OctTConv((3, 2), (2, 3), 3, 2, "igdn", rng=s),
}


@pytest.mark.parametrize("name", sorted(UNITS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unit_gradients(name, seed, f64):
    rng = np.random.default_rng(seed)
    unit = UNITS[name](seed).astype(np.float64)
    x = _mf(rng, (3, 2), 8, 8, grad=True)
    f = _proj(rng, unit(x))
    assert gradcheck(lambda: f(unit(x)), [x.hf, x.lf] + unit.parameters(), eps=1e-6, max_probes=24) < 1e-5


FIRST_LAST = {
    "goconv_first": lambda s: GoConvFirst(3, (2, 3), 5, 2, "gdn", rng=s),
    "octconv_first": lambda s: OctConvFirst(3, (2, 3), 5, 2, "gdn", rng=s),
    "gotconv_last": lambda s: GoTConvLast((2, 3), 3, 5, 2, "igdn", rng=s),
    "octtconv_last": lambda s: OctTConvLast((2, 3), 3, 5, 2, "igdn", rng=s),
}


@pytest.mark.parametrize("name", sorted(FIRST_LAST))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_first_last_unit_gradients(name, seed, f64):
    rng = np.random.default_rng(seed)
    unit = FIRST_LAST[name](seed).astype(np.float64)
    if name.endswith("first"):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
        leaves = [x]
    else:
        x = _mf(rng, (2, 3), 4, 4, grad=True)
        leaves = [x.hf, x.lf]
    f = _proj(rng, unit(x))
    assert gradcheck(lambda: f(unit(x)), leaves + unit.parameters(), eps=1e-6, max_probes=24) < 1e-5


def test_goconv_shapes_stride_two(rng):
    out = GoConv((4, 4), (6, 2), 5, 2, "gdn", rng=0)(_mf(rng, (4, 4), 16, 16))
    assert out.hf.shape == (1, 6, 8, 8) and out.lf.shape == (1, 2, 4, 4)


def test_gotconv_shapes_stride_two(rng):
    out = GoTConv((4, 4), (6, 2), 5, 2, "igdn", rng=0)(_mf(rng, (4, 4), 8, 8))
    assert out.hf.shape == (1, 6, 16, 16) and out.lf.shape == (1, 2, 8, 8)


def test_first_and_last_units_bridge_plain_images(rng):
    x = Tensor(rng.normal(size=(1, 3, 32, 32)))
    y = GoConvFirst(3, (4, 4), 5, 2, "gdn", rng=0)(x)
    assert y.hf.shape == (1, 4, 16, 16) and y.lf.shape == (1, 4, 8, 8)
    assert GoTConvLast((4, 4), 3, 5, 2, "igdn", rng=0)(y).shape == (1, 3, 32, 32)


@pytest.mark.parametrize("factory", [lambda: GoConv((3, 2), (2, 3), 3, 2, "leaky", rng=0),
                                     lambda: OctConv((3, 2), (2, 3), 3, 2, "leaky", rng=0)])
def test_bands_communicate(factory, rng):
    unit = factory()
    x = _mf(rng, (3, 2), 8, 8)
    base = unit(x)
    bumped = unit(MFTensor(x.hf, Tensor(x.lf.data + 1.0)))
    assert not np.allclose(bumped.hf.data, base.hf.data)
    bumped = unit(MFTensor(Tensor(x.hf.data + 1.0), x.lf))
    assert not np.allclose(bumped.lf.data, base.lf.data)


def test_without_cross_paths_bands_are_independent(rng):
    unit = GoConv((3, 2), (2, 3), 3, 2, "leaky", cross=False, rng=0)
    x = _mf(rng, (3, 2), 8, 8)
    base = unit(x)
    bumped = unit(MFTensor(x.hf, Tensor(x.lf.data + 1.0)))
    np.testing.assert_array_equal(bumped.hf.data, base.hf.data)
    assert not hasattr(unit, "f_h2l")


def test_activation_placement_keeps_convolution_parameters():
    def conv_params(unit):
        return sum(p.size for n, p in unit.named_parameters() if not n.startswith("act"))

    inner = GoConv((8, 8), (8, 8), 5, 2, "gdn", "internal", rng=0)
    outer = GoConv((8, 8), (8, 8), 5, 2, "gdn", "outside", rng=0)
    assert conv_params(inner) == conv_params(outer)

    def acts(unit):
        return {n.split(".")[0] for n, _ in unit.named_parameters() if n.startswith("act")}

    # two extra normalisation layers sit on the inter-band paths
    assert acts(inner) == {"act_hh", "act_ll", "act_l2h", "act_h2l"}
    assert acts(outer) == {"act_h", "act_l"}


def test_internal_and_outside_placements_differ(rng):
    x = _mf(rng, (3, 2), 8, 8)
    a = GoConv((3, 2), (2, 3), 3, 2, "leaky", "internal", rng=0)(x)
    b = GoConv((3, 2), (2, 3), 3, 2, "leaky", "outside", rng=0)(x)
    assert not np.allclose(a.hf.data, b.hf.data)


def test_unit_rejects_wrong_split(rng):
    with pytest.raises(ValueError, match="do not match"):
        GoConv((3, 2), (2, 3), 3, 2, rng=0)(_mf(rng, (2, 3), 8, 8))


def test_octconv_first_low_band_reads_pooled_image(rng):
    unit = OctConvFirst(3, (2, 2), 3, 1, "identity", rng=0)
    x = rng.normal(size=(1, 3, 8, 8))
    with no_grad():
        y = unit(Tensor(x))
        pooled = x.reshape(1, 3, 4, 2, 4, 2).mean(axis=(3, 5))
        np.testing.assert_allclose(y.lf.data, unit.f_h2l(Tensor(pooled)).data, rtol=1e-6)
