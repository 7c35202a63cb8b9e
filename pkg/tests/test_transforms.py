import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import bilinear_point, central_diff, rel_err
from smda.autodiff import Tensor, grad_of
from smda.config import ConfigError
from smda.saliency import SaliencyMap
from smda.transforms import (
    COMBINED,
    IDENTITY,
    ColorJitter,
    Compose,
    Contrast,
    CutMix,
    CutOut,
    HFlip,
    MixUp,
    Rescale,
    Rotate,
    VFlip,
    apply_image,
    apply_map,
    bilinear_sample,
    compose_expected_map,
    forward_validity,
    invert_on_map,
    label_weights,
    sample_spec,
    spec_from_dict,
    spec_to_dict,
    validate_augment,
)


def radial(shape=(32, 32)):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (h * w)
    return np.exp(-4 * r2)


def masked_mse(a, b, mask):
    return float((((a - b) * mask) ** 2).sum() / mask.sum())


# -- bilinear sampling --------------------------------------------------------------


def test_bilinear_integer_coords_gather(rng):
    src = rng.standard_normal((5, 6))
    rows = rng.integers(0, 5, (3, 4)).astype(float)
    cols = rng.integers(0, 6, (3, 4)).astype(float)
    out, valid = bilinear_sample(src, rows, cols)
    np.testing.assert_array_equal(out.data, src[rows.astype(int), cols.astype(int)])
    assert valid.all()


def test_bilinear_midpoints_on_ramp():
    src = np.add.outer(np.arange(4.0) * 3, np.arange(5.0))
    rows, cols = np.mgrid[0:3, 0:4] + 0.5
    out, _ = bilinear_sample(src, rows, cols)
    np.testing.assert_allclose(out.data, 3 * rows + cols, rtol=0, atol=1e-14)


def test_bilinear_out_of_frame_is_zero_and_invalid():
    src = np.ones((4, 4))
    rows = np.array([[-0.5, 0.0, 3.0, 3.2]])
    cols = np.array([[1.0, -1e-3, 3.0, 0.0]])
    out, valid = bilinear_sample(src, rows, cols)
    np.testing.assert_array_equal(valid, [[0, 0, 1, 0]])
    np.testing.assert_array_equal(out.data, [[0, 0, 1, 0]])


def test_bilinear_matches_pointwise_oracle(rng):
    src = rng.standard_normal((7, 9))
    rows = rng.uniform(-1, 7, (5, 5))
    cols = rng.uniform(-1, 9, (5, 5))
    out, _ = bilinear_sample(src, rows, cols)
    expected = np.vectorize(lambda r, c: bilinear_point(src, r, c))(rows, cols)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-14)


def test_bilinear_gradient_matches_finite_differences(rng):
    src = rng.standard_normal((6, 6))
    rows, cols = (c.T for c in np.meshgrid(np.linspace(0.2, 5.3, 6), np.linspace(-0.4, 4.9, 6)))
    direction = rng.standard_normal((6, 6))
    t = Tensor(src, requires_grad=True)
    out, _ = bilinear_sample(t, rows, cols)
    g = grad_of((out * Tensor(direction)).sum(), t).data
    fd = central_diff(lambda v: float((bilinear_sample(v, rows, cols)[0].data * direction).sum()), src)
    assert rel_err(g, fd) < 1e-6


def test_bilinear_rejects_nonfinite_coords():
    with pytest.raises(ValueError):
        bilinear_sample(np.zeros((3, 3)), np.array([[np.nan]]), np.array([[0.0]]))


# -- apply_image ---------------------------------------------------------------------


def test_hflip_example():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(apply_image(HFlip(), img)[0], [[2.0, 1.0], [4.0, 3.0]])
    np.testing.assert_array_equal(apply_image(VFlip(), img)[0], [[3.0, 4.0], [1.0, 2.0]])


def test_rotate_zero_is_identity(rng):
    img = rng.uniform(size=(3, 9, 7))
    assert apply_image(Rotate(0.0), img).tobytes() == img.tobytes()
    assert apply_image(Rescale(1.0), img).tobytes() == img.tobytes()


def test_rotate_positive_is_counter_clockwise():
    img = np.zeros((1, 5, 5))
    img[0, 2, 4] = 1.0  # right of centre
    out = apply_image(Rotate(90.0), img)[0]
    assert out[0, 2] == pytest.approx(1.0) and out.sum() == pytest.approx(1.0)


def test_rescale_magnifies_about_centre():
    img = np.zeros((1, 9, 9))
    img[0, 4, 4] = 1.0
    img[0, 4, 6] = 1.0
    out = apply_image(Rescale(2.0), img)[0]
    assert out[4, 4] == 1.0 and out[4, 8] == 1.0


def test_mixup_examples(rng):
    a, b = rng.uniform(size=(2, 3, 4, 4))
    np.testing.assert_allclose(apply_image(MixUp(0.5, 0), a, [a]), a, rtol=1e-15)
    assert apply_image(MixUp(1.0, 0), a, [b]).tobytes() == a.tobytes()
    np.testing.assert_allclose(apply_image(MixUp(0.25, 0), a, [b]), 0.25 * a + 0.75 * b, rtol=1e-15)


def test_cutmix_and_cutout_examples(rng):
    a, b = rng.uniform(size=(2, 3, 6, 6))
    np.testing.assert_array_equal(apply_image(CutMix((0, 0, 6, 6), 0), a, [b]), b)
    out = apply_image(CutOut((1, 2, 3, 2)), a)
    mask = np.zeros((6, 6), bool)
    mask[1:4, 2:4] = True
    assert not out[:, mask].any()
    np.testing.assert_array_equal(out[:, ~mask], a[:, ~mask])


def test_apply_image_errors(rng):
    a = rng.uniform(size=(3, 4, 4))
    with pytest.raises(ValueError, match="partner"):
        apply_image(MixUp(0.5, 0), a)
    with pytest.raises(ValueError, match="partner"):
        apply_image(CutMix((0, 0, 2, 2), 3), a, [a])
    with pytest.raises(ValueError, match="out of bounds"):
        apply_image(CutOut((3, 3, 2, 2)), a)
    with pytest.raises(ValueError):
        apply_image(MixUp(1.5, 0), a, [a])


def test_color_jitter_zero_is_identity_and_clamps(rng):
    img = rng.uniform(size=(3, 5, 5))
    np.testing.assert_allclose(apply_image(ColorJitter(0, 0, 0), img), img, rtol=0, atol=1e-15)
    out = apply_image(ColorJitter(0.9, 0.5, 0.5), img)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(apply_image(ColorJitter(0.5, 0, 0), img * 0.5), np.clip(img * 0.75, 0, 1), rtol=0, atol=1e-15)


def test_apply_image_is_pure(rng):
    img = rng.uniform(size=(3, 8, 8))
    before = img.copy()
    apply_image(Compose((HFlip(), Rotate(5.0), Contrast(), CutOut((0, 0, 2, 2)))), img)
    assert img.tobytes() == before.tobytes()


# -- inversion on maps ------------------------------------------------------------------


@pytest.mark.parametrize("spec", [HFlip(), VFlip(), Compose((HFlip(), VFlip()))])
def test_flip_involution(rng, spec):
    m = SaliencyMap(rng.uniform(size=(6, 5)))
    once = apply_map(spec, m)
    back, mask = invert_on_map(spec, once)
    assert back.numpy().tobytes() == m.numpy().tobytes() and mask.all()
    twice = apply_map(spec, once)
    assert twice.numpy().tobytes() == m.numpy().tobytes()


def test_rotate_round_trip():
    m = SaliencyMap(radial())
    spec = Rotate(7.0)
    back, mask = invert_on_map(spec, apply_map(spec, m))
    assert mask.sum() > 0.7 * mask.size
    assert masked_mse(back.numpy(), m.numpy(), mask) < 1e-3


def _rescale_mask_oracle(shape, zoom):
    """Pixels of the original frame whose zoomed position lands inside the frame."""
    h, w = shape
    out = np.zeros(shape)
    for i in range(h):
        for j in range(w):
            r = (h - 1) / 2 + (i - (h - 1) / 2) * zoom
            c = (w - 1) / 2 + (j - (w - 1) / 2) * zoom
            out[i, j] = float(0 <= r <= h - 1 and 0 <= c <= w - 1)
    return out


@pytest.mark.parametrize("shape", [(32, 32), (40, 24)])
def test_rescale_inverse_mask_is_centred_region(shape):
    _, mask = invert_on_map(Rescale(1.1), SaliencyMap(np.ones(shape)))
    np.testing.assert_array_equal(mask, _rescale_mask_oracle(shape, 1.1))
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    assert abs(len(rows) - shape[0] / 1.1) <= 2 and abs(len(cols) - shape[1] / 1.1) <= 2
    assert rows[0] == shape[0] - 1 - rows[-1] and cols[0] == shape[1] - 1 - cols[-1]


def test_rotation_mask_drops_corners():
    _, mask = invert_on_map(Rotate(10.0), SaliencyMap(np.ones((32, 32))))
    assert mask[0, 0] == 0 and mask[-1, -1] == 0 and mask[16, 16] == 1


def test_photometric_and_cutout_inverse():
    m = SaliencyMap(radial((8, 8)))
    back, mask = invert_on_map(Compose((Contrast(), ColorJitter(0.1, 0, 0))), m)
    assert back.numpy().tobytes() == m.numpy().tobytes() and mask.all()
    _, mask = invert_on_map(CutOut((2, 2, 3, 3)), m)
    assert mask.sum() == 64 - 9 and not mask[2:5, 2:5].any()


def test_invert_rejects_multi_image():
    with pytest.raises(ValueError):
        invert_on_map(Compose((HFlip(), MixUp(0.3, 1))), SaliencyMap(np.ones((4, 4))))


def test_inverse_is_differentiable(rng):
    v = Tensor(rng.uniform(size=(8, 8)), requires_grad=True)
    back, mask = invert_on_map(Compose((Rotate(5.0), HFlip())), SaliencyMap(v))
    g = grad_of((back.values * Tensor(mask)).sum(), v)
    assert g.shape == (8, 8) and g.data.any()


geometric_specs = st.lists(
    st.one_of(
        st.just(HFlip()),
        st.just(VFlip()),
        st.floats(-10, 10).map(Rotate),
        st.floats(1.0, 1.1).map(Rescale),
    ),
    max_size=4,
).map(lambda s: Compose(tuple(s)))


@settings(max_examples=40, deadline=None)
@given(spec=geometric_specs)
def test_round_trip_property(spec):
    m = SaliencyMap(radial())
    back, mask = invert_on_map(spec, apply_map(spec, m))
    if mask.any():
        assert masked_mse(back.numpy(), m.numpy(), mask) < 1e-3


@settings(max_examples=40, deadline=None)
@given(spec=geometric_specs)
def test_mask_soundness(spec):
    """A valid pixel's full bilinear support stays inside the frame through the chain:
    round-tripping an all-ones map (zeros enter only from outside the frame) must give 1."""
    shape = (20, 20)
    ones = SaliencyMap(np.ones(shape))
    back, mask = invert_on_map(spec, apply_map(spec, ones))
    assert (back.numpy()[mask == 1] > 1 - 1e-12).all()
    assert set(np.unique(mask)) <= {0.0, 1.0}


@settings(max_examples=25, deadline=None)
@given(spec=geometric_specs)
def test_forward_validity_matches_image_support(spec):
    ones = np.ones((1, 20, 20))
    out = apply_image(spec, ones)[0]
    valid = forward_validity(spec, (20, 20))
    assert (out[valid == 1] > 1 - 1e-12).all()


# -- expected maps ------------------------------------------------------------------------


def test_compose_examples(rng):
    a, b = (SaliencyMap(rng.uniform(size=(6, 6))) for _ in range(2))
    m, mask = compose_expected_map(MixUp(1.0, 0), a, [b])
    np.testing.assert_array_equal(m.numpy(), a.numpy())
    assert mask.all()
    m, _ = compose_expected_map(CutMix((0, 0, 6, 6), 0), a, [b])
    np.testing.assert_array_equal(m.numpy(), b.numpy())
    m, _ = compose_expected_map(CutOut((1, 1, 2, 3)), a)
    assert not m.numpy()[1:3, 1:4].any()
    np.testing.assert_array_equal(m.numpy()[0], a.numpy()[0])


def test_compose_arity_mismatch():
    a = SaliencyMap(np.ones((4, 4)))
    with pytest.raises(ValueError, match="arity"):
        compose_expected_map(MixUp(0.5, 0), a)
    with pytest.raises(ValueError, match="arity"):
        compose_expected_map(CutMix((0, 0, 1, 1), 2), a, [a])


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(0, 1), s=st.floats(-3, 3), t=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_mixup_composition_is_linear(lam, s, t, seed):
    rng = np.random.default_rng(seed)
    a1, a2, b1, b2 = rng.standard_normal((4, 5, 5))
    spec = Compose((HFlip(), MixUp(lam, 0)))

    def comp(a, b):
        return compose_expected_map(spec, SaliencyMap(a), [SaliencyMap(b)])[0].numpy()

    lhs = comp(s * a1 + t * a2, s * b1 + t * b2)
    rhs = s * comp(a1, b1) + t * comp(a2, b2)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_label_weights():
    np.testing.assert_allclose(label_weights(MixUp(0.3, 0), 1, [2], 4, (8, 8)), [0, 0.3, 0.7, 0])
    np.testing.assert_allclose(label_weights(CutMix((0, 0, 4, 4), 0), 1, [3], 4, (8, 8)), [0, 0.75, 0, 0.25])
    np.testing.assert_array_equal(label_weights(HFlip(), 2, [], 3, (8, 8)), [0, 0, 1])


@pytest.mark.parametrize(
    "spec",
    [IDENTITY, Compose((HFlip(), Rotate(3.5), Rescale(1.04), Contrast((4, 4), 1.5), CutOut((1, 2, 3, 4)), MixUp(0.2, 3), CutMix((0, 0, 2, 2), 1)))],
)
def test_spec_dict_roundtrip(spec):
    assert spec_from_dict(spec_to_dict(spec)) == spec


# -- sampling --------------------------------------------------------------------------------


def test_sample_all_zero_probability_is_identity():
    cfg = {k: dict(v, p=0.0) for k, v in COMBINED.items()}
    assert sample_spec(cfg, 0) == Compose(())
    assert sample_spec({}, 0) == IDENTITY


def test_sample_deterministic():
    assert sample_spec(COMBINED, (3, 1, 7)) == sample_spec(COMBINED, (3, 1, 7))
    assert len({sample_spec(COMBINED, s) for s in range(50)}) > 10


def test_vflip_frequency():
    n = 10_000
    hits = sum(bool(sample_spec({"vflip": {"p": 0.5}}, s).specs) for s in range(n))
    assert 0.48 <= hits / n <= 0.52


def test_sample_ranges_and_order():
    rank = {HFlip: 0, VFlip: 1, Rotate: 2, Rescale: 3, Contrast: 4, ColorJitter: 5, CutOut: 6, MixUp: 7, CutMix: 8}
    cfg = dict(COMBINED, color_jitter={"p": 0.5}, cutout={"p": 0.5}, mixup={"p": 0.5}, cutmix={"p": 0.5})
    for s in range(300):
        spec = sample_spec(cfg, s, shape=(16, 12), num_partners=4, self_index=2)
        kinds = [rank[type(x)] for x in spec.specs]
        assert kinds == sorted(kinds)
        for x in spec.specs:
            if isinstance(x, Rotate):
                assert -10 <= x.angle <= 10
            elif isinstance(x, Rescale):
                assert 1.0 <= x.zoom <= 1.1
            elif isinstance(x, MixUp):
                assert 0 <= x.lam <= 1 and x.partner != 2
            if isinstance(x, (CutOut, CutMix)):
                t, l, h, w = x.rect
                assert 0 <= t and 0 <= l and t + h <= 16 and l + w <= 12


def test_sample_rotation_uniform_mean():
    angles = [x.angle for s in range(4000) for x in sample_spec({"rotate": {"p": 1.0}}, s).specs]
    assert len(angles) == 4000
    # uniform on [-10, 10]: sd of the mean is 10/sqrt(3)/sqrt(n)
    assert abs(np.mean(angles)) < 4 * 10 / math.sqrt(3) / math.sqrt(4000)


@pytest.mark.parametrize(
    "cfg,match",
    [
        ({"spin": {}}, "spin"),
        ({"vflip": {"p": 1.5}}, "vflip"),
        ({"rotate": {"degrees": [10, -10]}}, "lower bound"),
        ({"mixup": {"lam": [0.2, 1.4]}}, "mixup"),
    ],
)
def test_schema_errors(cfg, match):
    with pytest.raises((ConfigError, ValueError), match=match):
        validate_augment(cfg)


def test_multi_image_needs_partners():
    with pytest.raises(ValueError):
        sample_spec({"mixup": {"p": 1.0}}, 0)
