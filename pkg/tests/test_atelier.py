import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from rmgn.atelier import (PALETTE, ClothSpec, Manifest, PersonSpec, bilinear_sample, body_geometry,
                          cloth_shape, generate_dataset, gt_warped_cloth, load_manifest,
                          oracle_teacher, render_cloth, render_cloth_array, render_person,
                          save_manifest, teacher_flow_pyramid)
from rmgn.tensors import ImageTensor

SIZE = (64, 48)


def _person(**kw):
    cloth = kw.pop("cloth", ClothSpec(seed=1, base_color=PALETTE["blue"], pattern="stripes"))
    return PersonSpec(seed=kw.pop("seed", 3), cloth=cloth, **kw)


def _affine_oracle(cloth: np.ndarray, affine: np.ndarray, ys, xs) -> np.ndarray:
    """Pull cloth pixels through the inverse of a 2x3 canonical->image affine."""
    full = np.vstack([affine, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(full)
    qx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    qy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return np.stack([map_coordinates(c, [qy, qx], order=1, mode="grid-constant", cval=0.0)
                     for c in cloth])


postures = st.tuples(st.floats(-60, 60), st.floats(-60, 60), st.floats(-15, 15),
                     st.floats(0.85, 1.15))


def test_render_is_deterministic():
    a = render_person(_person(arm_angles=(20, -10), torso_lean=5))
    b = render_person(_person(arm_angles=(20, -10), torso_lean=5))
    assert torch.equal(a.image.data, b.image.data)
    assert torch.equal(a.cloth_region, b.cloth_region)


def test_canonical_posture_is_axis_aligned():
    r = render_person(_person())
    region = r.cloth_region[0].numpy().astype(bool)
    assert np.array_equal(region, cloth_shape("short", SIZE))
    # torso rows are contiguous full-width runs
    rows = np.where(region.any(axis=1))[0]
    assert np.all(np.diff(rows) == 1)


def test_body_scale_area_ratio():
    small = render_person(_person(body_scale=1.0)).cloth_region.sum().item()
    large = render_person(_person(body_scale=1.2)).cloth_region.sum().item()
    assert large / small == pytest.approx(1.44, rel=0.05)


def test_solid_red_without_noise():
    spec = ClothSpec(seed=0, base_color=PALETTE["red"], pattern="solid", texture_noise=0.0)
    img = render_cloth_array(spec, SIZE)
    shape = cloth_shape("short", SIZE)
    red = np.asarray(PALETTE["red"])[:, None]
    assert np.array_equal(img[:, shape], np.broadcast_to(red, (3, shape.sum())))
    assert np.all(img[:, ~shape] == 0)


def test_logo_at_canonical_coordinates():
    plain = render_cloth_array(ClothSpec(seed=0, pattern="solid", texture_noise=0.0), SIZE)
    logo = render_cloth_array(ClothSpec(seed=0, pattern="logo_patch", texture_noise=0.0), SIZE)
    ys, xs = np.nonzero(np.any(plain != logo, axis=0))
    assert len(ys) > 0
    assert abs(xs.mean() - 0.5 * (SIZE[1] - 1)) < 1.0
    assert abs(ys.mean() - 0.42 * SIZE[0]) < 1.5


def test_seeds_change_texture_only():
    a = render_cloth_array(ClothSpec(seed=1, pattern="stripes"), SIZE)
    b = render_cloth_array(ClothSpec(seed=2, pattern="stripes"), SIZE)
    clean = render_cloth_array(ClothSpec(seed=1, pattern="stripes", texture_noise=0.0), SIZE)
    shape = cloth_shape("short", SIZE)
    assert np.all(a[:, ~shape] == b[:, ~shape])
    assert np.any(a[:, shape] != b[:, shape])
    # texture is a small perturbation of the shared style layer
    assert np.abs(a - clean).max() < 0.2 and np.abs(b - clean).max() < 0.2


def test_own_cloth_composite_is_identity():
    spec = _person(arm_angles=(35, -20), torso_lean=8, body_scale=1.1)
    r = render_person(spec)
    out = oracle_teacher(r.image, r.cloth_region, r.geometry, render_cloth(spec.cloth))
    assert torch.equal(out.data, r.image.data)


@settings(max_examples=15, deadline=None)
@given(postures, st.sampled_from(["short", "long"]))
def test_composite_matches_affine_oracle(p, sleeve):
    left, right, lean, scale = p
    spec = _person(arm_angles=(left, right), torso_lean=lean, body_scale=scale,
                   cloth=ClothSpec(seed=4, sleeve_length=sleeve))
    r = render_person(spec)
    new = ClothSpec(seed=9, base_color=PALETTE["green"], pattern="logo_patch", sleeve_length=sleeve)
    cloth = render_cloth_array(new, SIZE)
    out = oracle_teacher(r.image, r.cloth_region, r.geometry,
                         ImageTensor(torch.from_numpy(cloth))).data.numpy()
    person = r.image.data.numpy()
    region = r.cloth_region[0].numpy().astype(bool)
    assert np.array_equal(out[:, ~region], person[:, ~region])
    parts = r.geometry.part_index()
    ys, xs = np.mgrid[0:SIZE[0], 0:SIZE[1]].astype(float)
    for idx, affine in enumerate((r.geometry.torso, r.geometry.left, r.geometry.right)):
        sel = parts == idx
        if sel.any():
            expect = _affine_oracle(cloth, affine, ys[sel], xs[sel])
            assert np.abs(out[:, sel] - expect).max() < 1e-12


@settings(max_examples=10, deadline=None)
@given(postures)
def test_teacher_idempotent(p):
    left, right, lean, scale = p
    r = render_person(_person(arm_angles=(left, right), torso_lean=lean, body_scale=scale))
    cloth = render_cloth(ClothSpec(seed=2, base_color=PALETTE["yellow"]))
    once = oracle_teacher(r.image, r.cloth_region, r.geometry, cloth)
    twice = oracle_teacher(once, r.cloth_region, r.geometry, cloth)
    assert torch.equal(once.data, twice.data)


def test_teacher_rejects_mismatched_shapes():
    r = render_person(_person())
    small = render_cloth(ClothSpec(seed=0), (32, 24))
    with pytest.raises(ValueError):
        oracle_teacher(r.image, r.cloth_region, r.geometry, small)


def test_gt_warped_cloth():
    r = render_person(_person(arm_angles=(10, 40)))
    zero = gt_warped_cloth(r.image, torch.zeros(1, *SIZE))
    assert torch.all(zero.image == 0) and torch.all(zero.validity == 0)
    full = gt_warped_cloth(r.image, torch.ones(1, *SIZE))
    assert torch.equal(full.image, r.image.data)
    gt = gt_warped_cloth(r.image, r.cloth_region)
    assert gt.validity.sum() == r.cloth_region.sum()
    inside = r.cloth_region.expand(3, -1, -1) > 0
    assert torch.equal(gt.image[inside], r.image.data[inside])


def test_teacher_flow_reproduces_composite():
    spec = _person(arm_angles=(25, 10), torso_lean=-6)
    r = render_person(spec)
    flow = r.geometry.flow()
    ys, xs = np.mgrid[0:SIZE[0], 0:SIZE[1]].astype(float)
    cloth = render_cloth_array(spec.cloth, SIZE)
    pulled = bilinear_sample(cloth, xs + flow[0], ys + flow[1])
    region = r.cloth_region[0].numpy().astype(bool)
    assert np.abs(pulled[:, region] - r.image.data.numpy()[:, region]).max() < 1e-12


def test_flow_pyramid_shapes():
    _, _, geom = body_geometry(_person(), SIZE)
    pyr = teacher_flow_pyramid(geom, 4)
    assert [tuple(f.shape) for f in pyr] == [(2, 8, 6), (2, 16, 12), (2, 32, 24), (2, 64, 48)]
    # canonical posture has an exactly zero torso flow
    assert torch.all(pyr[-1] == 0)


def test_bilinear_sample_matches_scipy(rng):
    img = rng.normal(size=(2, 7, 5))
    xs = rng.uniform(-2, 6, 50)
    ys = rng.uniform(-2, 8, 50)
    ref = np.stack([map_coordinates(c, [ys, xs], order=1, mode="grid-constant") for c in img])
    assert np.abs(bilinear_sample(img, xs, ys) - ref).max() < 1e-12


def test_dataset_deterministic_and_varied(tmp_path):
    a = generate_dataset(8, 7)
    b = generate_dataset(8, 7)
    assert a.to_dict() == b.to_dict()
    assert len({e.person.posture for e in a.entries}) >= 2
    assert generate_dataset(8, 8).to_dict() != a.to_dict()
    save_manifest(a, tmp_path / "m.yaml")
    assert load_manifest(tmp_path / "m.yaml").to_dict() == a.to_dict()
    assert Manifest.from_dict(a.to_dict()) == a


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        generate_dataset(0, 1)


def test_spec_validation():
    with pytest.raises(ValueError):
        ClothSpec(seed=0, pattern="plaid")
    with pytest.raises(ValueError):
        _person(arm_angles=(100, 0))
    with pytest.raises(ValueError):
        _person(torso_lean=25)
    with pytest.raises(ValueError):
        _person(body_scale=1.3)
