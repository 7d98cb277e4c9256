import numpy as np
import pytest
import torch
from PIL import Image

from rmgn.tensors import (FakeTriplet, FlowField, ImageDecodeError, ImageTensor, LossWeights,
                          RegionalMask, check_resolution, load_flow, load_image, load_mask,
                          save_flow, save_image, save_mask)


def _png(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def test_black_and_white_endpoints(tmp_path):
    black = load_image(_png(tmp_path / "b.png", np.zeros((4, 4, 3), np.uint8)))
    white = load_image(_png(tmp_path / "w.png", np.full((4, 4, 3), 255, np.uint8)))
    assert black.shape == (3, 4, 4)
    assert torch.all(black.data == -1.0)
    assert torch.all(white.data == 1.0)


def test_mid_value_follows_linear_map(tmp_path):
    img = load_image(_png(tmp_path / "g.png", np.full((4, 4), 128, np.uint8)))
    assert img.channels == 1
    assert img.data[0, 0, 0].item() == pytest.approx(2 * 128 / 255 - 1, abs=1e-15)
    assert img.data[0, 0, 0].item() == pytest.approx(0.00392, abs=1e-5)


def test_channel_major_layout(tmp_path):
    arr = np.zeros((2, 3, 3), np.uint8)
    arr[..., 1] = 255
    img = load_image(_png(tmp_path / "c.png", arr))
    assert torch.all(img.data[0] == -1) and torch.all(img.data[1] == 1)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_sixteen_bit_rejected(tmp_path):
    path = tmp_path / "deep.png"
    Image.fromarray(np.full((4, 4), 4000, np.uint16)).save(path)
    with pytest.raises(ImageDecodeError):
        load_image(path)


def test_round_trip_within_quantisation(tmp_path, rng):
    t = ImageTensor(torch.from_numpy(rng.uniform(-1, 1, (3, 8, 6))))
    save_image(t, tmp_path / "t.png")
    back = load_image(tmp_path / "t.png")
    assert (back.data - t.data).abs().max() <= 1 / 255 + 1e-12


def test_round_trip_idempotent(tmp_path, rng):
    t = ImageTensor(torch.from_numpy(rng.uniform(-1, 1, (3, 8, 6))))
    save_image(t, tmp_path / "a.png")
    first = load_image(tmp_path / "a.png")
    save_image(first, tmp_path / "b.png")
    second = load_image(tmp_path / "b.png")
    assert torch.equal(first.data, second.data)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_zero_saves_mid_gray(tmp_path):
    save_image(ImageTensor(torch.zeros(3, 2, 2)), tmp_path / "z.png")
    arr = np.asarray(Image.open(tmp_path / "z.png"))
    assert set(np.unique(arr)) <= {127, 128}


def test_out_of_range_rejected(tmp_path):
    t = torch.zeros(3, 2, 2)
    t[0, 0, 0] = 1.5
    with pytest.raises(ValueError):
        save_image(t, tmp_path / "x.png")
    with pytest.raises(ValueError):
        ImageTensor(t)


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_constructors_reject_non_finite(bad):
    t = torch.zeros(3, 2, 2)
    t[0, 0, 0] = bad
    with pytest.raises(ValueError):
        ImageTensor(t)
    f = torch.zeros(2, 2, 2)
    f[1, 1, 1] = bad
    with pytest.raises(ValueError):
        FlowField(f)
    m = torch.full((1, 2, 2), 0.5)
    m[0, 0, 0] = bad
    with pytest.raises(ValueError):
        RegionalMask(m)


def test_shape_contracts():
    with pytest.raises(ValueError):
        ImageTensor(torch.zeros(2, 4, 4))
    with pytest.raises(ValueError):
        FlowField(torch.zeros(3, 4, 4))
    with pytest.raises(ValueError):
        RegionalMask(torch.zeros(1, 2, 2))  # 0 is not strictly inside (0, 1)
    check_resolution(64, 48, 4)
    with pytest.raises(ValueError):
        check_resolution(64, 44, 4)


def test_fake_triplet_checks():
    im = ImageTensor(torch.zeros(3, 4, 4))
    mask = torch.zeros(1, 4, 4)
    mask[0, 1:3, 1:3] = 1
    FakeTriplet(im, im, im, mask)
    with pytest.raises(ValueError):
        FakeTriplet(im, ImageTensor(torch.zeros(3, 4, 2)), im, mask)
    with pytest.raises(ValueError):
        FakeTriplet(im, im, im, mask * 0.5)


def test_loss_weights_nonnegative():
    assert LossWeights().as_dict() == {"lambda_f": 1.0, "lambda_sec": 0.01,
                                       "lambda_d": 0.25, "lambda_p": 0.2}
    with pytest.raises(ValueError):
        LossWeights(lambda_d=-0.1)


def test_mask_png_round_trip(tmp_path, rng):
    m = torch.from_numpy(rng.uniform(0.01, 0.99, (1, 5, 4)))
    save_mask(RegionalMask(m), tmp_path / "m.png")
    assert Image.open(tmp_path / "m.png").mode == "L"
    back = load_mask(tmp_path / "m.png")
    assert (back - m).abs().max() <= 1 / 255


def test_mask_png_endpoints(tmp_path):
    m = torch.tensor([[[0.0, 1.0]]])
    save_mask(m, tmp_path / "e.png")
    assert np.asarray(Image.open(tmp_path / "e.png")).tolist() == [[0, 255]]


def test_flow_file_layout(tmp_path, rng):
    flow = FlowField(torch.from_numpy(rng.normal(size=(2, 3, 5)).astype(np.float32)), 2)
    save_flow(flow, tmp_path / "f.flo")
    raw = (tmp_path / "f.flo").read_bytes()
    assert len(raw) == 16 + 2 * 3 * 5 * 4
    assert raw[:8] == b"RMGNFLO\x00"
    back = load_flow(tmp_path / "f.flo")
    assert torch.equal(back.offsets, flow.offsets)
    (tmp_path / "bad.flo").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_flow(tmp_path / "bad.flo")
