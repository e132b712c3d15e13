import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from instpifu.config import ABLATIONS, EncoderConfig, preset
from instpifu.features import (CropEncoder, FeatureMap, HourglassEncoder, PooledEncoder, ShapeError,
                               encode_global, extract_local_features, sample_feature)
from instpifu.geometry import Box2D, Camera, InstancePose
from instpifu.model import (ChannelFilter, InstPIFu, MaskHead, OccupancyDecoder, PoseError, channel_filter,
                            decode_occupancy, instpifu_forward, loss_object, one_hot, positional_encoding,
                            predict_mask, roi_align)
from oracles import gradient_check


def bilinear_oracle(fmap, image_size, px, py):
    """4-tap bilinear sample at a pixel position, border clamped, cell centers at (i+0.5)*stride."""
    C, H, W = fmap.shape
    s = image_size[0] / H
    gx = np.clip(px / s - 0.5, 0, W - 1)
    gy = np.clip(py / s - 0.5, 0, H - 1)
    x0, y0 = int(np.floor(gx)), int(np.floor(gy))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = gx - x0, gy - y0
    return ((1 - ax) * (1 - ay) * fmap[:, y0, x0] + ax * (1 - ay) * fmap[:, y0, x1]
            + (1 - ax) * ay * fmap[:, y1, x0] + ax * ay * fmap[:, y1, x1])


@pytest.fixture(scope="module")
def tiny_cfg():
    return preset("smoke").model


def test_encoder_shapes_and_determinism():
    torch.manual_seed(0)
    enc = HourglassEncoder(EncoderConfig(channels=16, stacks=2, stride=4, depth=2))
    img = np.random.default_rng(0).random((64, 64, 3))
    a = extract_local_features(enc, img)
    b = extract_local_features(enc, img)
    assert tuple(a.tensor.shape) == (1, 16, 16, 16)
    assert torch.equal(a.tensor, b.tensor)
    # fully convolutional: larger input, larger map
    assert tuple(extract_local_features(enc, np.zeros((32, 96, 3))).tensor.shape) == (1, 16, 8, 24)
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 3, 30, 32))


def test_paper_encoder_shape_arithmetic():
    cfg = preset("paper").model
    assert cfg.encoder.channels == 256 and preset("paper").data.image_size // cfg.encoder.stride == 64
    enc = HourglassEncoder(EncoderConfig(channels=8, stacks=1, stride=cfg.encoder.stride, depth=1))
    assert tuple(enc(torch.zeros(1, 3, 256, 256)).shape[-2:]) == (64, 64)


def test_translation_covariance():
    torch.manual_seed(1)
    enc = HourglassEncoder(EncoderConfig(channels=8, stacks=1, stride=4, depth=2)).double().eval()
    img = torch.rand(1, 3, 320, 320, dtype=torch.float64)
    shifted = torch.roll(img, shifts=4, dims=3)
    with torch.no_grad():
        a, b = enc(img), enc(shifted)
    m = 36  # the dilated receptive field spans about 34 cells
    assert (a[..., m:-m, m:-m - 1] - b[..., m:-m, m + 1:-m]).abs().max() < 1e-4


def test_sample_feature_oracles():
    rng = np.random.default_rng(0)
    t = torch.tensor(rng.normal(size=(1, 5, 8, 8)))
    fmap = FeatureMap(t, 4, (32, 32))
    np.testing.assert_allclose(sample_feature(fmap, [4 * 3 + 2, 4 * 5 + 2]).numpy(), t[0, :, 5, 3].numpy())
    mid = sample_feature(fmap, [4 * 3 + 4, 4 * 5 + 2]).numpy()
    np.testing.assert_allclose(mid, (t[0, :, 5, 3] + t[0, :, 5, 4]).numpy() / 2)
    for px, py in rng.uniform(-2, 34, (50, 2)):
        np.testing.assert_allclose(sample_feature(fmap, [px, py]).numpy(),
                                   bilinear_oracle(t[0].numpy(), (32, 32), px, py), atol=1e-9)


def test_global_encoders():
    torch.manual_seed(0)
    crop = CropEncoder(256)
    x = torch.rand(2, 3, 32, 32)
    g1, g2 = encode_global(crop, x), encode_global(crop, x.clone())
    assert g1.vector.shape[-1] == 256 and g1.provenance == "instance-crop"
    assert torch.equal(g1.vector, g2.vector)
    pooled = PooledEncoder(8, 16)
    g = encode_global(pooled, FeatureMap(torch.rand(1, 8, 4, 4), 4, (16, 16)))
    assert g.vector.shape == (1, 16) and g.provenance == "whole-image"
    with pytest.raises(ValueError):
        crop(torch.zeros(0, 3, 32, 32))


def test_global_encoder_gradcheck():
    torch.manual_seed(0)
    enc = CropEncoder(16, width=8).double()
    frac = gradient_check(lambda x: enc(x).sum(), torch.rand(1, 3, 16, 16, dtype=torch.float64))
    assert frac >= 0.95


def test_roi_align_identity_constant_and_oracle():
    rng = np.random.default_rng(3)
    t = torch.tensor(rng.normal(size=(1, 4, 8, 8)))
    full = roi_align(t, [Box2D(0, 0, 32, 32)], 8, (32, 32))
    assert (full - t).abs().max() < 1e-6
    const = roi_align(torch.full((1, 4, 8, 8), 2.5, dtype=torch.float64), [Box2D(3, 5, 17, 29)], 6, (32, 32))
    assert torch.all(const == 2.5)
    box = Box2D(3.3, 7.1, 25.6, 19.9)
    out = roi_align(t, [box], 5, (32, 32))[0].numpy()
    for i in range(5):
        for j in range(5):
            px = box.x_min + (j + 0.5) / 5 * box.width
            py = box.y_min + (i + 0.5) / 5 * box.height
            np.testing.assert_allclose(out[:, i, j], bilinear_oracle(t[0].numpy(), (32, 32), px, py), atol=1e-6)
    with pytest.raises(ValueError):
        roi_align(t, torch.tensor([[4.0, 4.0, 4.0, 9.0]]), 5, (32, 32))


def test_channel_filter_gates_and_gradcheck():
    torch.manual_seed(0)
    cf = ChannelFilter(8, 6, 16).double()
    local, glob = torch.randn(10, 8, dtype=torch.float64), torch.randn(1, 6, dtype=torch.float64)
    filtered, gate = channel_filter(cf, local, glob)
    assert torch.all((gate > 0) & (gate < 1))
    cf.force_gate = 1.0
    assert torch.equal(channel_filter(cf, local, glob)[0], local)
    cf.force_gate = 0.0
    assert torch.all(channel_filter(cf, local, glob)[0] == 0)
    cf.force_gate = None
    assert gradient_check(lambda x: (cf(x, glob)[0] ** 2).sum(), local) >= 0.95


def test_mask_head_range_and_locality():
    torch.manual_seed(0)
    head = MaskHead(8, 16)
    f = torch.randn(2, 8, 6, 6) * 5
    f[:, :, 1, 2] = f[:, :, 4, 4]
    m = predict_mask(head, f)
    assert m.shape == (2, 6, 6) and torch.all((m >= 0) & (m <= 1))
    assert torch.equal(m[:, 1, 2], m[:, 4, 4])


def test_positional_encoding_zero():
    np.testing.assert_array_equal(positional_encoding(torch.zeros(1))[0].numpy(), [0, 1, 0, 1, 0, 1, 0, 1, 0])


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=20))
def test_decoder_output_range(zs):
    torch.manual_seed(0)
    dec = OccupancyDecoder(8 + 4 + 9 + 3, 16, 5)
    z = torch.tensor(zs)
    out = decode_occupancy(dec, torch.randn(len(zs), 8) * 10, torch.randn(1, 4), z, torch.eye(3)[:1])
    assert out.shape == (len(zs),) and torch.all((out >= 0) & (out <= 1))


def test_decode_occupancy_gradcheck():
    torch.manual_seed(0)
    dec = OccupancyDecoder(6 + 4 + 9 + 3, 16, 5).double()
    glob, cat = torch.randn(1, 4, dtype=torch.float64), torch.eye(3, dtype=torch.float64)[:1]
    x = torch.randn(30, 7, dtype=torch.float64)  # 6 feature channels + z
    frac = gradient_check(lambda v: decode_occupancy(dec, v[:, :6], glob, v[:, 6], cat).sum(), x)
    assert frac >= 0.95


def test_loss_object_examples_and_scalar_loop():
    p = torch.rand(50, dtype=torch.float64)
    assert loss_object(p, p.clone())[0].item() == 0.0
    assert loss_object(torch.zeros(7), torch.ones(7))[0].item() == 1.0
    rng = np.random.default_rng(0)
    po, go = rng.random(40), rng.random(40)
    pm, gm = rng.random((3, 5, 5)), rng.random((3, 5, 5))
    total, comps = loss_object(torch.tensor(po), torch.tensor(go), torch.tensor(pm), torch.tensor(gm), 0.7)
    occ = sum((a - b) ** 2 for a, b in zip(po, go)) / 40
    msk = sum((a - b) ** 2 for a, b in zip(pm.ravel(), gm.ravel())) / 75
    assert abs(total.item() - (occ + 0.7 * msk)) < 1e-7
    with pytest.raises(ValueError):
        loss_object(torch.zeros(3), torch.zeros(4))


def _scene_inputs(cfg):
    cam = Camera.from_fov(64, 64, 60.0)
    pose = InstancePose([0.2, 0.1, 3.0], [0.5, 0.4, 0.5], 0.3, 1)
    box = Box2D(30, 28, 50, 48)
    img = np.random.default_rng(0).random((64, 64, 3))
    return cam, pose, box, img


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_instpifu_forward_contract(tiny_cfg, ablation):
    torch.manual_seed(0)
    model = InstPIFu(tiny_cfg, ablation)
    cam, pose, box, img = _scene_inputs(tiny_cfg)
    pts = np.random.default_rng(1).uniform(-1, 1, (100, 3))
    occ, behind = instpifu_forward(model, img, box, pose, cam, pts)
    assert occ.shape == (100,) and np.all((occ >= 0) & (occ <= 1)) and not behind.any()
    perm = np.random.default_rng(2).permutation(100)
    occ_p, _ = instpifu_forward(model, img, box, pose, cam, pts[perm])
    # float32 matmul blocking can differ by row order in the last ulp
    np.testing.assert_allclose(occ_p, occ[perm], atol=1e-6)


def test_instpifu_forward_behind_camera(tiny_cfg):
    model = InstPIFu(tiny_cfg, "full")
    cam, _, box, img = _scene_inputs(tiny_cfg)
    pose = InstancePose([0, 0, 0.5], [1, 1, 1], 0.0)
    occ, behind = instpifu_forward(model, img, box, pose, cam, np.array([[0, 0, -1.0], [0, 0, 0.2]]))
    assert behind[0] and occ[0] == 0 and not behind[1]
    with pytest.raises(PoseError):
        instpifu_forward(model, img, box, InstancePose([0, 0, -3], [1, 1, 1], 0.0), cam, np.zeros((4, 3)))


def test_ablation_parameter_lattice(tiny_cfg):
    names = {ab: {k for k in InstPIFu(tiny_cfg, ab).state_dict() if not k.startswith("decoder.")}
             for ab in ABLATIONS}
    assert names["baseline"] < names["c0"] < names["c1"] < names["full"]
    assert names["c0"] < names["c2"] < names["full"]


def test_eval_mode_bit_deterministic(tiny_cfg):
    torch.manual_seed(0)
    model = InstPIFu(tiny_cfg, "full")
    cam, pose, box, img = _scene_inputs(tiny_cfg)
    pts = np.random.default_rng(1).uniform(-1, 1, (64, 3))
    a, _ = instpifu_forward(model, img, box, pose, cam, pts)
    b, _ = instpifu_forward(model, img, box, pose, cam, pts)
    np.testing.assert_array_equal(a, b)


def test_one_hot():
    v = one_hot(2, 9)
    assert v.sum() == 1 and v[2] == 1
