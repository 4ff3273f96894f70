from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from droneset.arena import (
    Frame,
    ObjectSpec,
    generate_layout,
    object_geometry,
    object_vertices,
    reduced_yaw_degrees,
    render_object_view,
)
from droneset.capture import (
    NO_DEGRADATION,
    CaptureRecord,
    DegradationParams,
    NoObjectInView,
    blur_length,
    compute_bbox,
    degrade,
    image_plane_velocity,
    motion_kernel,
)
from droneset.vehicle import DronePose

from _oracles import pinhole_forward

EXPOSURE = 0.04


def _edge_image():
    img = np.zeros((360, 640, 3), np.uint8)
    img[:, 320:] = 250
    return img


def _edge_width(length: float) -> float:
    """Blur width measured as sqrt(12) times the std of the edge response derivative."""
    speed = length / (750.0 * EXPOSURE)
    out = degrade(Frame(_edge_image()), (0.0, -speed, 0.0), DegradationParams(750.0, 0, 0), EXPOSURE)
    d = np.diff(out.pixels[180, :, 0].astype(float))
    w = d / d.sum()
    x = np.arange(d.size)
    m = (w * x).sum()
    return math.sqrt(12 * (w * (x - m) ** 2).sum())


def test_identity_case_is_exact():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (360, 640, 3), dtype=np.uint8)
    f = Frame(img, 1, 2, 0.4, DronePose(0, 0, 1, 0.3))
    out = degrade(f, (0.4, -0.2, 0.1), NO_DEGRADATION, EXPOSURE)
    assert np.array_equal(out.pixels, img)
    assert out.pixels is not img
    out = degrade(f, (0.0, 0.0, 0.0), DegradationParams(750.0, 0.0, 0.0), EXPOSURE)
    assert np.array_equal(out.pixels, img)


def test_shape_dtype_and_metadata_kept():
    f = Frame(_edge_image(), 3, 7, 1.4, DronePose(0, 0, 1, 0))
    out = degrade(f, (0.1, 0.3, 0.0), DegradationParams(), EXPOSURE)
    assert out.pixels.shape == (360, 640, 3) and out.pixels.dtype == np.uint8
    assert (out.stop_index, out.frame_index, out.timestamp, out.pose) == (3, 7, 1.4, f.pose)


def test_blur_length_law():
    p = DegradationParams(750.0)
    assert blur_length(0.0, p, EXPOSURE) == 1.0
    assert blur_length(0.2, p, EXPOSURE) == pytest.approx(6.0)
    assert blur_length(0.4, p, EXPOSURE) == pytest.approx(12.0)


@pytest.mark.parametrize("length", [4.0, 8.0, 16.0, 32.0])
def test_measured_blur_doubles_with_speed(length):
    assert _edge_width(2 * length) / _edge_width(length) == pytest.approx(2.0, rel=0.10)


@settings(max_examples=60)
@given(st.floats(1.0, 40.0), st.floats(-math.pi, math.pi))
def test_kernel_properties(length, angle):
    k = motion_kernel(length, angle).astype(float)
    assert k.ndim == 2 and k.shape[0] == k.shape[1] and k.shape[0] % 2 == 1
    assert k.min() >= 0 and math.isclose(k.sum(), 1.0, rel_tol=1e-5)
    # point symmetric about the centre
    assert np.allclose(k, k[::-1, ::-1], atol=1e-5)
    c = k.shape[0] // 2
    ys, xs = np.mgrid[: k.shape[0], : k.shape[1]]
    assert abs((k * (xs - c)).sum()) < 1e-4 and abs((k * (ys - c)).sum()) < 1e-4
    # mass lies along the motion direction
    perp = (xs - c) * -math.sin(angle) + (ys - c) * math.cos(angle)
    assert (k * perp**2).sum() <= 0.5


def test_blur_follows_image_plane_motion():
    img = np.zeros((360, 640, 3), np.uint8)
    img[180, 320] = 255
    # drone yaw 0: body right is world -y, so vy < 0 moves the camera right
    out = degrade(Frame(img, pose=DronePose(0, 0, 1, 0.0)), (0.0, -0.3, 0.0),
                  DegradationParams(750.0, 0, 0), EXPOSURE).pixels[..., 0]
    assert out[180].sum() > 0.95 * out.sum()
    out = degrade(Frame(img, pose=DronePose(0, 0, 1, 0.0)), (0.0, 0.0, 0.3),
                  DegradationParams(750.0, 0, 0), EXPOSURE).pixels[..., 0]
    assert out[:, 320].sum() > 0.95 * out.sum()


def test_image_plane_velocity_ignores_forward_motion():
    assert image_plane_velocity((0.3, 0.0, 0.0), 0.0) == pytest.approx((0.0, 0.0))
    assert image_plane_velocity((0.0, -0.3, 0.0), 0.0) == pytest.approx((0.3, 0.0))
    assert image_plane_velocity((0.0, 0.0, 0.2), 1.0) == pytest.approx((0.0, -0.2))


def test_noise_statistics():
    img = np.full((360, 640, 3), 128, np.uint8)
    out = degrade(Frame(img, 0, 0), (0, 0, 0), DegradationParams(0.0, 0.0, 4.0, seed=2), EXPOSURE)
    resid = out.pixels.astype(float) - 128
    for ch in range(3):
        assert abs(resid[..., ch].std() / 4.0 - 1) < 0.03
        assert abs(resid[..., ch].mean()) < 0.05


def test_gain_scales_brightness():
    img = np.full((360, 640, 3), 100, np.uint8)
    means = [degrade(Frame(img, 0, i), (0, 0, 0), DegradationParams(0.0, 0.2, 0.0, seed=1),
                     EXPOSURE).pixels.mean() for i in range(200)]
    assert len(set(means)) > 1
    assert abs(np.std(means) / 100 - 0.2) < 0.05


def test_determinism_and_order_independence():
    p = DegradationParams(seed=5)
    rng = np.random.default_rng(3)
    base = rng.integers(0, 256, (360, 640, 3), dtype=np.uint8)
    keys = [(s, f) for s in range(3) for f in range(4)]
    vel = (0.05, 0.1, -0.02)
    forward = {k: degrade(Frame(base, *k), vel, p, EXPOSURE).pixels for k in keys}
    for k in reversed(keys):
        assert np.array_equal(degrade(Frame(base, *k), vel, p, EXPOSURE).pixels, forward[k])
    assert not np.array_equal(forward[(0, 0)], forward[(0, 1)])
    other = degrade(Frame(base, 0, 0), vel, DegradationParams(seed=6), EXPOSURE).pixels
    assert not np.array_equal(other, forward[(0, 0)])


def test_no_index_stream_differs_from_index_zero():
    p = DegradationParams(0.0, 0.0, 2.0, seed=0)
    base = np.full((360, 640, 3), 128, np.uint8)
    a = degrade(Frame(base), (0, 0, 0), p, EXPOSURE).pixels
    b = degrade(Frame(base, 0, 0), (0, 0, 0), p, EXPOSURE).pixels
    assert not np.array_equal(a, b)


def test_compute_bbox_examples():
    m = np.zeros((360, 640), np.uint8)
    m[10, 20] = 1
    assert compute_bbox(m) == (20, 10, 21, 11)
    m[100:150, 300:420] = 1
    assert compute_bbox(m) == (20, 10, 420, 150)
    full = np.ones((360, 640), np.uint8)
    assert compute_bbox(full) == (0, 0, 640, 360)
    with pytest.raises(NoObjectInView):
        compute_bbox(np.zeros((360, 640), np.uint8))


def test_capture_record_validates(layout8):
    f = Frame(np.zeros((360, 640, 3), np.uint8))
    pose = DronePose(0, 0, 1, 0)
    with pytest.raises(ValueError):
        CaptureRecord(f, (10, 10, 10, 20), 0, 0, pose, 0)
    with pytest.raises(ValueError):
        CaptureRecord(f, (0, 0, 10, 10), 0, 0, pose, 30)


def _projected_box(layout, obj, pose, placement):
    g = object_geometry(obj)
    base = np.array([*layout.platform_center, layout.platform_height])
    yaw = math.radians(reduced_yaw_degrees(placement, obj.symmetry_degrees))
    pts = np.concatenate([np.concatenate(rings) for rings in object_vertices(g, base, yaw)])
    u, v = pinhole_forward(pts, pose)
    # the frame clips the silhouette
    return (max(0, math.floor(u.min())), max(0, math.floor(v.min())),
            min(640, math.ceil(u.max())), min(360, math.ceil(v.max())))


@settings(max_examples=60)
@given(
    st.sampled_from([45, 90, 180, 360]),
    st.integers(0, 10_000),
    st.integers(0, 7),
    st.floats(0.85, 1.2),
    st.floats(-0.1, 0.1),
    st.integers(0, 359),
    st.floats(0.12, 0.26),
)
def test_bbox_matches_projected_extent(sym, seed, stop, z, dyaw, placement, size):
    lay = generate_layout(8, 1.5, 7)
    obj = ObjectSpec("x", "x0", symmetry_degrees=sym, appearance_seed=seed, footprint=(size, size))
    s = lay.stops[stop]
    pose = DronePose(*s.center, z, s.heading_direction + dyaw)
    _, mask = render_object_view(lay, obj, pose, placement_degrees=placement)
    bb = compute_bbox(mask)
    ref = _projected_box(lay, obj, pose, placement)
    assert max(abs(a - b) for a, b in zip(bb, ref)) <= 1, (bb, ref)


def test_bbox_independent_of_degradation(layout8, mug):
    from droneset.flightctl import run_mission

    a = run_mission(layout8, mug, seed=4, degradation=NO_DEGRADATION)
    b = run_mission(layout8, mug, seed=4, degradation=DegradationParams(3000.0, 0.3, 10.0, seed=9))
    assert [c.bbox for c in a.captures] == [c.bbox for c in b.captures]
    assert any(not ca.frame.same_pixels(cb.frame) for ca, cb in zip(a.captures, b.captures))
