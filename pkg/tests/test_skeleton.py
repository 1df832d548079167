import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alcagcn.skeleton import (
    DegenerateFacingWarning,
    ExtraBodiesWarning,
    SkeletonParseError,
    SkeletonSequence,
    format_ntu_skeleton,
    frontal_align,
    label_from_filename,
    normalize_length,
    parse_ntu_skeleton,
    read_skeleton_file,
    vertical_rotation,
)
from alcagcn.synthetic import REST_POSE
from alcagcn.tensor import ContractError

ZERO_JOINT = "0 0 0 0 0 0 0 0 0 0 0 2"
BODY_INFO = "{} 0 1 1 0 0 0 0.1 0.2 2"


def body(body_id, joints=None):
    rows = [ZERO_JOINT] * 25 if joints is None else [f"{x} {y} {z} 0 0 0 0 0 0 0 0 2" for x, y, z in joints]
    return [BODY_INFO.format(body_id), str(len(rows)), *rows]


def fixture_text(frames):
    lines = [str(len(frames))]
    for bodies in frames:
        lines.append(str(len(bodies)))
        for b in bodies:
            lines.extend(b)
    return "\n".join(lines) + "\n"


def pose_sequence(t=4, label=3, seed=0, noise=0.02):
    rng = np.random.default_rng(seed)
    data = np.zeros((3, t, 25, 2))
    data[..., 0] = REST_POSE.T[:, None, :] + noise * rng.normal(size=(3, t, 25))
    return SkeletonSequence(data, label, np.array([True, False]))


def rotate(seq, angle):
    return seq.copy(data=np.einsum("ij,jtum->itum", vertical_rotation(angle), seq.data.astype(np.float64)))


def test_zero_fixture_shape_and_mask():
    seq = parse_ntu_skeleton(fixture_text([[body(1)], [body(1)]]))
    assert seq.data.shape == (3, 2, 25, 2)
    assert not seq.data[..., 1].any()
    assert seq.performer_mask.tolist() == [True, False]


def test_three_bodies_keeps_two_with_warning():
    text = fixture_text([[body(1), body(2), body(3)], [body(1), body(3)]])
    with pytest.warns(ExtraBodiesWarning):
        seq = parse_ntu_skeleton(text)
    assert seq.performer_mask.tolist() == [True, True]


def test_missing_joint_line_names_frame():
    frames = [[body(1)], [body(1)]]
    frames[1][0] = frames[1][0][:-1]  # frame 1 loses its last joint line
    with pytest.raises(SkeletonParseError, match="frame 1") as err:
        parse_ntu_skeleton(fixture_text(frames))
    assert err.value.lineno is not None


def test_wrong_joint_count_and_non_numeric():
    text = fixture_text([[body(1)]]).replace("\n25\n", "\n24\n", 1)
    with pytest.raises(SkeletonParseError, match="expected 25 joints"):
        parse_ntu_skeleton(text)
    text = fixture_text([[body(1)]]).replace(ZERO_JOINT, "0 x 0" + ZERO_JOINT[5:], 1)
    with pytest.raises(SkeletonParseError, match="non-numeric") as err:
        parse_ntu_skeleton(text)
    assert err.value.lineno == 5  # count, bodies, info, joints, first joint


def test_truncated_file():
    with pytest.raises(SkeletonParseError):
        parse_ntu_skeleton("3\n1\n")


def test_label_from_filename(tmp_path):
    assert label_from_filename("S001C002P003R002A050.skeleton") == 50
    with pytest.raises(SkeletonParseError):
        label_from_filename("nothing.skeleton")
    path = tmp_path / "S001C001P001R001A007.skeleton"
    path.write_text(fixture_text([[body(1)]]))
    assert read_skeleton_file(path).label == 7


def test_parse_format_parse_fixed_point():
    seq = pose_sequence(t=3)
    once = parse_ntu_skeleton(format_ntu_skeleton(seq), label=seq.label)
    twice = parse_ntu_skeleton(format_ntu_skeleton(once), label=seq.label)
    assert once == twice
    np.testing.assert_array_equal(once.data, seq.data)


def test_two_performer_roundtrip():
    seq = pose_sequence(t=2)
    seq.data[..., 1] = seq.data[..., 0] + 1.0
    seq.performer_mask[:] = True
    back = parse_ntu_skeleton(format_ntu_skeleton(seq), label=seq.label)
    assert back == seq


def test_normalize_length_examples():
    seq = pose_sequence(t=75)
    assert normalize_length(seq) == seq
    long = pose_sequence(t=150)
    np.testing.assert_array_equal(normalize_length(long).data, long.data[:, 0:150:2])
    short = normalize_length(pose_sequence(t=50))
    assert short.num_frames == 75 and not short.data[:, 50:].any()
    with pytest.raises(ContractError):
        normalize_length(SkeletonSequence(np.zeros((3, 0, 25, 2))))


@settings(max_examples=25)
@given(st.integers(1, 200))
def test_normalize_length_always_75_and_idempotent(t):
    out = normalize_length(pose_sequence(t=t))
    assert out.num_frames == 75
    assert normalize_length(out) == out


def test_frontal_sequence_unchanged():
    seq = pose_sequence(noise=0.0)
    seq.data[..., 0] -= seq.data[:, :1, :1, 0]
    np.testing.assert_allclose(frontal_align(seq).data, seq.data, atol=1e-6)


@pytest.mark.parametrize("angle", [np.pi / 2, -np.pi / 2, 0.7, 3.0])
def test_frontal_align_recovers_rotation(angle):
    seq = pose_sequence()
    np.testing.assert_allclose(frontal_align(rotate(seq, angle)).data, frontal_align(seq).data, atol=1e-5)


@settings(max_examples=20)
@given(st.floats(-np.pi, np.pi), st.integers(0, 1000))
def test_frontal_align_rigid_and_idempotent(angle, seed):
    seq = rotate(pose_sequence(seed=seed), angle)
    out = frontal_align(seq)
    for t in range(seq.num_frames):
        a, b = seq.data[:, t, :, 0].T, out.data[:, t, :, 0].T
        d_in = np.linalg.norm(a[:, None] - a[None], axis=-1)
        d_out = np.linalg.norm(b[:, None] - b[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-5)
    np.testing.assert_allclose(frontal_align(out).data, out.data, atol=1e-6)


def test_frontal_align_degenerate_warns_identity():
    seq = SkeletonSequence(np.zeros((3, 2, 25, 2)))
    with pytest.warns(DegenerateFacingWarning):
        out = frontal_align(seq)
    np.testing.assert_array_equal(out.data, seq.data)


def test_absent_frames_stay_zero():
    seq = pose_sequence()
    seq.data[:, 2:] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = frontal_align(rotate(seq, 1.0))
    assert not out.data[:, 2:].any()
    assert not out.data[..., 1].any()
