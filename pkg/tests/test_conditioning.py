import numpy as np
import pytest
import torch

from beatdiff.conditioning import (ConditionEncoder, ConditionPair, FeatureSequence,
                                   MotionEncoder, VisualRhythmEncoder, click_times,
                                   make_condition_pair, read_features,
                                   reverse_sequence, synth_rhythm_sequence,
                                   write_features)
from beatdiff.metrics import detect_onsets


@pytest.fixture(scope="module")
def encoders():
    torch.manual_seed(0)
    visual = VisualRhythmEncoder(d_v=6, d_p=8)
    motion = MotionEncoder(n_joints=5, d_q=4)
    return ConditionEncoder(visual, motion)


def random_sequence(seed=0, n_frames=12, d_v=6, n_joints=5):
    rng = np.random.default_rng(seed)
    return FeatureSequence(frames=rng.standard_normal((n_frames, d_v)),
                           poses=rng.standard_normal((n_frames, n_joints, 2)),
                           fps=30.0)


class TestFeatureSequence:
    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):  # frame count mismatch
            FeatureSequence(rng.standard_normal((4, 3)), rng.standard_normal((5, 2, 2)))
        with pytest.raises(ValueError):  # too short
            FeatureSequence(rng.standard_normal((1, 3)), rng.standard_normal((1, 2, 2)))
        with pytest.raises(ValueError):  # non-finite
            FeatureSequence(np.full((3, 2), np.nan), rng.standard_normal((3, 2, 2)))

    def test_reversal_involution_exact(self):
        seq = random_sequence(1)
        rr = reverse_sequence(reverse_sequence(seq))
        np.testing.assert_array_equal(rr.frames, seq.frames)
        np.testing.assert_array_equal(rr.poses, seq.poses)


class TestVisualEncoder:
    def test_constant_sequence_invariant_to_length(self, encoders):
        rng = np.random.default_rng(2)
        frame = rng.standard_normal(6)
        pose = rng.standard_normal((5, 2))
        with torch.no_grad():
            a = encoders.visual(torch.as_tensor(
                np.tile(frame, (10, 1)), dtype=torch.float32)[None])
            b = encoders.visual(torch.as_tensor(
                np.tile(frame, (37, 1)), dtype=torch.float32)[None])
        assert float((a - b).abs().max()) < 1e-5
        del pose

    def test_order_sensitivity(self, encoders):
        seq = random_sequence(3)
        perm = np.random.default_rng(4).permutation(seq.n_frames)
        with torch.no_grad():
            a = encoders.visual(torch.as_tensor(seq.frames, dtype=torch.float32)[None])
            b = encoders.visual(torch.as_tensor(seq.frames[perm], dtype=torch.float32)[None])
        assert float((a - b).abs().max()) > 1e-4

    def test_output_dim_and_short_sequence_error(self, encoders):
        seq = random_sequence(5, n_frames=20)
        with torch.no_grad():
            out = encoders.visual(torch.as_tensor(seq.frames, dtype=torch.float32)[None])
        assert out.shape == (1, 8)
        with pytest.raises(ValueError, match="kernel"):
            encoders.visual(torch.zeros(1, 3, 6))
        with pytest.raises(ValueError, match="features"):
            encoders.visual(torch.zeros(1, 10, 7))


class TestMotionEncoder:
    def test_translation_invariance(self, encoders):
        seq = random_sequence(6)
        shifted = seq.poses + np.array([4.2, -0.7])
        with torch.no_grad():
            a = encoders.motion(torch.as_tensor(seq.poses, dtype=torch.float32)[None])
            b = encoders.motion(torch.as_tensor(shifted, dtype=torch.float32)[None])
        assert float((a - b).abs().max()) < 1e-5

    def test_zero_poses_give_bias_pathway_output(self, encoders):
        with torch.no_grad():
            a = encoders.motion(torch.zeros(1, 10, 5, 2))
            b = encoders.motion(torch.zeros(1, 25, 5, 2))
            c = encoders.motion(torch.full((1, 10, 5, 2), 3.3))  # constant = centered zero
        assert float((a - b).abs().max()) < 1e-6
        assert float((a - c).abs().max()) < 1e-5

    def test_time_reversal_sensitivity_on_swing_motion(self, encoders):
        torch.manual_seed(1)
        enc = ConditionEncoder(VisualRhythmEncoder(d_v=64, d_p=8),
                               MotionEncoder(n_joints=8, d_q=4))
        seq, _ = synth_rhythm_sequence(120.0, 5.0, 30.0, seed=3)
        with torch.no_grad():
            fwd = enc.encode_sequence(seq)
            rev = enc.encode_sequence(reverse_sequence(seq))
        assert float((fwd - rev).abs().max()) > 1e-4

    def test_joint_count_mismatch(self, encoders):
        with pytest.raises(ValueError, match="joints"):
            encoders.motion(torch.zeros(1, 10, 4, 2))


class TestConditionPair:
    def test_dimension_contract(self, encoders):
        seq = random_sequence(7)
        pair = make_condition_pair(seq, "reverse", encoders)
        assert pair.c_pos.shape == (12,)  # d_p + d_q = 8 + 4
        assert pair.c_neg.shape == (12,)

    def test_negated_variant_exact(self, encoders):
        pair = make_condition_pair(random_sequence(8), "negated", encoders)
        assert float((pair.c_neg + pair.c_pos).abs().max()) == 0.0

    def test_palindromic_sequence_reverse_fixed_point(self, encoders):
        seq = random_sequence(9)
        pal = FeatureSequence(
            frames=np.concatenate([seq.frames, seq.frames[::-1]]),
            poses=np.concatenate([seq.poses, seq.poses[::-1]]), fps=30.0)
        pair = make_condition_pair(pal, "reverse", encoders)
        assert float((pair.c_neg - pair.c_pos).abs().max()) == 0.0

    def test_double_reversal_reproduces_positive(self, encoders):
        seq = random_sequence(10)
        pair = make_condition_pair(reverse_sequence(reverse_sequence(seq)),
                                   "reverse", encoders)
        base = make_condition_pair(seq, "reverse", encoders)
        assert torch.equal(pair.c_pos, base.c_pos)

    def test_random_variant_needs_pool_and_rng(self, encoders):
        seq = random_sequence(11)
        with pytest.raises(ValueError, match="pool"):
            make_condition_pair(seq, "random", encoders, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="rng"):
            make_condition_pair(seq, "random", encoders, pool=[random_sequence(12)])
        pair = make_condition_pair(seq, "random", encoders,
                                   rng=np.random.default_rng(0),
                                   pool=[random_sequence(12)])
        assert pair.c_neg is not None

    def test_none_variant_and_unknown_variant(self, encoders):
        pair = make_condition_pair(random_sequence(13), "none", encoders)
        assert pair.c_neg is None
        with pytest.raises(ValueError, match="variant"):
            make_condition_pair(random_sequence(13), "mystery", encoders)
        with pytest.raises(ValueError):
            ConditionPair(c_pos=np.zeros(4), c_neg=np.zeros(4), variant="none")
        with pytest.raises(ValueError):
            ConditionPair(c_pos=np.zeros(4), c_neg=None, variant="reverse")

    def test_masking_zeroes_one_half(self):
        torch.manual_seed(2)
        visual = VisualRhythmEncoder(d_v=6, d_p=8)
        motion = MotionEncoder(n_joints=5, d_q=4)
        seq = random_sequence(14)
        frames = torch.as_tensor(seq.frames, dtype=torch.float32)[None]
        poses = torch.as_tensor(seq.poses, dtype=torch.float32)[None]
        with torch.no_grad():
            only_visual = ConditionEncoder(visual, motion, mask_motion=True)(frames, poses)
            only_motion = ConditionEncoder(visual, motion, mask_visual=True)(frames, poses)
        assert float(only_visual[0, 8:].abs().max()) == 0.0
        assert float(only_visual[0, :8].abs().max()) > 0.0
        assert float(only_motion[0, :8].abs().max()) == 0.0
        with pytest.raises(ValueError):
            ConditionEncoder(visual, motion, mask_visual=True, mask_motion=True)


class TestSynthRhythm:
    def test_click_count_and_determinism(self):
        seq, wave = synth_rhythm_sequence(120.0, 5.0, 30.0, seed=0)
        assert len(click_times(120.0, 5.0)) == 10
        assert len(detect_onsets(wave)) == 10
        seq2, wave2 = synth_rhythm_sequence(120.0, 5.0, 30.0, seed=0)
        np.testing.assert_array_equal(wave.samples, wave2.samples)
        np.testing.assert_array_equal(seq.frames, seq2.frames)
        np.testing.assert_array_equal(seq.poses, seq2.poses)

    def test_pose_peaks_align_with_clicks(self):
        seq, _ = synth_rhythm_sequence(120.0, 5.0, 30.0, seed=5)
        beats = click_times(120.0, 5.0)
        bounce = -(seq.poses[:, :, 1] - seq.poses[:, :, 1].mean(axis=0)).mean(axis=1)
        frame_t = np.arange(seq.n_frames) / seq.fps
        peaks = [frame_t[i] for i in range(1, len(bounce) - 1)
                 if bounce[i] > bounce[i - 1] and bounce[i] >= bounce[i + 1]]
        for p in peaks:
            assert min(abs(p - b) for b in beats) <= 1.0 / seq.fps + 1e-9

    def test_reversed_pose_peaks_at_mirrored_times(self):
        seq, _ = synth_rhythm_sequence(90.0, 5.0, 30.0, seed=6)
        rev = reverse_sequence(seq)

        def peak_times(s):
            bounce = -(s.poses[:, :, 1] - s.poses[:, :, 1].mean(axis=0)).mean(axis=1)
            ft = np.arange(s.n_frames) / s.fps
            return [ft[i] for i in range(1, len(bounce) - 1)
                    if bounce[i] > bounce[i - 1] and bounce[i] >= bounce[i + 1]]

        fwd_peaks = peak_times(seq)
        rev_peaks = peak_times(rev)
        duration = seq.n_frames / seq.fps
        for p in fwd_peaks:
            mirrored = duration - p
            assert min(abs(mirrored - q) for q in rev_peaks) <= 1.5 / seq.fps + 1e-9

    def test_rejects_out_of_range_inputs(self):
        with pytest.raises(ValueError, match="bpm"):
            synth_rhythm_sequence(30.0, 5.0, 30.0, seed=0)
        with pytest.raises(ValueError, match="duration"):
            synth_rhythm_sequence(120.0, 3.0, 30.0, seed=0)

    def test_feature_dims_configurable(self):
        seq, _ = synth_rhythm_sequence(120.0, 5.0, 25.0, seed=1, d_v=16, n_joints=4)
        assert seq.frames.shape == (125, 16)
        assert seq.poses.shape == (125, 4, 2)


class TestFeatureContainer:
    def test_round_trip(self, tmp_path):
        seq, _ = synth_rhythm_sequence(150.0, 5.0, 30.0, seed=7)
        write_features(tmp_path / "a.ftr", seq)
        back = read_features(tmp_path / "a.ftr")
        np.testing.assert_allclose(back.frames, seq.frames, atol=1e-6)
        np.testing.assert_allclose(back.poses, seq.poses, atol=1e-6)
        assert back.fps == seq.fps

    def test_accepts_full_scale_shapes(self, tmp_path):
        rng = np.random.default_rng(8)
        seq = FeatureSequence(frames=rng.standard_normal((12, 2048)),
                              poses=rng.standard_normal((12, 33, 2)), fps=60.0)
        write_features(tmp_path / "big.ftr", seq)
        back = read_features(tmp_path / "big.ftr")
        assert back.frames.shape == (12, 2048)
        assert back.poses.shape == (12, 33, 2)

    def test_rejects_bad_magic(self, tmp_path):
        (tmp_path / "junk.ftr").write_bytes(b"\x01" * 32)
        with pytest.raises(ValueError, match="container"):
            read_features(tmp_path / "junk.ftr")
