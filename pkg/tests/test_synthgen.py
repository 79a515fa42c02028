import math

import numpy as np
import pytest

from hoigaze import datamodel as dm
from hoigaze import synthgen as sg


def _agreement(gen, exclude_crossing=True):
    """Fraction of frames where the gaze-derived label equals the scripted side."""
    seq = gen.sequence
    w = dm.split_windows(seq, len(seq), 1)[0]
    per = dm.label_attended_hand(w).per_frame
    keep = ~gen.crossing if exclude_crossing else np.ones(len(per), bool)
    return float(np.mean(per[keep] == gen.scripted[keep]))


def _mean_gh_angle(seq):
    cos = np.clip(np.sum(seq.gaze_dir * seq.head_dir, axis=1), -1, 1)
    return float(np.degrees(np.arccos(cos)).mean())


class TestConfig:
    @pytest.mark.parametrize("kw", [{"coordination": 1.5}, {"head_follow": -0.1}, {"gaze_noise_deg": -1.0},
                                    {"hand_mode": "floppy"}, {"n_joints": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            sg.SynthConfig(**kw).validate()


class TestHelpers:
    def test_slerp_endpoints_and_midpoint(self):
        u, v = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
        np.testing.assert_allclose(sg.slerp(u, v, 0.0), u)
        np.testing.assert_allclose(sg.slerp(u, v, 1.0), v)
        np.testing.assert_allclose(sg.slerp(u, v, 0.5), [math.sqrt(0.5), math.sqrt(0.5), 0], atol=1e-12)

    def test_slerp_antiparallel_stays_unit(self):
        out = sg.slerp(np.array([0, 0, 1.0]), np.array([0, 0, -1.0]), 0.5)
        assert abs(np.linalg.norm(out) - 1) < 1e-12
        assert abs(out[2]) < 1e-12

    def test_direction_round_trip(self):
        d = sg.direction(0.3, -0.2)
        assert sg.yaw_pitch(d) == pytest.approx((0.3, -0.2))
        np.testing.assert_allclose(sg.direction(0.0, 0.0), [0, 0, 1])


class TestGenerateSequence:
    def test_deterministic(self, small_synth):
        cfg, gens = small_synth
        again = sg.generate_sequence(cfg, 1)
        for name in dm.ARRAY_FIELDS:
            assert np.array_equal(getattr(again.sequence, name), getattr(gens[1].sequence, name))
        assert np.array_equal(again.scripted, gens[1].scripted)
        assert not np.array_equal(gens[0].sequence.gaze_dir, gens[1].sequence.gaze_dir)

    def test_shapes_and_units(self, small_synth):
        cfg, gens = small_synth
        seq = gens[0].sequence
        assert len(seq) == 120 and seq.n_joints == 4 and seq.n_objects == 3
        for name in ("head_dir", "gaze_dir"):
            np.testing.assert_allclose(np.linalg.norm(getattr(seq, name), axis=1), 1.0, atol=1e-6)

    def test_head_speed_bound(self, small_synth):
        cfg, gens = small_synth
        step = np.linalg.norm(np.diff(gens[0].sequence.head_pos, axis=0), axis=1)
        assert step.max() <= cfg.head_speed / dm.FPS + 1e-12

    def test_switch_schedule(self):
        cfg = sg.SynthConfig(seed=3, frames_per_sequence=2000, n_joints=5)
        s = sg.generate_sequence(cfg, 0).scripted
        changes = np.flatnonzero(np.diff(s)) + 1
        runs = np.diff(np.concatenate([[0], changes]))
        assert len(changes) >= 3
        assert runs.min() >= cfg.min_switch_frames

    def test_labels_recover_script_when_coordinated(self):
        cfg = sg.SynthConfig(seed=5, frames_per_sequence=400, n_joints=5, coordination=1.0, gaze_noise_deg=0.0)
        for i in range(3):
            assert _agreement(sg.generate_sequence(cfg, i)) >= 0.99

    def test_label_agreement_default(self):
        cfg = sg.SynthConfig(seed=6, frames_per_sequence=400, n_joints=5)
        agree = np.mean([_agreement(sg.generate_sequence(cfg, i), False) for i in range(3)])
        assert agree >= 0.95

    def test_full_head_follow_aligns_head_and_gaze(self):
        cfg = sg.SynthConfig(seed=2, frames_per_sequence=200, n_joints=5, head_follow=1.0, gaze_noise_deg=0.0)
        seq = sg.generate_sequence(cfg, 0).sequence
        cos = np.sum(seq.gaze_dir * seq.head_dir, axis=1)
        assert np.all(cos > 0.8)
        np.testing.assert_allclose(cos, 1.0, atol=1e-9)

    def test_head_follow_monotone(self):
        errs = []
        for hf in (0.0, 0.1, 0.5):
            cfg = sg.SynthConfig(seed=4, frames_per_sequence=300, n_joints=5, head_follow=hf)
            errs.append(np.mean([_mean_gh_angle(sg.generate_sequence(cfg, i).sequence) for i in range(3)]))
        assert errs[0] > errs[1] > errs[2]

    def test_static_hands_are_rigid(self):
        cfg = sg.SynthConfig(seed=1, frames_per_sequence=60, n_joints=10, hand_mode="static")
        seq = sg.generate_sequence(cfg, 0).sequence
        assert seq.hand_mode == "static"
        # pairwise joint distances do not change under a rigid motion
        d = np.linalg.norm(seq.left_hand[:, :, None] - seq.left_hand[:, None], axis=-1)
        np.testing.assert_allclose(d, d[0][None].repeat(60, axis=0), atol=1e-9)
        dyn = sg.generate_sequence(sg.SynthConfig(seed=1, frames_per_sequence=60, n_joints=10), 0).sequence
        d2 = np.linalg.norm(dyn.left_hand[:, :, None] - dyn.left_hand[:, None], axis=-1)
        assert np.abs(d2 - d2[0]).max() > 1e-3


class TestGenerateDataset:
    def test_files_and_round_trip(self, tmp_path):
        cfg = sg.SynthConfig(seed=9, num_sequences=3, frames_per_sequence=40, n_joints=4, n_objects=2)
        m = sg.generate_dataset(cfg, tmp_path, test_fraction=0.34)
        assert [p.name for p in m.paths] == ["seq_000.txt", "seq_001.txt", "seq_002.txt"]
        seqs = dm.load_manifest(tmp_path / "manifest.txt")
        assert len(seqs) == 3
        assert len(dm.read_manifest(tmp_path / "train.txt")) == 1
        assert len(dm.read_manifest(tmp_path / "test.txt")) == 2
        gen = sg.generate_sequence(cfg, 1)
        np.testing.assert_array_equal(dm.read_labels(tmp_path / "seq_001.labels"), gen.scripted)
        np.testing.assert_array_equal(sg.read_crossing(tmp_path / "seq_001.crossing"),
                                      np.flatnonzero(gen.crossing))
        np.testing.assert_allclose(seqs[1].gaze_dir, gen.sequence.gaze_dir, atol=1e-6)

    def test_zero_sequences(self, tmp_path):
        m = sg.generate_dataset(sg.SynthConfig(num_sequences=0), tmp_path)
        assert m.paths == []
        assert dm.read_manifest(tmp_path / "manifest.txt") == []

    def test_unwritable_dir_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            sg.generate_dataset(sg.SynthConfig(num_sequences=1, frames_per_sequence=5), blocker / "sub")


class TestBaselineOnSynthetic:
    def test_uncoordinated_baseline_error_is_large(self):
        cfg = sg.SynthConfig(seed=8, frames_per_sequence=400, n_joints=5, coordination=0.0)
        err = np.mean([_mean_gh_angle(sg.generate_sequence(cfg, i).sequence) for i in range(4)])
        assert err > 20.0
