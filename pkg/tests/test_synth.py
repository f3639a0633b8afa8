import numpy as np
import pytest

from osa_fusion.mesh import load_meshes
from osa_fusion.sampling import label_from_ahi
from osa_fusion.synth import (
    BMI_MEANS,
    SynthConfig,
    base_face,
    generate,
    planted_feature_indices,
    threshold_oracle_accuracy,
    write_dataset,
)
from osa_fusion.text import SEVERITIES, load_patients


def test_zero_signal_means_no_displacement():
    cfg = SynthConfig(n_subjects=50, signal=0.0, noise=0.0, seed=1)
    _, meshes = generate(cfg)
    base = np.clip(base_face(), [0, 0, -np.inf], [1, 1, np.inf])
    for m in meshes:
        np.testing.assert_array_equal(m.landmarks, base)


def test_bmi_means_follow_cohort_anchors():
    recs, _ = generate(SynthConfig(n_subjects=10_000, seed=3))
    for sev, target in zip(SEVERITIES, BMI_MEANS):
        mean = np.mean([r.bmi for r in recs if r.severity == sev])
        assert abs(mean - target) <= 0.5, (sev, mean)


def test_same_seed_bit_identical(tmp_path):
    cfg = SynthConfig(n_subjects=30, seed=5)
    write_dataset(cfg, tmp_path / "a")
    write_dataset(cfg, tmp_path / "b")
    for name in ("patients.csv", "meshes.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_files_reload(tmp_path):
    cfg = SynthConfig(n_subjects=12, seed=2)
    pp, mp = write_dataset(cfg, tmp_path)
    recs, meshes = generate(cfg)
    assert [r.id for r in load_patients(pp)] == [r.id for r in recs]
    assert np.array_equal(load_meshes(mp)[3].landmarks, meshes[3].landmarks)


def test_labels_close_under_ahi():
    recs, _ = generate(SynthConfig(n_subjects=500, seed=4))
    assert all(label_from_ahi(r.ahi) == r.severity for r in recs)


def test_proportions_respected():
    recs, _ = generate(SynthConfig(n_subjects=5000, proportions=(1, 1, 1, 1), seed=6))
    counts = np.array([sum(r.severity == s for r in recs) for s in SEVERITIES])
    assert np.all(np.abs(counts / 5000 - 0.25) < 0.03)


def test_threshold_oracle_learnable():
    cfg = SynthConfig(n_subjects=800, signal=1.0, noise=0.002, seed=0)
    assert threshold_oracle_accuracy(*generate(cfg), cfg) >= 0.95


def test_threshold_oracle_at_default_noise():
    cfg = SynthConfig(n_subjects=800, seed=0)
    assert threshold_oracle_accuracy(*generate(cfg), cfg) >= 0.95


def test_planted_indices_inside_default_selection():
    idx = planted_feature_indices(SynthConfig())
    assert len(idx) == 18 and len(set(idx)) == 18


@pytest.mark.parametrize("bad", [dict(signal=1.5), dict(n_subjects=0), dict(proportions=(1, 2, 3)), dict(noise=-1)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)
