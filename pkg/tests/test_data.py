"""Dataset layer tests: Pearson conversion, manifest loading and validation,
stratified splitting, and the planted-signal synthesizer.
"""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcmoe import data as dt

RNG = np.random.default_rng(424242)


def tiny_dataset(n_subjects=3, n_rois=8, seed=0, effect=0.3):
    return dt.synth_generate(n_subjects, n_rois, n_communities=4, effect=effect, seed=seed)


# ---------------------------------------------------------------------------
# pearson_fc


def test_pearson_known_value():
    ts = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 4.0]])
    fc = dt.pearson_fc(ts)
    assert abs(fc[0, 1] - 0.98198) < 1e-5
    np.testing.assert_array_equal(np.diagonal(fc), 1.0)
    np.testing.assert_array_equal(fc, fc.T)


def test_pearson_matches_numpy_corrcoef():
    ts = RNG.normal(size=(40, 6))
    np.testing.assert_allclose(dt.pearson_fc(ts), np.corrcoef(ts.T), atol=1e-12)


def test_pearson_affine_invariance():
    ts = RNG.normal(size=(25, 5))
    scaled = ts * np.array([2.0, 0.5, 3.0, 1.0, 10.0]) + np.array([5, -3, 0, 2, 1])
    np.testing.assert_allclose(dt.pearson_fc(scaled), dt.pearson_fc(ts), atol=1e-12)


def test_pearson_perfect_correlation_hits_bounds():
    base = RNG.normal(size=20)
    ts = np.stack([base, 2.0 * base + 1.0, -base], axis=1)
    fc = dt.pearson_fc(ts)
    assert fc[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert fc[0, 2] == pytest.approx(-1.0, abs=1e-12)
    assert np.abs(fc).max() <= 1.0


def test_pearson_errors():
    with pytest.raises(dt.DataError, match="3 time points"):
        dt.pearson_fc(np.ones((2, 4)))
    bad = RNG.normal(size=(10, 3))
    bad[:, 1] = 7.0  # constant region
    with pytest.raises(dt.DataError, match="ROI 1"):
        dt.pearson_fc(bad)


# ---------------------------------------------------------------------------
# community map


def test_community_map_members_and_names():
    cmap = dt.synth_communities(8, 4)
    assert cmap.names == dt.CANONICAL_COMMUNITIES
    np.testing.assert_array_equal(cmap.members("SMN"), [0, 1])
    np.testing.assert_array_equal(cmap.members("DMN"), [2, 3])
    assert cmap.present_names() == ["CS & SB", "V", "SMN", "DMN"]
    assert cmap.name_of(0) == "SMN"
    with pytest.raises(dt.DataError):
        cmap.members("XYZ")


def test_synth_communities_validation():
    with pytest.raises(dt.DataError):
        dt.synth_communities(10, 4)  # not divisible
    with pytest.raises(dt.DataError):
        dt.synth_communities(8, 1)
    with pytest.raises(dt.DataError):
        dt.synth_communities(8, 9)


# ---------------------------------------------------------------------------
# manifest round trip and validation


def test_save_load_round_trip(tmp_path):
    ds = tiny_dataset()
    manifest = dt.save_dataset(ds, tmp_path)
    loaded = dt.load_dataset(manifest)
    assert len(loaded) == len(ds)
    assert loaded.communities.names == ds.communities.names
    np.testing.assert_array_equal(loaded.communities.assignment, ds.communities.assignment)
    for a, b in zip(ds.subjects, loaded.subjects):
        assert a.id == b.id and a.label == b.label
        np.testing.assert_array_equal(a.fc, b.fc)


def test_load_timeseries_subject(tmp_path):
    ds = tiny_dataset(n_subjects=2)
    manifest_path = dt.save_dataset(ds, tmp_path)
    ts = RNG.normal(size=(30, ds.n_rois))
    np.savetxt(tmp_path / "ts0.csv", ts, delimiter=",", fmt="%.17g")
    manifest = json.loads(manifest_path.read_text())
    manifest["subjects"].append({"id": "with-ts", "label": 1, "ts_csv": "ts0.csv"})
    manifest_path.write_text(json.dumps(manifest))
    loaded = dt.load_dataset(manifest_path)
    np.testing.assert_allclose(
        loaded.subject_by_id("with-ts").fc, dt.pearson_fc(ts), atol=1e-12
    )


def corrupt_and_expect(tmp_path, mutate, match):
    ds = tiny_dataset()
    manifest_path = dt.save_dataset(ds, tmp_path)
    manifest = json.loads(manifest_path.read_text())
    mutate(manifest, tmp_path)
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(dt.DataError, match=match):
        dt.load_dataset(manifest_path)


def test_load_rejects_wrong_version(tmp_path):
    corrupt_and_expect(
        tmp_path, lambda m, _: m.update(format_version=2), "format_version"
    )


def test_load_rejects_empty_subjects(tmp_path):
    corrupt_and_expect(tmp_path, lambda m, _: m.update(subjects=[]), "no subjects")


def test_load_rejects_bad_label(tmp_path):
    def mutate(m, _):
        m["subjects"][0]["label"] = 3

    corrupt_and_expect(tmp_path, mutate, "label")


def test_load_rejects_asymmetric_fc(tmp_path):
    def mutate(m, root):
        rel = m["subjects"][0]["fc_csv"]
        fc = np.loadtxt(root / rel, delimiter=",")
        fc[0, 1] += 0.5
        np.savetxt(root / rel, fc, delimiter=",", fmt="%.17g")

    corrupt_and_expect(tmp_path, mutate, "asymmetry")


def test_load_symmetrizes_tiny_asymmetry(tmp_path):
    ds = tiny_dataset()
    manifest_path = dt.save_dataset(ds, tmp_path)
    rel = json.loads(manifest_path.read_text())["subjects"][0]["fc_csv"]
    fc = np.loadtxt(tmp_path / rel, delimiter=",")
    fc[0, 1] += 5e-7  # within tolerance, averaged away
    np.savetxt(tmp_path / rel, fc, delimiter=",", fmt="%.17g")
    loaded = dt.load_dataset(manifest_path)
    got = loaded.subjects[0].fc
    np.testing.assert_array_equal(got, got.T)
    assert abs(got[0, 1] - (fc[0, 1] + fc[1, 0]) / 2.0) < 1e-15


def test_load_rejects_out_of_range(tmp_path):
    def mutate(m, root):
        rel = m["subjects"][0]["fc_csv"]
        fc = np.loadtxt(root / rel, delimiter=",")
        fc[2, 3] = fc[3, 2] = 1.5
        np.savetxt(root / rel, fc, delimiter=",", fmt="%.17g")

    corrupt_and_expect(tmp_path, mutate, r"outside \[-1, 1\]")


def test_load_rejects_bad_diagonal(tmp_path):
    def mutate(m, root):
        rel = m["subjects"][0]["fc_csv"]
        fc = np.loadtxt(root / rel, delimiter=",")
        fc[4, 4] = 0.9
        np.savetxt(root / rel, fc, delimiter=",", fmt="%.17g")

    corrupt_and_expect(tmp_path, mutate, "diagonal")


def test_load_rejects_bad_community_file(tmp_path):
    ds = tiny_dataset()
    manifest_path = dt.save_dataset(ds, tmp_path)
    comm = tmp_path / "communities.csv"
    lines = comm.read_text().splitlines()
    lines[0] = "0,Mystery Network"
    comm.write_text("\n".join(lines) + "\n")
    with pytest.raises(dt.DataError, match="unknown community"):
        dt.load_dataset(manifest_path)

    comm.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(dt.DataError, match="lines"):
        dt.load_dataset(manifest_path)


def test_duplicate_subject_ids_rejected():
    ds = tiny_dataset()
    with pytest.raises(dt.DataError, match="duplicate"):
        dt.ConnectomeDataset(
            subjects=[ds.subjects[0], ds.subjects[0]], communities=ds.communities
        )


# ---------------------------------------------------------------------------
# stratified split


def test_split_sizes_with_remainder():
    # 5 + 5 subjects at 70/10/20: per class floors 3/0/1, remainder 1 to train
    ds = tiny_dataset(n_subjects=10, n_rois=8)
    train, val, test = dt.stratified_split(ds, (0.7, 0.1, 0.2), seed=0)
    assert (len(train), len(val), len(test)) == (8, 0, 2)
    for part in (train, test):
        labels = part.labels()
        assert (labels == 0).sum() == (labels == 1).sum()


def test_split_partitions_dataset():
    ds = tiny_dataset(n_subjects=24, n_rois=8)
    train, val, test = dt.stratified_split(ds, seed=3)
    ids = [s.id for part in (train, val, test) for s in part.subjects]
    assert sorted(ids) == sorted(s.id for s in ds.subjects)
    assert len(set(ids)) == len(ids)


def test_split_deterministic_and_seed_sensitive():
    ds = tiny_dataset(n_subjects=40, n_rois=8)
    a = dt.stratified_split(ds, seed=11)
    b = dt.stratified_split(ds, seed=11)
    c = dt.stratified_split(ds, seed=12)
    assert [s.id for s in a[0].subjects] == [s.id for s in b[0].subjects]
    assert [s.id for s in a[0].subjects] != [s.id for s in c[0].subjects]


def test_split_errors():
    ds = tiny_dataset(n_subjects=10, n_rois=8)
    with pytest.raises(dt.SplitError):
        dt.stratified_split(ds, (0.5, 0.2, 0.2), seed=0)  # does not sum to 1
    with pytest.raises(dt.SplitError):
        dt.stratified_split(ds, (0.7, -0.1, 0.4), seed=0)
    small = dt.ConnectomeDataset(subjects=ds.subjects[:5], communities=ds.communities)
    with pytest.raises(dt.SplitError, match="at least 3"):
        dt.stratified_split(small, seed=0)
    one_class = dt.ConnectomeDataset(
        subjects=[s for s in ds.subjects if s.label == 0], communities=ds.communities
    )
    with pytest.raises(dt.SplitError, match="both classes"):
        dt.stratified_split(one_class, seed=0)


@settings(max_examples=25, deadline=None)
@given(
    n_per_class=st.integers(3, 30),
    seed=st.integers(0, 10_000),
)
def test_split_floor_allocation_property(n_per_class, seed):
    ds = tiny_dataset(n_subjects=2 * n_per_class, n_rois=8)
    train, val, test = dt.stratified_split(ds, (0.7, 0.1, 0.2), seed=seed)
    for part, frac in ((val, 0.1), (test, 0.2)):
        assert len(part) == 2 * math.floor(frac * n_per_class)
    assert len(train) == len(ds) - len(val) - len(test)


# ---------------------------------------------------------------------------
# synthesis


def test_synth_shapes_labels_and_validity():
    ds = dt.synth_generate(20, 12, n_communities=4, effect=0.4, seed=1)
    assert len(ds) == 20 and ds.n_rois == 12
    labels = ds.labels()
    assert (labels == 0).sum() == 10 and (labels == 1).sum() == 10
    for s in ds.subjects:
        np.testing.assert_array_equal(s.fc, s.fc.T)
        np.testing.assert_array_equal(np.diagonal(s.fc), 1.0)
        assert np.abs(s.fc).max() <= 1.0
    assert len({s.id for s in ds.subjects}) == 20


def test_synth_deterministic_per_seed():
    a = dt.synth_generate(6, 8, seed=5)
    b = dt.synth_generate(6, 8, seed=5)
    c = dt.synth_generate(6, 8, seed=6)
    for s1, s2 in zip(a.subjects, b.subjects):
        np.testing.assert_array_equal(s1.fc, s2.fc)
    assert any(
        not np.array_equal(s1.fc, s2.fc) for s1, s2 in zip(a.subjects, c.subjects)
    )


def test_synth_effect_shifts_signal_block():
    # label-conditional block means differ by ~effect, within 3 standard errors
    effect = 0.4
    ds = dt.synth_generate(400, 20, n_communities=4, effect=effect, noise=0.05, seed=9)
    feature = dt.signal_block_mean(ds)
    labels = ds.labels()
    gap = feature[labels == 1].mean() - feature[labels == 0].mean()
    pooled_se = math.hypot(
        feature[labels == 1].std(ddof=1) / math.sqrt((labels == 1).sum()),
        feature[labels == 0].std(ddof=1) / math.sqrt((labels == 0).sum()),
    )
    assert abs(gap - effect) <= 3.0 * pooled_se


def test_synth_probe_separates_classes():
    # a monotone single-feature probe ranks classes almost perfectly
    from fcmoe.training import auroc

    ds = dt.synth_generate(200, 20, n_communities=4, effect=0.4, noise=0.05, seed=2)
    score = dt.signal_block_mean(ds)
    assert auroc(ds.labels(), score) > 0.9


def test_synth_zero_effect_has_no_signal():
    ds = dt.synth_generate(300, 16, n_communities=4, effect=0.0, seed=3)
    from fcmoe.training import auroc

    value = auroc(ds.labels(), dt.signal_block_mean(ds))
    assert 0.35 < value < 0.65
