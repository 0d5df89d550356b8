"""Connectome datasets: loading, validation, splitting, and synthesis.

A dataset is a list of subjects, each holding a symmetric unit-diagonal
functional-connectivity matrix in [-1, 1] plus a binary label (0 healthy
control, 1 positive class), and one shared map from ROI index to functional
community.

On-disk layout is a JSON manifest next to delimited files:

    manifest.json     {"format_version": 1, "n_rois": N,
                       "community_file": "...", "subjects": [...]}
    subject entry     {"id": str, "label": 0|1, "fc_csv": path}
                      or {"id": str, "label": 0|1, "ts_csv": path}
    fc csv            N x N comma-separated floats, no header
    ts csv            T x N time-by-region floats, converted via Pearson
    community csv     exactly N lines of "roi_index,community_name"

Paths inside the manifest are resolved relative to its directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANONICAL_COMMUNITIES = ("CS & SB", "V", "SMN", "DAN", "VAN", "L", "FPN", "DMN")
MANIFEST_FORMAT_VERSION = 1

# synthetic data plants its group-difference signal between these two
SIGNAL_COMMUNITIES = ("SMN", "DMN")

_SYMMETRY_TOL = 1e-6
_DIAGONAL_TOL = 1e-9
_RANGE_TOL = 1e-9


class DataError(ValueError):
    """Raised for malformed datasets, matrices, or community files."""


class SplitError(ValueError):
    """Raised when a stratified split cannot be formed."""


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Subject:
    id: str
    label: int
    fc: np.ndarray  # [N, N] symmetric, unit diagonal, values in [-1, 1]


@dataclass(frozen=True)
class CommunityMap:
    """ROI index -> community assignment over the eight canonical names."""

    names: tuple[str, ...]
    assignment: np.ndarray  # [N] indices into names

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("community names must be distinct")
        if self.assignment.ndim != 1:
            raise DataError("community assignment must be a vector")
        if self.assignment.min(initial=0) < 0 or self.assignment.max(initial=0) >= len(self.names):
            raise DataError("community assignment indexes outside the name list")

    @property
    def n_rois(self) -> int:
        return int(self.assignment.shape[0])

    def name_of(self, roi: int) -> str:
        return self.names[int(self.assignment[roi])]

    def members(self, name: str) -> np.ndarray:
        try:
            idx = self.names.index(name)
        except ValueError:
            raise DataError(f"unknown community {name!r}") from None
        return np.flatnonzero(self.assignment == idx)

    def present_names(self) -> list[str]:
        """Canonical names that have at least one ROI, in canonical order."""
        used = set(self.assignment.tolist())
        return [n for i, n in enumerate(self.names) if i in used]


@dataclass
class ConnectomeDataset:
    subjects: list[Subject]
    communities: CommunityMap

    def __post_init__(self):
        n = self.communities.n_rois
        seen: set[str] = set()
        for s in self.subjects:
            if s.fc.shape != (n, n):
                raise DataError(f"subject {s.id!r}: fc shape {s.fc.shape}, expected ({n}, {n})")
            if s.label not in (0, 1):
                raise DataError(f"subject {s.id!r}: label must be 0 or 1, got {s.label!r}")
            if s.id in seen:
                raise DataError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_rois(self) -> int:
        return self.communities.n_rois

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=np.int64)

    def stack_fc(self) -> np.ndarray:
        return np.stack([s.fc for s in self.subjects])

    def subject_by_id(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise DataError(f"no subject with id {subject_id!r}")


# ---------------------------------------------------------------------------
# Pearson connectivity


def pearson_fc(timeseries: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix of a [T, N] time-by-region array.

    Needs T >= 3 samples. A region with zero variance has no defined
    correlation and raises, naming the offending column.
    """
    ts = np.asarray(timeseries, dtype=np.float64)
    if ts.ndim != 2:
        raise DataError(f"timeseries must be [T, N], got shape {ts.shape}")
    n_samples, n_rois = ts.shape
    if n_samples < 3:
        raise DataError(f"need at least 3 time points, got {n_samples}")
    centered = ts - ts.mean(axis=0, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=0))
    dead = np.flatnonzero(norms == 0.0)
    if dead.size:
        raise DataError(f"ROI {int(dead[0])} has zero variance")
    fc = (centered.T @ centered) / np.outer(norms, norms)
    np.clip(fc, -1.0, 1.0, out=fc)
    fc = (fc + fc.T) / 2.0
    np.fill_diagonal(fc, 1.0)
    return fc


def _validate_fc(matrix: np.ndarray, n_rois: int, subject_id: str) -> np.ndarray:
    fc = np.asarray(matrix, dtype=np.float64)
    if fc.shape != (n_rois, n_rois):
        raise DataError(f"subject {subject_id!r}: fc shape {fc.shape}, expected ({n_rois}, {n_rois})")
    if not np.isfinite(fc).all():
        raise DataError(f"subject {subject_id!r}: fc contains non-finite values")
    asym = np.abs(fc - fc.T).max()
    if asym > _SYMMETRY_TOL:
        raise DataError(f"subject {subject_id!r}: fc asymmetry {asym:.3e} exceeds {_SYMMETRY_TOL}")
    fc = (fc + fc.T) / 2.0
    out_of_range = np.abs(fc).max()
    if out_of_range > 1.0 + _RANGE_TOL:
        raise DataError(f"subject {subject_id!r}: fc entry {out_of_range:.6f} outside [-1, 1]")
    np.clip(fc, -1.0, 1.0, out=fc)
    diag_err = np.abs(np.diagonal(fc) - 1.0).max()
    if diag_err > _DIAGONAL_TOL:
        raise DataError(f"subject {subject_id!r}: fc diagonal deviates from 1 by {diag_err:.3e}")
    np.fill_diagonal(fc, 1.0)
    return fc


# ---------------------------------------------------------------------------
# loading and saving


def _load_community_file(path: Path, n_rois: int) -> CommunityMap:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != n_rois:
        raise DataError(f"community file {path.name}: {len(lines)} lines, expected {n_rois}")
    assignment = np.full(n_rois, -1, dtype=np.int64)
    for ln in lines:
        parts = ln.split(",", 1)
        if len(parts) != 2:
            raise DataError(f"community file {path.name}: bad line {ln!r}")
        try:
            roi = int(parts[0])
        except ValueError:
            raise DataError(f"community file {path.name}: bad ROI index in {ln!r}") from None
        name = parts[1].strip()
        if not (0 <= roi < n_rois):
            raise DataError(f"community file {path.name}: ROI {roi} out of range [0, {n_rois})")
        if name not in CANONICAL_COMMUNITIES:
            raise DataError(f"community file {path.name}: unknown community {name!r}")
        if assignment[roi] != -1:
            raise DataError(f"community file {path.name}: ROI {roi} assigned twice")
        assignment[roi] = CANONICAL_COMMUNITIES.index(name)
    return CommunityMap(names=CANONICAL_COMMUNITIES, assignment=assignment)


def _load_csv_matrix(path: Path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    except OSError:
        raise
    except ValueError as exc:
        raise DataError(f"{path.name}: could not parse CSV ({exc})") from None


def load_dataset(manifest_path) -> ConnectomeDataset:
    """Read a manifest and fully validate every subject matrix."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise DataError(f"unsupported manifest format_version {manifest.get('format_version')!r}")
    try:
        n_rois = int(manifest["n_rois"])
        community_file = manifest["community_file"]
        entries = manifest["subjects"]
    except KeyError as exc:
        raise DataError(f"manifest is missing key {exc.args[0]!r}") from None
    if n_rois < 1:
        raise DataError(f"manifest n_rois must be positive, got {n_rois}")
    if not entries:
        raise DataError("manifest lists no subjects")

    base = manifest_path.parent
    communities = _load_community_file(base / community_file, n_rois)
    subjects: list[Subject] = []
    for entry in entries:
        sid = entry.get("id")
        if not isinstance(sid, str) or not sid:
            raise DataError(f"subject entry {entry!r} needs a string id")
        label = entry.get("label")
        if label not in (0, 1):
            raise DataError(f"subject {sid!r}: label must be 0 or 1, got {label!r}")
        if "fc_csv" in entry:
            fc = _load_csv_matrix(base / entry["fc_csv"])
        elif "ts_csv" in entry:
            ts = _load_csv_matrix(base / entry["ts_csv"])
            if ts.shape[1] != n_rois:
                raise DataError(
                    f"subject {sid!r}: timeseries has {ts.shape[1]} regions, expected {n_rois}"
                )
            fc = pearson_fc(ts)
        else:
            raise DataError(f"subject {sid!r}: entry needs fc_csv or ts_csv")
        subjects.append(Subject(id=sid, label=int(label), fc=_validate_fc(fc, n_rois, sid)))
    return ConnectomeDataset(subjects=subjects, communities=communities)


def save_dataset(dataset: ConnectomeDataset, out_dir) -> Path:
    """Write manifest, community file, and one fc CSV per subject.

    Floats are written with repr precision, so load(save(ds)) is bit-exact.
    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "fc").mkdir(parents=True, exist_ok=True)
    community_file = "communities.csv"
    lines = [
        f"{roi},{dataset.communities.name_of(roi)}" for roi in range(dataset.n_rois)
    ]
    (out / community_file).write_text("\n".join(lines) + "\n", encoding="utf-8")

    entries = []
    for s in dataset.subjects:
        rel = f"fc/{s.id}.csv"
        np.savetxt(out / rel, s.fc, delimiter=",", fmt="%.17g")
        entries.append({"id": s.id, "label": s.label, "fc_csv": rel})
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "n_rois": dataset.n_rois,
        "community_file": community_file,
        "subjects": entries,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest_path


# ---------------------------------------------------------------------------
# splitting


def stratified_split(
    dataset: ConnectomeDataset,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[ConnectomeDataset, ConnectomeDataset, ConnectomeDataset]:
    """Per-class shuffle, then floor(fraction * count) subjects to train, val,
    and test in that order; the leftover tail of each class goes to train.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise SplitError(f"fractions must be three nonnegative values, got {fractions!r}")
    if abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {fractions!r}")
    labels = dataset.labels()
    classes = np.unique(labels)
    if set(classes.tolist()) != {0, 1}:
        raise SplitError("split needs both classes present")
    rng = np.random.default_rng(seed)
    picks: list[list[int]] = [[], [], []]
    for cls in (0, 1):
        indices = np.flatnonzero(labels == cls)
        if indices.size < 3:
            raise SplitError(f"class {cls} has only {indices.size} subjects, need at least 3")
        shuffled = indices[rng.permutation(indices.size)]
        counts = [int(math.floor(f * indices.size)) for f in fractions]
        start = 0
        for part, count in enumerate(counts):
            picks[part].extend(shuffled[start : start + count].tolist())
            start += count
        picks[0].extend(shuffled[start:].tolist())  # remainder to train

    def subset(index_list: list[int]) -> ConnectomeDataset:
        chosen = sorted(index_list)
        return ConnectomeDataset(
            subjects=[dataset.subjects[i] for i in chosen], communities=dataset.communities
        )

    return subset(picks[0]), subset(picks[1]), subset(picks[2])


# ---------------------------------------------------------------------------
# synthesis


def synth_communities(n_rois: int, n_communities: int) -> CommunityMap:
    """Contiguous equal blocks over canonical names, signal pair first."""
    if not (2 <= n_communities <= len(CANONICAL_COMMUNITIES)):
        raise DataError(f"n_communities must be in [2, {len(CANONICAL_COMMUNITIES)}]")
    if n_rois % n_communities != 0:
        raise DataError(f"n_rois {n_rois} is not divisible by n_communities {n_communities}")
    ordering = list(SIGNAL_COMMUNITIES) + [
        n for n in CANONICAL_COMMUNITIES if n not in SIGNAL_COMMUNITIES
    ]
    block = n_rois // n_communities
    assignment = np.empty(n_rois, dtype=np.int64)
    for roi in range(n_rois):
        name = ordering[roi // block]
        assignment[roi] = CANONICAL_COMMUNITIES.index(name)
    return CommunityMap(names=CANONICAL_COMMUNITIES, assignment=assignment)


def synth_generate(
    n_subjects: int,
    n_rois: int,
    n_communities: int = 4,
    effect: float = 0.4,
    noise: float = 0.05,
    seed: int = 0,
) -> ConnectomeDataset:
    """Balanced synthetic cohort with a planted between-community signal.

    Each subject's base matrix is a true correlation matrix, a Gaussian
    factor Gram product normalized to unit diagonal, plus symmetric
    entrywise jitter of scale ``noise``. Label-1 subjects get ``effect``
    added to every correlation between the two signal communities
    (SMN and DMN). Matrices are then clipped to [-1, 1] with the diagonal
    pinned at 1; positive semidefiniteness is not re-enforced.
    """
    if n_subjects < 2:
        raise DataError("need at least 2 subjects")
    if effect < 0 or noise < 0:
        raise DataError("effect and noise must be nonnegative")
    communities = synth_communities(n_rois, n_communities)
    rows = communities.members(SIGNAL_COMMUNITIES[0])
    cols = communities.members(SIGNAL_COMMUNITIES[1])
    rng = np.random.default_rng(seed)
    subjects: list[Subject] = []
    width = len(str(max(n_subjects - 1, 1)))
    for i in range(n_subjects):
        label = i % 2
        factors = rng.normal(size=(n_rois, n_rois))
        gram = factors @ factors.T
        scale = np.sqrt(np.diagonal(gram))
        fc = gram / np.outer(scale, scale)
        if noise > 0:
            jitter = rng.normal(scale=noise, size=(n_rois, n_rois))
            jitter = (jitter + jitter.T) / 2.0
            np.fill_diagonal(jitter, 0.0)
            fc = fc + jitter
        if label == 1 and effect > 0:
            fc[np.ix_(rows, cols)] += effect
            fc[np.ix_(cols, rows)] += effect
        np.clip(fc, -1.0, 1.0, out=fc)
        fc = (fc + fc.T) / 2.0
        np.fill_diagonal(fc, 1.0)
        subjects.append(Subject(id=f"synth-{i:0{width}d}", label=label, fc=fc))
    return ConnectomeDataset(subjects=subjects, communities=communities)


def signal_block_mean(dataset: ConnectomeDataset) -> np.ndarray:
    """Per-subject mean correlation between the two signal communities.

    This is the one-number probe the planted effect should move by ~effect.
    """
    rows = dataset.communities.members(SIGNAL_COMMUNITIES[0])
    cols = dataset.communities.members(SIGNAL_COMMUNITIES[1])
    block = dataset.stack_fc()[:, rows[:, None], cols[None, :]]
    return block.reshape(len(dataset), -1).mean(axis=1)
