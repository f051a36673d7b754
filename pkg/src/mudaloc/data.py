"""Core data model: CSI recordings, fingerprint samples, domain datasets.

A recording holds the packet stream of one reference point (RP) in one
domain as two real arrays of shape [V, M, N] (packets x antennas x
subcarriers): amplitude and phase. Fingerprint samples hold the windowed
image form consumed by the network. All containers validate on
construction and are immutable afterwards; numpy payloads are marked
read-only.

On-disk interchange is JSON Lines, one packet per line:

    {"rp_id": 3, "pos": [1.2, 0.6], "domain": "lab_a", "packet": 0,
     "amp": [[..N floats..] x M rows], "phase": [[..] x M rows]}

Rows are antenna-major. Packets of the same (domain, rp_id) pair are
grouped and ordered by packet index on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

ROLE_SOURCE = "source"
ROLE_TARGET = "target"


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CsiRecording:
    """Packet stream of one reference point in one domain.

    Attributes:
        rp_id: integer reference-point id.
        pos: ground-truth (x, y) position in meters.
        domain_id: opaque domain label, e.g. "lab_jan".
        amp: float64 array [V, M, N], amplitudes, element-wise >= 0.
        phase: float64 array [V, M, N], radians; finite, may be wrapped.
    """

    rp_id: int
    pos: tuple[float, float]
    domain_id: str
    amp: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        amp = _frozen(self.amp)
        phase = _frozen(self.phase)
        if amp.ndim != 3:
            raise ValidationError(f"amp must be [V, M, N], got shape {amp.shape}")
        if amp.shape != phase.shape:
            raise ValidationError(
                f"amp shape {amp.shape} != phase shape {phase.shape}"
            )
        if min(amp.shape) < 1:
            raise ValidationError(f"empty recording axes: {amp.shape}")
        if not np.all(np.isfinite(amp)) or np.any(amp < 0):
            raise ValidationError("amp must be finite and >= 0")
        if not np.all(np.isfinite(phase)):
            raise ValidationError("phase must be finite")
        pos = (float(self.pos[0]), float(self.pos[1]))
        if not (math.isfinite(pos[0]) and math.isfinite(pos[1])):
            raise ValidationError(f"pos must be finite, got {pos}")
        if not self.domain_id:
            raise ValidationError("domain_id must be non-empty")
        object.__setattr__(self, "amp", amp)
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "rp_id", int(self.rp_id))

    @property
    def n_packets(self) -> int:
        return self.amp.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.amp.shape[1]

    @property
    def n_subcarriers(self) -> int:
        return self.amp.shape[2]


@dataclass(frozen=True)
class RpGrid:
    """Reference-point layout of a scene.

    Attributes:
        points: list of (rp_id, x, y); rp_ids unique.
        spacing: nominal grid spacing in meters (> 0).
    """

    points: tuple
    spacing: float

    def __post_init__(self):
        pts = tuple((int(r), float(x), float(y)) for r, x, y in self.points)
        ids = [p[0] for p in pts]
        if len(ids) != len(set(ids)):
            raise ValidationError("rp_ids must be unique")
        if not pts:
            raise ValidationError("grid must contain at least one point")
        if not self.spacing > 0:
            raise ValidationError(f"spacing must be > 0, got {self.spacing}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "spacing", float(self.spacing))

    def position(self, rp_id: int) -> tuple[float, float]:
        for r, x, y in self.points:
            if r == rp_id:
                return (x, y)
        raise KeyError(f"rp_id {rp_id} not in grid")

    @property
    def rp_ids(self) -> list:
        return [p[0] for p in self.points]


@dataclass(frozen=True)
class FingerprintSample:
    """One windowed fingerprint image pair with its label.

    Attributes:
        image_amp: float64 [H, W] amplitude heatmap (H = M*N rows, W = T).
        image_phase: float64 [H, W] phase heatmap.
        pos: ground-truth (x, y) in meters.
        rp_id: reference-point id the window came from.
        domain_id: domain label.
    """

    image_amp: np.ndarray
    image_phase: np.ndarray
    pos: tuple[float, float]
    rp_id: int
    domain_id: str

    def __post_init__(self):
        ia = _frozen(self.image_amp)
        ip = _frozen(self.image_phase)
        if ia.ndim != 2 or ia.shape != ip.shape:
            raise ValidationError(
                f"images must be matching 2-D arrays, got {ia.shape} / {ip.shape}"
            )
        if not (np.all(np.isfinite(ia)) and np.all(np.isfinite(ip))):
            raise ValidationError("fingerprint images must be finite")
        object.__setattr__(self, "image_amp", ia)
        object.__setattr__(self, "image_phase", ip)
        object.__setattr__(self, "pos", (float(self.pos[0]), float(self.pos[1])))
        object.__setattr__(self, "rp_id", int(self.rp_id))


@dataclass(frozen=True)
class DomainDataset:
    """All fingerprint samples of one domain plus its role.

    Attributes:
        samples: tuple of FingerprintSample, all sharing domain_id.
        domain_id: domain label.
        role: "source" (labels usable) or "target" (labels held out).
    """

    samples: tuple
    domain_id: str
    role: str

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ValidationError(f"domain {self.domain_id!r}: dataset is empty")
        if self.role not in (ROLE_SOURCE, ROLE_TARGET):
            raise ValidationError(f"role must be source|target, got {self.role!r}")
        bad = {s.domain_id for s in samples} - {self.domain_id}
        if bad:
            raise ValidationError(
                f"samples from domains {sorted(bad)} mixed into {self.domain_id!r}"
            )
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def rp_ids(self) -> list:
        return sorted({s.rp_id for s in self.samples})


@dataclass(frozen=True)
class SplitSpec:
    """Reference-point train/test split parameters.

    Attributes:
        test_rp_ratio: fraction of RPs held out for testing, in (0, 1).
        seed: RNG seed for the partition draw.
        target_train_fraction: share of the target domain's train-side
            samples kept for (unlabeled) training, in (0, 1].
    """

    test_rp_ratio: float
    seed: int
    target_train_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.test_rp_ratio < 1.0:
            raise ValidationError(
                f"test_rp_ratio must lie in (0, 1), got {self.test_rp_ratio}"
            )
        if not 0.0 < self.target_train_fraction <= 1.0:
            raise ValidationError(
                "target_train_fraction must lie in (0, 1], got "
                f"{self.target_train_fraction}"
            )


def split_by_rp(datasets, spec: SplitSpec):
    """Partition every dataset into train/test by reference point.

    The same RP partition is applied to every domain so train and test
    positions agree across domains. round(test_rp_ratio * G) RPs go to
    test, drawn without replacement from the sorted union of rp_ids.

    Args:
        datasets: list of DomainDataset.
        spec: SplitSpec with ratio and seed.

    Returns:
        List of (train, test) DomainDataset pairs, aligned with the input.

    Raises:
        ValidationError: degenerate partition (0 or all RPs in test), or a
            dataset ends up with an empty side.
    """
    if not datasets:
        raise ValidationError("no datasets to split")
    all_rps = sorted({s.rp_id for ds in datasets for s in ds.samples})
    g = len(all_rps)
    n_test = int(round(spec.test_rp_ratio * g))
    if n_test <= 0 or n_test >= g:
        raise ValidationError(
            f"degenerate split: {n_test} of {g} RPs in test "
            f"(ratio {spec.test_rp_ratio})"
        )
    rng = np.random.default_rng(spec.seed)
    test_rps = set(rng.choice(np.asarray(all_rps), size=n_test, replace=False).tolist())

    out = []
    for ds in datasets:
        train = [s for s in ds.samples if s.rp_id not in test_rps]
        test = [s for s in ds.samples if s.rp_id in test_rps]
        if not train or not test:
            raise ValidationError(
                f"domain {ds.domain_id!r}: split left an empty partition "
                f"(train {len(train)}, test {len(test)})"
            )
        if ds.role == ROLE_TARGET and spec.target_train_fraction < 1.0:
            n_keep = int(round(spec.target_train_fraction * len(train)))
            if n_keep < 1:
                raise ValidationError(
                    f"domain {ds.domain_id!r}: target_train_fraction "
                    f"{spec.target_train_fraction} keeps 0 of {len(train)} samples"
                )
            keep = rng.choice(len(train), size=n_keep, replace=False)
            train = [train[i] for i in sorted(keep.tolist())]
        out.append(
            (
                DomainDataset(tuple(train), ds.domain_id, ds.role),
                DomainDataset(tuple(test), ds.domain_id, ds.role),
            )
        )
    return out


def _packet_record(rec: CsiRecording, v: int) -> dict:
    return {
        "rp_id": rec.rp_id,
        "pos": [rec.pos[0], rec.pos[1]],
        "domain": rec.domain_id,
        "packet": v,
        "amp": rec.amp[v].tolist(),
        "phase": rec.phase[v].tolist(),
    }


def save_recordings(recordings, path) -> None:
    """Write recordings as JSON Lines, one packet per line.

    Groups are emitted sorted by (domain_id, rp_id) with packets ascending,
    so identical inputs produce byte-identical files.
    """
    recs = sorted(recordings, key=lambda r: (r.domain_id, r.rp_id))
    with open(path, "w", encoding="utf-8") as fh:
        for rec in recs:
            for v in range(rec.n_packets):
                fh.write(json.dumps(_packet_record(rec, v)) + "\n")


def load_recordings(path):
    """Parse a JSON Lines CSI dataset into recordings.

    Args:
        path: file with one packet object per line (see module docstring).

    Returns:
        List of CsiRecording, one per (domain, rp_id) group, sorted by
        (domain_id, rp_id), packets ordered by packet index.

    Raises:
        ValidationError: malformed line (named by line number), inconsistent
            shapes or positions within a group, or duplicate packet index.
    """
    required = ("rp_id", "pos", "domain", "packet", "amp", "phase")
    groups: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc})") from exc
            for key in required:
                if key not in obj:
                    raise ValidationError(f"line {lineno}: missing key {key!r}")
            try:
                amp = np.asarray(obj["amp"], dtype=np.float64)
                phase = np.asarray(obj["phase"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"line {lineno}: ragged amp/phase") from exc
            if amp.ndim != 2 or amp.shape != phase.shape:
                raise ValidationError(
                    f"line {lineno}: amp/phase must be matching [M, N] matrices, "
                    f"got {amp.shape} / {phase.shape}"
                )
            key = (str(obj["domain"]), int(obj["rp_id"]))
            entry = groups.setdefault(
                key, {"pos": tuple(map(float, obj["pos"])), "shape": amp.shape,
                      "packets": {}}
            )
            if tuple(map(float, obj["pos"])) != entry["pos"]:
                raise ValidationError(
                    f"line {lineno}: pos differs within group {key}"
                )
            if amp.shape != entry["shape"]:
                raise ValidationError(
                    f"line {lineno}: shape {amp.shape} differs from group "
                    f"shape {entry['shape']}"
                )
            v = int(obj["packet"])
            if v in entry["packets"]:
                raise ValidationError(
                    f"line {lineno}: duplicate packet {v} in group {key}"
                )
            entry["packets"][v] = (amp, phase)

    if not groups:
        raise ValidationError(f"{path}: no packets found")
    recordings = []
    for (domain, rp_id), entry in sorted(groups.items()):
        order = sorted(entry["packets"])
        amp = np.stack([entry["packets"][v][0] for v in order])
        phase = np.stack([entry["packets"][v][1] for v in order])
        recordings.append(
            CsiRecording(rp_id=rp_id, pos=entry["pos"], domain_id=domain,
                         amp=amp, phase=phase)
        )
    return recordings
