"""Fingerprint image construction and the on-disk fingerprint store.

A recording of V packets is cut into K = floor((V - T) / stride) + 1
windows of T packets; the remainder is discarded. Each window yields an
amplitude image and a phase image of shape [M*N, T]: rows stack the
(antenna, subcarrier) streams antenna-major, columns are packets.

The store is a directory holding manifest.json plus one raw data file per
domain: float32 little-endian, row-major, shaped [n_samples, 2, H, W]
with the amplitude stream first.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import (
    ROLE_SOURCE,
    ROLE_TARGET,
    CsiRecording,
    DomainDataset,
    FingerprintSample,
)
from .errors import ValidationError

STORE_FORMAT = "fingerprint-store-v1"


@dataclass(frozen=True)
class WindowSpec:
    """Windowing and normalization parameters.

    length: packets per window (T).
    stride: window step; equal to length means non-overlapping.
    normalize: "per_image_minmax" maps each image to [0, 1] (constant
        images become zeros); "none" keeps raw values.
    """

    length: int = 90
    stride: int = 90
    normalize: str = "per_image_minmax"

    def __post_init__(self):
        if self.length < 1 or self.stride < 1:
            raise ValidationError(
                f"length and stride must be >= 1, got {self.length}/{self.stride}"
            )
        if self.normalize not in ("per_image_minmax", "none"):
            raise ValidationError(f"unknown normalize mode {self.normalize!r}")


def minmax_normalize(img):
    """Scale an image to [0, 1]; constant images map to zeros.

    Returns:
        (normalized, lo, hi) so originals are recoverable as
        normalized * (hi - lo) + lo.
    """
    a = np.asarray(img, dtype=np.float64)
    lo = float(a.min())
    hi = float(a.max())
    if hi == lo:
        return np.zeros_like(a), lo, hi
    return (a - lo) / (hi - lo), lo, hi


def window_count(n_packets: int, spec: WindowSpec) -> int:
    """Number of full windows a packet stream yields."""
    if n_packets < spec.length:
        return 0
    return (n_packets - spec.length) // spec.stride + 1


def build_fingerprints(rec: CsiRecording, spec: WindowSpec = WindowSpec()):
    """Cut one recording into fingerprint image pairs.

    Args:
        rec: conditioned recording [V, M, N].
        spec: WindowSpec; V must cover at least one window.

    Returns:
        List of K FingerprintSample with images [M*N, T].

    Raises:
        ValidationError: V < length.
    """
    v, m, n = rec.amp.shape
    k = window_count(v, spec)
    if k < 1:
        raise ValidationError(
            f"recording of {v} packets shorter than one window of {spec.length}"
        )
    samples = []
    for i in range(k):
        w0 = i * spec.stride
        sl = slice(w0, w0 + spec.length)
        # [T, M, N] -> rows antenna-major: row m*N + n, columns packets
        img_a = rec.amp[sl].reshape(spec.length, m * n).T
        img_p = rec.phase[sl].reshape(spec.length, m * n).T
        if spec.normalize == "per_image_minmax":
            img_a, _, _ = minmax_normalize(img_a)
            img_p, _, _ = minmax_normalize(img_p)
        samples.append(
            FingerprintSample(
                image_amp=img_a,
                image_phase=img_p,
                pos=rec.pos,
                rp_id=rec.rp_id,
                domain_id=rec.domain_id,
            )
        )
    return samples


def dataset_from_recordings(recordings, spec: WindowSpec = WindowSpec(), roles=None):
    """Window a batch of recordings and group the samples by domain.

    Args:
        recordings: list of CsiRecording (mixed domains allowed).
        spec: WindowSpec.
        roles: optional dict domain_id -> "source"|"target"; defaults to
            "source" for every domain.

    Returns:
        List of DomainDataset sorted by domain_id.
    """
    roles = roles or {}
    by_domain: dict = {}
    for rec in recordings:
        by_domain.setdefault(rec.domain_id, []).extend(build_fingerprints(rec, spec))
    out = []
    for domain_id in sorted(by_domain):
        role = roles.get(domain_id, ROLE_SOURCE)
        out.append(DomainDataset(tuple(by_domain[domain_id]), domain_id, role))
    return out


def save_store(path, datasets) -> None:
    """Write datasets to a fingerprint store directory.

    Identical inputs produce byte-identical stores: the manifest is sorted
    and data files are raw row-major dumps in sample order.
    """
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": STORE_FORMAT,
        "dtype": "<f4",
        "layout": ["sample", "stream", "row", "col"],
        "streams": ["amp", "phase"],
        "domains": {},
    }
    for idx, ds in enumerate(sorted(datasets, key=lambda d: d.domain_id)):
        h, w = ds.samples[0].image_amp.shape
        fname = f"domain_{idx:03d}.f32"
        block = np.empty((len(ds.samples), 2, h, w), dtype="<f4")
        labels = []
        for i, s in enumerate(ds.samples):
            if s.image_amp.shape != (h, w):
                raise ValidationError(
                    f"domain {ds.domain_id!r}: sample {i} shape "
                    f"{s.image_amp.shape} != {(h, w)}"
                )
            block[i, 0] = s.image_amp
            block[i, 1] = s.image_phase
            labels.append({"rp_id": s.rp_id, "x": s.pos[0], "y": s.pos[1]})
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(block.tobytes())
        manifest["domains"][ds.domain_id] = {
            "file": fname,
            "role": ds.role,
            "n_samples": len(ds.samples),
            "height": h,
            "width": w,
            "labels": labels,
        }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_store(path):
    """Load a fingerprint store directory back into DomainDatasets.

    Raises:
        ValidationError: missing manifest, unknown format, or a data file
            whose size disagrees with the manifest.
    """
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise ValidationError(f"{path}: manifest.json not found")
    with open(mpath, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != STORE_FORMAT:
        raise ValidationError(f"unknown store format {manifest.get('format')!r}")
    datasets = []
    for domain_id in sorted(manifest["domains"]):
        meta = manifest["domains"][domain_id]
        n, h, w = meta["n_samples"], meta["height"], meta["width"]
        raw = np.fromfile(os.path.join(path, meta["file"]), dtype="<f4")
        if raw.size != n * 2 * h * w:
            raise ValidationError(
                f"domain {domain_id!r}: file holds {raw.size} floats, "
                f"manifest expects {n * 2 * h * w}"
            )
        block = raw.reshape(n, 2, h, w).astype(np.float64)
        samples = []
        for i, label in enumerate(meta["labels"]):
            samples.append(
                FingerprintSample(
                    image_amp=block[i, 0],
                    image_phase=block[i, 1],
                    pos=(label["x"], label["y"]),
                    rp_id=label["rp_id"],
                    domain_id=domain_id,
                )
            )
        role = meta["role"]
        if role not in (ROLE_SOURCE, ROLE_TARGET):
            raise ValidationError(f"domain {domain_id!r}: bad role {role!r}")
        datasets.append(DomainDataset(tuple(samples), domain_id, role))
    return datasets
