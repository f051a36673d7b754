"""Experiment configuration: one YAML file, flag overrides, defaults.

The config is a flat two-level mapping (section -> key -> scalar).
Every key has a default, so an empty file or no file at all is a valid
experiment; unknown sections or keys are rejected by name. Values are
plain YAML scalars, which keeps `--set section.key=value` round-trips
trivial. Builder methods hand out the typed config objects the library
modules consume, so range validation lives with those dataclasses.

The `train.lambda` key is spelled like the loss weight it controls;
it maps onto the `lam` field of TrainConfig (lambda is reserved in
Python).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import yaml

from .errors import ValidationError
from .filters import ButterworthConfig, HampelConfig, WaveletConfig
from .fingerprints import WindowSpec
from .network import NetConfig
from .phase import PhaseCalibConfig
from .pipeline import PipelineConfig
from .synth import SceneSpec, default_benchmark_scene
from .training import TrainConfig

DEFAULTS = {
    "scene": {
        "n_sources": 3,
        "grid_side": 4,
        "spacing": 1.0,
        "n_packets": 121,
        "n_subcarriers": 30,
        "n_antennas": 2,
        "noise_std": 0.02,
        "outlier_rate": 0.02,
        "spike_gain": 6.0,
        "sto_range_ns": 50.0,
        "path_fluctuation": 0.02,
        "source_gain_std": 0.05,
        "target_gain_std": 0.40,
        "target_extra_delay_ns": 450.0,
        "target_extra_gain": 0.5,
        "seed": 0,
    },
    "qc": {
        "hampel_window": 31,
        "hampel_n_sigmas": 3.0,
        "wavelet_levels": 3,
        "wavelet_rule": "universal",
        "wavelet_threshold": None,
        "butter_order": 4,
        "butter_cutoff_hz": 10.0,
        "butter_fs_hz": 100.0,
    },
    "lc": {
        "f_delta_hz": 312500.0,
    },
    "fingerprint": {
        "window": 11,
        "stride": 11,
        "normalize": "per_image_minmax",
    },
    "net": {
        "nf": 4,
        "kernels": [3, 5],
        "reduction_r": 4,
        "latent": 16,
        "regressor_hidden": 32,
        "dropout_p": 0.1,
        "bn_momentum": 0.1,
        "bn_eps": 1.0e-5,
    },
    "train": {
        "lr": 0.002,
        "batch": 22,
        "max_epochs": 30,
        "patience": 10,
        "lambda": 0.5,
        "rho": 0.5,
        "weight_decay": 1.0e-4,
        "seed": 0,
        "kernel": "rbf",
        "kernel_gamma": None,
    },
    "eval": {
        "knn_k": 10,
        "knn_feature": "amp",
        "split_ratio": 0.25,
        "split_seed": 0,
    },
    "io": {
        "out_dir": "runs",
        "plots": True,
    },
}


def _checked_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for section, mapping in extra.items():
        if section not in out:
            raise ValidationError(
                f"unknown config section {section!r}; known: {sorted(out)}"
            )
        if not isinstance(mapping, dict):
            raise ValidationError(f"section {section!r} must be a mapping")
        for key, value in mapping.items():
            if key not in out[section]:
                raise ValidationError(
                    f"unknown key {section}.{key}; known: {sorted(out[section])}"
                )
            out[section][key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated two-level config mapping with typed builders."""

    sections: dict

    @classmethod
    def from_file(cls, path=None) -> "ExperimentConfig":
        """Load YAML over the defaults; path=None gives pure defaults."""
        if path is None:
            return cls(copy.deepcopy(DEFAULTS))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ValidationError(f"invalid YAML in {path}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValidationError(f"config root must be a mapping, got {type(raw)}")
        return cls(_checked_merge(DEFAULTS, raw))

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply `section.key=value` strings; values parse as YAML scalars."""
        extra: dict = {}
        for item in assignments:
            if "=" not in item:
                raise ValidationError(f"override {item!r} must look like section.key=value")
            dotted, value = item.split("=", 1)
            if dotted.count(".") != 1:
                raise ValidationError(f"override key {dotted!r} must be section.key")
            section, key = dotted.split(".")
            parsed = yaml.safe_load(value)
            # YAML 1.1 reads "1e9" as a string (wants 1.0e+9); coerce
            # numeric-looking strings when the default is a number
            anchor = self.sections.get(section, {}).get(key)
            if (isinstance(parsed, str)
                    and isinstance(anchor, (int, float))
                    and not isinstance(anchor, bool)):
                try:
                    parsed = float(parsed)
                except ValueError:
                    pass
            extra.setdefault(section, {})[key] = parsed
        return ExperimentConfig(_checked_merge(self.sections, extra))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Retarget every seeded stage at one root seed."""
        out = copy.deepcopy(self.sections)
        out["scene"]["seed"] = int(seed)
        out["train"]["seed"] = int(seed)
        out["eval"]["split_seed"] = int(seed)
        return ExperimentConfig(out)

    def scene(self) -> SceneSpec:
        s = self.sections["scene"]
        return default_benchmark_scene(
            n_sources=s["n_sources"],
            grid_side=s["grid_side"],
            spacing=s["spacing"],
            n_packets=s["n_packets"],
            noise_std=s["noise_std"],
            outlier_rate=s["outlier_rate"],
            source_gain_std=s["source_gain_std"],
            target_gain_std=s["target_gain_std"],
            target_extra_delay_ns=s["target_extra_delay_ns"],
            target_extra_gain=s["target_extra_gain"],
            seed=s["seed"],
            n_subcarriers=s["n_subcarriers"],
            n_antennas=s["n_antennas"],
            spike_gain=s["spike_gain"],
            sto_range_s=s["sto_range_ns"] * 1e-9,
            path_fluctuation=s["path_fluctuation"],
        )

    def pipeline(self) -> PipelineConfig:
        q = self.sections["qc"]
        f = self.sections["fingerprint"]
        return PipelineConfig(
            hampel=HampelConfig(window=q["hampel_window"],
                                n_sigmas=q["hampel_n_sigmas"]),
            wavelet=WaveletConfig(levels=q["wavelet_levels"],
                                  threshold_rule=q["wavelet_rule"],
                                  threshold=q["wavelet_threshold"]),
            butterworth=ButterworthConfig(order=q["butter_order"],
                                          cutoff_hz=q["butter_cutoff_hz"],
                                          fs_hz=q["butter_fs_hz"]),
            phase=PhaseCalibConfig(f_delta_hz=self.sections["lc"]["f_delta_hz"]),
            window=WindowSpec(length=f["window"], stride=f["stride"],
                              normalize=f["normalize"]),
        )

    def net(self) -> NetConfig:
        n = self.sections["net"]
        return NetConfig(
            nf=n["nf"],
            kernels=tuple(n["kernels"]),
            reduction_r=n["reduction_r"],
            latent=n["latent"],
            regressor_hidden=n["regressor_hidden"],
            dropout_p=n["dropout_p"],
            bn_momentum=n["bn_momentum"],
            bn_eps=n["bn_eps"],
        )

    def train(self) -> TrainConfig:
        t = self.sections["train"]
        return TrainConfig(
            lr=t["lr"],
            batch=t["batch"],
            max_epochs=t["max_epochs"],
            patience=t["patience"],
            lam=t["lambda"],
            rho=t["rho"],
            weight_decay=t["weight_decay"],
            seed=t["seed"],
            kernel_kind=t["kernel"],
            kernel_gamma=t["kernel_gamma"],
        )

    def section(self, name: str) -> dict:
        return dict(self.sections[name])
