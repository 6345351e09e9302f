"""Pipeline configuration: INI-style text, strict keys, hashable.

Every field has a default; unknown sections or keys are rejected so typos
fail loudly.  The canonical hash of the effective config is recorded in every
output manifest.  `T2L_SEED` in the environment overrides `pipeline.seed`
(the only environment override).
"""

import configparser
import hashlib
import os

import numpy as np


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "pipeline": {
        "preset": "desk",
        "seed": 0,
        "pano_h": 128,
        "pano_w": 256,
    },
    "data": {
        "scenes": 8,
        "rotations": 10,
        "train_frac": 0.8,
        "pairs_per_pano": 6,
        "pair_base": 32,
        "sigma": 0.83,
        "calib_policy": "skip",
    },
    "vq": {
        "codebook_size": 256,
        "code_dim": 64,
        "global_input_h": 32,
        "global_input_w": 64,
        "global_compression": 8,
        "local_patch": 64,
        "local_compression": 16,
        "base_channels": 16,
        "max_channels": 64,
        "beta_commit": 0.25,
        "steps": 1200,
        "batch_size": 4,
        "lr": 0.004,
    },
    "embedding": {
        "dim": 64,
        "alpha": 0.25,
        "knn_k": 5,
        "tau": 0.07,
        "provider": "toy",
    },
    "sampler": {
        "layers": 2,
        "heads": 4,
        "width": 128,
        "context": 256,
        "global_steps": 1200,
        "local_steps": 1200,
        "local_patches_per_pano": 6,
        "lr": 0.001,
        "con_weight": 1.0,
        "temperature": 1.0,
        "top_k": 100,
        "window": 4,
        "stride": 2,
    },
    "sritmo": {
        "code_dim": 64,
        "enc_width": 64,
        "hidden": 256,
        "steps": 2500,
        "batch_pairs": 4,
        "samples_per_step": 256,
        "lr": 0.001,
    },
    "ablations": {
        "no_global": False,
        "no_sp": False,
        "no_spe": False,
        "no_knn": False,
        "no_lcon": False,
        "single_mlp": False,
    },
    "sphere": {
        "eq1_verbatim_axes": False,
    },
    "raster": {
        "tonemap": "luminance",
    },
}


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(str(raw).strip())
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected number, got {raw!r}") from None
    return str(raw).strip()


class PipelineConfig:
    def __init__(self, values=None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        for section, kv in (values or {}).items():
            for key, val in kv.items():
                self.set(section, key, val)
        env_seed = os.environ.get("T2L_SEED")
        if env_seed is not None:
            self.values["pipeline"]["seed"] = _coerce("pipeline", "seed", env_seed)

    @classmethod
    def load(cls, path):
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = {s: dict(parser.items(s)) for s in parser.sections()}
        return cls(values)

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, value)

    def get(self, section, key):
        return self.values[section][key]

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["pipeline"]["seed"]

    def canonical(self):
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]}")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    # ---- derived module configs -------------------------------------------

    def tokenizer_config(self, which):
        from .vq import TokenizerConfig

        v = self.values["vq"]
        common = dict(
            codebook_size=v["codebook_size"],
            code_dim=v["code_dim"],
            base_channels=v["base_channels"],
            max_channels=v["max_channels"],
            beta_commit=v["beta_commit"],
            steps=v["steps"],
            batch_size=v["batch_size"],
            lr=v["lr"],
            seed=self.seed,
        )
        if which == "global":
            return TokenizerConfig(
                input_hw=(v["global_input_h"], v["global_input_w"]),
                compression=v["global_compression"],
                circular=True,
                **common,
            )
        if which == "local":
            return TokenizerConfig(
                input_hw=(v["local_patch"], v["local_patch"]),
                compression=v["local_compression"],
                circular=False,
                **common,
            )
        raise ConfigError(f"unknown tokenizer {which!r}")

    def transformer_config(self, vocab):
        from .samplers import TransformerConfig

        s = self.values["sampler"]
        return TransformerConfig(
            vocab=vocab,
            n_layers=s["layers"],
            n_heads=s["heads"],
            width=s["width"],
            context=s["context"],
            seed=self.seed,
        )

    def global_sampler_config(self):
        from .samplers import GlobalSamplerConfig

        v, e, s, a = (self.values[k] for k in ("vq", "embedding", "sampler", "ablations"))
        gh = v["global_input_h"] // v["global_compression"]
        gw = v["global_input_w"] // v["global_compression"]
        return GlobalSamplerConfig(
            vocab=v["codebook_size"],
            grid_hw=(gh, gw),
            cond_dim=e["dim"],
            knn_k=e["knn_k"],
            alpha=e["alpha"],
            tau=e["tau"],
            con_weight=s["con_weight"],
            no_knn=a["no_knn"],
            no_lcon=a["no_lcon"],
            transformer=self.transformer_config(v["codebook_size"]),
            steps=s["global_steps"],
            lr=s["lr"],
            seed=self.seed,
        )

    def local_sampler_config(self):
        from .samplers import LocalSamplerConfig

        v, s, a = (self.values[k] for k in ("vq", "sampler", "ablations"))
        return LocalSamplerConfig(
            vocab=v["codebook_size"],
            global_vocab=v["codebook_size"],
            window=s["window"],
            stride=s["stride"],
            no_global=a["no_global"],
            no_spe=a["no_spe"],
            no_sp=a["no_sp"],
            transformer=self.transformer_config(v["codebook_size"]),
            steps=s["local_steps"],
            lr=s["lr"],
            seed=self.seed,
        )

    def sritmo_config(self):
        from .sritmo import SrItmoConfig

        r = self.values["sritmo"]
        return SrItmoConfig(
            code_dim=r["code_dim"],
            enc_width=r["enc_width"],
            hidden=r["hidden"],
            patch_size=self.values["data"]["pair_base"],
            single_mlp=self.values["ablations"]["single_mlp"],
            steps=r["steps"],
            batch_pairs=r["batch_pairs"],
            samples_per_step=r["samples_per_step"],
            lr=r["lr"],
            seed=self.seed,
        )
