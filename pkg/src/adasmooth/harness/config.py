"""Experiment configuration: sectioned key/value files with documented defaults.

A config file only needs the keys it changes; everything else falls back to
:data:`DEFAULT_CONFIG`. Unknown sections or keys are rejected so typos do not
silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attacks import AttackSpec
from ..data import SyntheticSpec
from ..errors import ConfigError
from ..mixing import MixConfig
from ..mixnet import MixerTrainConfig
from ..nncore.train import TrainConfig

DEFAULT_CONFIG = """\
[run]
# Global seed; per-stage seeds below are offsets mixed with it.
seed = 0
out = out
# Processes used for independent grid points (results do not depend on it).
workers = 1

[data]
# two-moons | gaussian-blobs | concentric-circles
kind = two-moons
n_per_class = 500
noise = 0.12
n_classes = 2
# Embed the 2-D pattern in this many dimensions (orthonormal map + off-plane noise).
ambient_dim = 16
offplane_noise = 0.02
seed = 0
train_fraction = 0.8
# Attacks are confined to the training bounding box padded by this much.
domain_pad = 0.2

[g]
# Standard (accurate) base classifier.
hidden = 64,64
activation = relu
trainer = standard
epochs = 60
lr = 0.003
batch_size = 64
weight_decay = 0.0
noise_std = 0.0
seed = 1
attack_eps = 0.0
attack_steps = 10
beta = 6.0

[h]
# Robust base classifier; trainer = adversarial | trades | standard.
hidden = 64,64
activation = relu
trainer = adversarial
epochs = 150
lr = 0.01
batch_size = 64
weight_decay = 0.0
noise_std = 0.0
seed = 2
attack_eps = 0.2
attack_steps = 10
beta = 6.0

[mix]
variant = final
alpha = 0.5
r_option = one
space = probabilities
hardmax_g = false
s_g = 1.0
s_h = 1.0

[attack]
# Evaluation threat model. ensemble = true uses the multi-loss ensemble.
norm = linf
eps = 0.15
steps = 20
restarts = 5
ensemble = true
seed = 0
# Weight of the alpha-suppression term in the adaptive attack.
adaptive_lam = 0.5

[sweep]
alphas = 0.0,0.1,0.2,0.3,0.4,0.5,0.55,0.6,0.7,0.8,0.9,1.0
# Grid for comparing mixing rules (MIX attack only); dense near 1, where the
# probability rule's clean accuracy moves from g's towards h's.
rule_alphas = 0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.92,0.94,0.96,0.97,0.98,0.99,1.0
# The reference rule (final, probabilities, R = one) is traced densely so any
# other rule can be compared with it at matched clean accuracy.
reference_alphas = 0.0:0.5:0.1,0.55:1.0:0.01
rules = final:probabilities:one,smo1:logits:one,smo2:logits:one,smo3:logits:one,smo3:logits:grad_i,smo3:logits:grad_max,smo3:logits:grad_ratio

[transfer]
alpha_t = 0.0,0.25,0.5,0.75,1.0

[mixer]
c_ce = 1.0
c_bce = 0.5
c_prod = 0.2
epochs = 30
lr = 0.01
weight_decay = 0.0001
batch_size = 64
scale = 2.0
alpha_min = 0.0
alpha_max = 1.0
ema_decay = 0.8
hidden = 64,64
reduce_dim = 8
# Training attack pool (modes), their step count, and radius randomization.
pool = MIX-whitebox,STD,ROB
train_steps = 10
randomize = true
# Epochs during which the running statistics of the raw mixer output keep
# updating; later epochs use them frozen. Matching epochs tracks them throughout.
stats_epochs = 30
# The output shift is calibrated on the training split to the clean accuracy
# acc(h) + calibrate_fraction * (acc(g) - acc(h)).
calibrate_fraction = 0.5
seed = 0

[certify]
# Separate 2-D problem so smoothing can use exact quadrature.
kind = two-moons
n_per_class = 300
noise = 0.1
data_seed = 3
g_hidden = 32,32
g_epochs = 60
g_lr = 0.003
# Robust bases: tanh nets trained on Gaussian-noised inputs. The smoothed
# base for each sigma is trained with noise sigma; the Lipschitz base with
# lip_noise and certified through its analytic l2 bound.
base_hidden = 16,16
base_epochs = 100
base_lr = 0.01
lip_noise = 0.1
sigmas = 0.25,0.5,1.0
alphas = 0.6,0.75,0.9,1.0
radii = 0.0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5,0.6,0.7,0.8,0.9,1.0
# quadrature (inputs <= 2-D) | mc
rs_method = quadrature
nodes = 16
n_samples = 10000
seed = 0

[confidence]
# Models reported: any of g, h, mixed (mixed uses [mix]).
models = g,h

[lipschitz]
# Probability-space local estimate on the first n_points validation inputs.
eps = 0.15
steps = 20
restarts = 1
n_points = 100
"""

_SECTIONS = configparser.ConfigParser(interpolation=None)
_SECTIONS.read_string(DEFAULT_CONFIG)


def _floats(s: str) -> tuple[float, ...]:
    """Comma-separated values; ``start:stop:step`` expands to an inclusive range."""
    out = []
    for item in (v.strip() for v in s.split(",")):
        if not item:
            continue
        if ":" in item:
            start, stop, step = (float(p) for p in item.split(":"))
            if not step > 0 or stop < start:
                raise ConfigError(f"bad range {item!r}")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            out.extend(round(start + k * step, 10) for k in range(n))
        else:
            out.append(float(item))
    return tuple(out)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    parser: configparser.ConfigParser

    # -- raw access ------------------------------------------------------------------
    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def getf(self, section: str, key: str) -> float:
        return self.parser.getfloat(section, key)

    def geti(self, section: str, key: str) -> int:
        return self.parser.getint(section, key)

    def getb(self, section: str, key: str) -> bool:
        return self.parser.getboolean(section, key)

    @property
    def seed(self) -> int:
        return self.geti("run", "seed")

    def stage_seed(self, section: str, key: str = "seed") -> int:
        """Seed of one stage, derived from the global seed so runs differ per global seed."""
        return self.seed * 1000 + self.geti(section, key)

    def hash(self) -> str:
        """Short digest of every resolved key except the output directory."""
        items = []
        for sec in sorted(self.parser.sections()):
            for key in sorted(self.parser[sec]):
                if (sec, key) != ("run", "out"):
                    items.append(f"{sec}.{key}={self.parser[sec][key].strip()}")
        return hashlib.sha256("\n".join(items).encode()).hexdigest()[:12]

    def dump(self) -> str:
        lines = []
        for sec in self.parser.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in self.parser[sec].items())
            lines.append("")
        return "\n".join(lines)

    # -- typed views -----------------------------------------------------------------
    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            kind=self.get("data", "kind"), n_per_class=self.geti("data", "n_per_class"),
            noise=self.getf("data", "noise"), seed=self.stage_seed("data"),
            n_classes=self.geti("data", "n_classes"), ambient_dim=self.geti("data", "ambient_dim"),
            offplane_noise=self.getf("data", "offplane_noise"),
        )

    def hidden(self, section: str, key: str = "hidden") -> tuple[int, ...]:
        return _ints(self.get(section, key))

    def train_config(self, section: str, domain=None) -> TrainConfig:
        attack = None
        if self.getf(section, "attack_eps") > 0:
            attack = AttackSpec(self.get("attack", "norm"), self.getf(section, "attack_eps"),
                                self.geti(section, "attack_steps"))
        return TrainConfig(
            epochs=self.geti(section, "epochs"), lr=self.getf(section, "lr"),
            batch_size=self.geti(section, "batch_size"), weight_decay=self.getf(section, "weight_decay"),
            seed=self.stage_seed(section), noise_std=self.getf(section, "noise_std"), attack=attack,
            beta=self.getf(section, "beta"), domain=domain,
        )

    def mix_config(self) -> MixConfig:
        return MixConfig(
            variant=self.get("mix", "variant"), alpha=self.getf("mix", "alpha"),
            r_option=self.get("mix", "r_option"), space=self.get("mix", "space"),
            hardmax_g=self.getb("mix", "hardmax_g"), s_g=self.getf("mix", "s_g"),
            s_h=self.getf("mix", "s_h"), norm=self.get("attack", "norm"),
        )

    def attack_spec(self, mode: str = "MIX-whitebox") -> AttackSpec:
        lam = self.getf("attack", "adaptive_lam") if mode == "MIX-adaptive" else 0.0
        return AttackSpec(self.get("attack", "norm"), self.getf("attack", "eps"),
                          self.geti("attack", "steps"), restarts=self.geti("attack", "restarts"),
                          mode=mode, lam=lam)

    def mixer_config(self, domain=None) -> MixerTrainConfig:
        pool = tuple(
            AttackSpec(self.get("attack", "norm"), self.getf("attack", "eps"),
                       self.geti("mixer", "train_steps"), mode=m.strip(),
                       randomize=self.getb("mixer", "randomize"))
            for m in self.get("mixer", "pool").split(",") if m.strip()
        )
        return MixerTrainConfig(
            c_ce=self.getf("mixer", "c_ce"), c_bce=self.getf("mixer", "c_bce"),
            c_prod=self.getf("mixer", "c_prod"), attacks=pool, lr=self.getf("mixer", "lr"),
            weight_decay=self.getf("mixer", "weight_decay"), epochs=self.geti("mixer", "epochs"),
            batch_size=self.geti("mixer", "batch_size"), seed=self.stage_seed("mixer"),
            scale=self.getf("mixer", "scale"), alpha_min=self.getf("mixer", "alpha_min"),
            alpha_max=self.getf("mixer", "alpha_max"), ema_decay=self.getf("mixer", "ema_decay"),
            hidden=self.hidden("mixer"), reduce_dim=self.geti("mixer", "reduce_dim"),
            bn_epochs=self.geti("mixer", "stats_epochs"), domain=domain,
        )

    def floats(self, section: str, key: str) -> tuple[float, ...]:
        return _floats(self.get(section, key))

    def rules(self) -> list[MixConfig]:
        out = []
        for item in self.get("sweep", "rules").split(","):
            parts = item.strip().split(":")
            if len(parts) != 3:
                raise ConfigError(f"sweep rule {item!r} must be variant:space:r_option")
            out.append(MixConfig(variant=parts[0], space=parts[1], r_option=parts[2],
                                 norm=self.get("attack", "norm")))
        return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``{"section.key": value}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(DEFAULT_CONFIG)
    if path is not None:
        user = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                user.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(parser, user)
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        _set(parser, sec, key, str(value))
    cfg = ExperimentConfig(parser)
    validate(cfg)
    return cfg


def _set(parser, sec, key, value):
    if not parser.has_section(sec):
        raise ConfigError(f"unknown config section [{sec}]")
    if key not in _SECTIONS[sec]:
        raise ConfigError(f"unknown config key {sec}.{key}")
    parser[sec][key] = value


def _merge(parser, user):
    for sec in user.sections():
        for key, value in user[sec].items():
            _set(parser, sec, key, value)


def validate(cfg: ExperimentConfig) -> None:
    """Build every typed view once so bad values fail before any work starts."""
    try:
        cfg.data_spec()
        cfg.train_config("g")
        cfg.train_config("h")
        cfg.mix_config()
        cfg.attack_spec("MIX-adaptive")
        if cfg.getb("attack", "ensemble") and cfg.geti("attack", "restarts") < 2:
            raise ConfigError("the attack ensemble needs restarts >= 2")
        cfg.mixer_config()
        if not 0.0 <= cfg.getf("mixer", "calibrate_fraction") <= 1.0:
            raise ConfigError("mixer.calibrate_fraction must lie in [0, 1]")
        cfg.rules()
        for sec, key in (("sweep", "alphas"), ("sweep", "rule_alphas"), ("sweep", "reference_alphas"),
                         ("transfer", "alpha_t"),
                         ("certify", "sigmas"), ("certify", "alphas"), ("certify", "radii")):
            grid = cfg.floats(sec, key)
            if not grid:
                raise ConfigError(f"grid {sec}.{key} is empty")
        if cfg.geti("run", "workers") < 1:
            raise ConfigError("run.workers must be >= 1")
        for m in cfg.get("confidence", "models").split(","):
            if m.strip() not in ("g", "h", "mixed"):
                raise ConfigError(f"unknown confidence model {m!r}")
        for sec in ("g", "h"):
            if cfg.get(sec, "trainer") not in ("standard", "adversarial", "trades"):
                raise ConfigError(f"{sec}.trainer must be standard, adversarial or trades")
            if not cfg.hidden(sec):
                raise ConfigError(f"{sec}.hidden needs at least one layer")
    except ConfigError:
        raise
    except (ValueError, KeyError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
