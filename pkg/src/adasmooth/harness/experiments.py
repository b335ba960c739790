"""Experiment stages and the full campaign.

Every stage is a pure function of the configuration (and of models it is
handed), so the same config and seed always produce the same tables. Grid
points use seeds derived from the config only, never from execution order,
which keeps results identical whatever ``run.workers`` is.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..attacks import AttackSpec, apgd_lite, attack_mixed, lp_distance, pgd
from ..certify import (LipschitzProfile, RsModel, analytic_profile, certified_accuracy,
                       certify_mixed, local_lipschitz_estimate, rs_lipschitz_constant)
from ..data import SyntheticSpec, generate, split
from ..errors import ConfigError, FormatError
from ..mixing import MixConfig, MixedClassifier, probabilities
from ..mixnet import calibrate_shift, load_mixer, save_mixer, train_mixer
from ..nncore.dataset import Dataset
from ..nncore.losses import top_two_gap
from ..nncore.net import Net, init_net, load_net, save_net
from ..nncore.train import TrainConfig, accuracy, train_adversarial, train_standard, train_trades
from .config import ExperimentConfig
from .csvio import write_table

TRAINERS = {"standard": train_standard, "adversarial": train_adversarial, "trades": train_trades}
MIX_MODES = ("MIX-whitebox", "MIX-grayblend", "MIX-adaptive", "STD", "ROB")

SWEEP_COLUMNS = ("variant", "space", "r_option", "alpha", "clean", "std", "rob", "mix")
RULE_COLUMNS = ("variant", "space", "r_option", "alpha", "clean", "mix")
TRANSFER_COLUMNS = ("alpha_t", "g", "h", "target", "max_distance")
CONFIDENCE_COLUMNS = ("model", "condition", "accuracy", "n_correct", "n_incorrect",
                      "gap_correct_mean", "gap_correct_median", "gap_incorrect_mean",
                      "gap_incorrect_median")
CURVE_COLUMNS = ("method", "sigma", "alpha", "radius", "certified_accuracy")
COMPARE_COLUMNS = ("sigma", "alpha", "n_certified", "n_rs_ge_lipschitz", "min_rs_minus_lipschitz",
                   "mean_rs", "mean_lipschitz")
PARETO_COLUMNS = ("radius", "sigma", "alpha", "clean_accuracy", "certified_accuracy", "on_frontier")
LIPSCHITZ_COLUMNS = ("model", "n", "eps", "mean", "median", "max", "analytic_bound")
MIXER_COLUMNS = ("model", "condition", "accuracy", "mean_alpha")
BASE_COLUMNS = ("model", "clean", "attacked")


# -- data and base models -------------------------------------------------------------------
@dataclass(frozen=True)
class Toy:
    train: Dataset
    val: Dataset
    domain: tuple


def build_data(cfg: ExperimentConfig) -> Toy:
    data = generate(cfg.data_spec())
    train, val = split(data, cfg.stage_seed("data"), cfg.getf("data", "train_fraction"))
    return Toy(train, val, train.domain(pad=cfg.getf("data", "domain_pad")))


def _train(sizes, activation, trainer: str, data: Dataset, tc: TrainConfig) -> Net:
    net = init_net(sizes, np.random.default_rng(tc.seed), activation)
    return TRAINERS[trainer](net, data, tc)


def train_base(cfg: ExperimentConfig, section: str, toy: Toy) -> Net:
    """Train the standard (``g``) or robust (``h``) base from its config section."""
    if section not in ("g", "h"):
        raise ConfigError("base section must be 'g' or 'h'")
    tc = cfg.train_config(section, domain=toy.domain)
    trainer = cfg.get(section, "trainer")
    if trainer != "standard" and tc.attack is None:
        raise ConfigError(f"{section}.trainer = {trainer} needs attack_eps > 0")
    sizes = [toy.train.dim, *cfg.hidden(section), toy.train.n_classes]
    return _train(sizes, cfg.get(section, "activation"), trainer, toy.train, tc)


def _attack_seed(cfg: ExperimentConfig) -> int:
    return cfg.stage_seed("attack")


def _attack(cfg, model, x, y, spec, domain):
    if cfg.getb("attack", "ensemble"):
        return apgd_lite(model, x, y, spec, domain, _attack_seed(cfg))
    return pgd(model, x, y, spec, domain, _attack_seed(cfg))


def _attack_mix(cfg, mc, x, y, spec, domain):
    return attack_mixed(mc, x, y, spec, domain, _attack_seed(cfg), ensemble=cfg.getb("attack", "ensemble"))


def base_table(cfg: ExperimentConfig, g: Net, h: Net, toy: Toy) -> list[list]:
    spec = cfg.attack_spec()
    rows = []
    for name, net in (("g", g), ("h", h)):
        adv = _attack(cfg, net, toy.val.x, toy.val.y, spec, toy.domain)
        rows.append([name, accuracy(net, toy.val), adv.accuracy])
    return rows


# -- grid helper ----------------------------------------------------------------------------
def _grid_map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


# -- alpha sweeps ---------------------------------------------------------------------------
def _sweep_point(cfg, g, h, mix: MixConfig, toy: Toy, modes: tuple[str, ...]) -> list[float]:
    mc = MixedClassifier(g, h, mix)
    out = [accuracy(mc, toy.val)]
    for mode in modes:
        out.append(_attack_mix(cfg, mc, toy.val.x, toy.val.y, cfg.attack_spec(mode), toy.domain).accuracy)
    return out


def sweep_alpha(cfg: ExperimentConfig, g: Net, h: Net, toy: Toy, mix: MixConfig | None = None,
                alphas=None) -> list[list]:
    """Clean and STD/ROB/MIX-attacked accuracy of one mixing rule along the alpha grid."""
    mix = mix or cfg.mix_config()
    alphas = sorted(cfg.floats("sweep", "alphas") if alphas is None else alphas)
    items = [(cfg, g, h, replace(mix, alpha=a, gamma=None), toy, ("STD", "ROB", "MIX-whitebox"))
             for a in alphas]
    res = _grid_map(_sweep_point, items, cfg.geti("run", "workers"))
    return [[mix.variant, mix.space, mix.r_option, a, *r] for a, r in zip(alphas, res)]


def is_reference(rule: MixConfig) -> bool:
    return (rule.variant, rule.space, rule.r_option) == ("final", "probabilities", "one")


def sweep_rules(cfg: ExperimentConfig, g: Net, h: Net, toy: Toy) -> list[list]:
    """MIX-attacked accuracy for every configured (variant, space, R) rule along its alpha grid.

    The reference rule uses the denser ``reference_alphas`` grid.
    """
    items, keys = [], []
    for rule in cfg.rules():
        grid = "reference_alphas" if is_reference(rule) else "rule_alphas"
        for a in sorted(cfg.floats("sweep", grid)):
            items.append((cfg, g, h, replace(rule, alpha=a, gamma=None), toy, ("MIX-whitebox",)))
            keys.append((rule.variant, rule.space, rule.r_option, a))
    res = _grid_map(_sweep_point, items, cfg.geti("run", "workers"))
    return [[*k, *r] for k, r in zip(keys, res)]


# -- transfer matrix ------------------------------------------------------------------------
def save_adversarial(path: str | Path, x: np.ndarray, x_adv: np.ndarray, y: np.ndarray,
                     eps: float, norm: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, x=x, x_adv=x_adv, y=y, eps=np.float64(eps), norm=np.array(norm))
    return path


def load_adversarial(path: str | Path, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, float, str]:
    """Load a saved adversarial set, rejecting it if any point leaves the eps-ball."""
    with np.load(path) as z:
        x, x_adv, y, eps, norm = z["x"], z["x_adv"], z["y"], float(z["eps"]), str(z["norm"])
    if x.shape != x_adv.shape or len(y) != len(x):
        raise FormatError(f"{path}: inconsistent array shapes")
    dist = lp_distance(x_adv - x, norm)
    if np.any(dist > eps + tol):
        raise FormatError(f"{path}: perturbation {dist.max()} exceeds eps {eps}")
    return x_adv, y, eps, norm


def alpha_t_transfer_matrix(cfg: ExperimentConfig, g: Net, h: Net, toy: Toy, adv_dir: str | Path,
                            alpha_t=None) -> list[list]:
    """Attack the mixture at each alpha_t, save the sets, reload them, and score g, h and the target."""
    alpha_t = sorted(cfg.floats("transfer", "alpha_t") if alpha_t is None else alpha_t)
    spec = cfg.attack_spec("MIX-whitebox")
    rows = []
    for k, a in enumerate(alpha_t):
        mc = MixedClassifier(g, h, replace(cfg.mix_config(), alpha=a, gamma=None))
        res = _attack_mix(cfg, mc, toy.val.x, toy.val.y, spec, toy.domain)
        path = save_adversarial(Path(adv_dir) / f"alpha_t_{k}.npz", toy.val.x, res.x_adv, toy.val.y,
                                spec.eps, spec.norm)
        x_adv, y, _, norm = load_adversarial(path)
        scored = [float((probabilities(m, x_adv).argmax(axis=1) == y).mean()) for m in (g, h, mc)]
        rows.append([a, *scored, float(lp_distance(x_adv - toy.val.x, norm).max())])
    return rows


# -- confidence gaps ------------------------------------------------------------------------
def _stats(v: np.ndarray) -> tuple:
    if len(v) == 0:
        return None, None
    return float(v.mean()), float(np.median(v))


def gap_row(model, x: np.ndarray, y: np.ndarray) -> list:
    """Accuracy, counts, and mean/median top-two probability gap split by correctness."""
    probs = probabilities(model, x)
    correct = probs.argmax(axis=1) == y
    gap = top_two_gap(probs)
    return [float(correct.mean()), int(correct.sum()), int((~correct).sum()),
            *_stats(gap[correct]), *_stats(gap[~correct])]


def confidence_report(model, data: Dataset, specs: dict, domain=None, seed: int = 0,
                      name: str = "model") -> list[list]:
    """Gap table under clean data and each named attack.

    ``specs`` maps a condition name to ``(attack_fn, AttackSpec)`` where
    ``attack_fn`` is :func:`pgd` or :func:`apgd_lite`-like.
    """
    rows = [[name, "clean", *gap_row(model, data.x, data.y)]]
    for cond, (fn, spec) in specs.items():
        adv = fn(model, data.x, data.y, spec, domain, seed).x_adv
        rows.append([name, cond, *gap_row(model, adv, data.y)])
    return rows


def confidence_table(cfg: ExperimentConfig, g: Net, h: Net, toy: Toy) -> list[list]:
    spec = cfg.attack_spec()
    specs = {"pgd": (pgd, replace(spec, restarts=1)), "apgd-lite": (apgd_lite, spec)}
    models = {"g": g, "h": h, "mixed": MixedClassifier(g, h, cfg.mix_config())}
    rows = []
    for name in (m.strip() for m in cfg.get("confidence", "models").split(",")):
        rows += confidence_report(models[name], toy.val, specs, toy.domain, _attack_seed(cfg), name)
    return rows


# -- certification campaign -----------------------------------------------------------------
@dataclass
class CertifyToy:
    train: Dataset
    val: Dataset
    g: Net
    lip_h: Net
    profile: LipschitzProfile
    rs: dict


def certify_models(cfg: ExperimentConfig) -> CertifyToy:
    """2-D problem with a standard g, a noise-trained Lipschitz base, and one smoothed base per sigma."""
    spec = SyntheticSpec(cfg.get("certify", "kind"), cfg.geti("certify", "n_per_class"),
                         cfg.getf("certify", "noise"), seed=cfg.stage_seed("certify", "data_seed"))
    train, val = split(generate(spec), cfg.stage_seed("certify", "data_seed"),
                       cfg.getf("data", "train_fraction"))
    seed = cfg.stage_seed("certify")
    sizes = [train.dim, *cfg.hidden("certify", "g_hidden"), train.n_classes]
    g = _train(sizes, "relu", "standard", train,
               TrainConfig(cfg.geti("certify", "g_epochs"), cfg.getf("certify", "g_lr"), seed=seed + 1))
    base_sizes = [train.dim, *cfg.hidden("certify", "base_hidden"), train.n_classes]

    def base(noise, k):
        tc = TrainConfig(cfg.geti("certify", "base_epochs"), cfg.getf("certify", "base_lr"),
                         seed=seed + k, noise_std=noise)
        return _train(base_sizes, "tanh", "standard", train, tc)

    lip_h = base(cfg.getf("certify", "lip_noise"), 2)
    rs = {}
    for k, sigma in enumerate(cfg.floats("certify", "sigmas")):
        rs[sigma] = RsModel(base(sigma, 3 + k), sigma, n_samples=cfg.geti("certify", "n_samples"),
                            seed=seed, method=cfg.get("certify", "rs_method"),
                            nodes=cfg.geti("certify", "nodes"))
    return CertifyToy(train, val, g, lip_h, analytic_profile(lip_h, "l2"), rs)


def _pareto(points: list[tuple[float, float]]) -> list[bool]:
    out = []
    for i, (c, a) in enumerate(points):
        dominated = any(c2 >= c and a2 >= a and (c2 > c or a2 > a)
                        for j, (c2, a2) in enumerate(points) if j != i)
        out.append(not dominated)
    return out


def certify_campaign(cfg: ExperimentConfig, toy: CertifyToy | None = None) -> dict[str, list[list]]:
    """Certified-accuracy curves, RS-versus-Lipschitz radii, and the (alpha, sigma) frontier."""
    toy = toy or certify_models(cfg)
    x, y = toy.val.x, toy.val.y
    radii = cfg.floats("certify", "radii")
    alphas = cfg.floats("certify", "alphas")
    curves, compare, pareto = [], [], []
    for a in alphas:
        mc = MixedClassifier(toy.g, toy.lip_h, MixConfig(alpha=a, norm="l2"))
        cert = certify_mixed(mc, x, y, "lipschitz", profile=toy.profile)
        curves += [["lipschitz", None, a, r, v] for r, v in zip(radii, certified_accuracy(cert, y, radii))]
    per_radius = {r: [] for r in radii}
    for sigma, rs in toy.rs.items():
        lip = LipschitzProfile(np.full(rs.n_classes, rs_lipschitz_constant(sigma)), "l2")
        for a in alphas:
            mc = MixedClassifier(toy.g, rs, MixConfig(alpha=a, norm="l2"))
            c_rs = certify_mixed(mc, x, y, "rs")
            c_lip = certify_mixed(mc, x, y, "lipschitz", profile=lip)
            acc_rs = certified_accuracy(c_rs, y, radii)
            acc_lip = certified_accuracy(c_lip, y, radii)
            curves += [["rs", sigma, a, r, v] for r, v in zip(radii, acc_rs)]
            curves += [["rs-lipschitz", sigma, a, r, v] for r, v in zip(radii, acc_lip)]
            sel = c_rs.certified | c_lip.certified
            diff = c_rs.radius[sel] - c_lip.radius[sel]
            compare.append([sigma, a, int(sel.sum()), int((diff >= 0).sum()),
                            float(diff.min()) if sel.any() else None,
                            float(c_rs.radius[sel].mean()) if sel.any() else None,
                            float(c_lip.radius[sel].mean()) if sel.any() else None])
            clean = float((c_rs.clean_pred == y).mean())
            for r, v in zip(radii, acc_rs):
                per_radius[r].append((sigma, a, clean, float(v)))
    for r in radii:
        pts = per_radius[r]
        flags = _pareto([(c, v) for _, _, c, v in pts])
        pareto += [[r, s, a, c, v, f] for (s, a, c, v), f in zip(pts, flags)]
    return {"certify_curves": curves, "certify_compare": compare, "certify_pareto": pareto}


# -- local Lipschitz ------------------------------------------------------------------------
def lipschitz_report(cfg: ExperimentConfig, models: dict, toy: Toy) -> list[list]:
    eps = cfg.getf("lipschitz", "eps")
    spec = AttackSpec(cfg.get("attack", "norm"), eps, cfg.geti("lipschitz", "steps"),
                      restarts=cfg.geti("lipschitz", "restarts"))
    x = toy.val.x[: cfg.geti("lipschitz", "n_points")]
    rows = []
    for name, net in models.items():
        est = local_lipschitz_estimate(net, x, eps, spec, toy.domain, _attack_seed(cfg))
        bound = float(analytic_profile(net, spec.norm).constants[0]) if isinstance(net, Net) else None
        rows.append([name, len(x), eps, float(est.mean()), float(np.median(est)), float(est.max()), bound])
    return rows


# -- mixing network -------------------------------------------------------------------------
def train_mixer_stage(cfg: ExperimentConfig, g: Net, h: Net, toy: Toy):
    """Train alpha(x) on the training split, then calibrate its output shift there."""
    mc = MixedClassifier(g, h, cfg.mix_config())
    mixer = train_mixer(mc, toy.train, cfg.mixer_config(domain=toy.domain))
    return calibrate_mixer_stage(cfg, replace(mc, mixer=mixer), toy)


def calibration_target(cfg: ExperimentConfig, g: Net, h: Net, data: Dataset) -> float:
    acc_g, acc_h = accuracy(g, data), accuracy(h, data)
    return acc_h + cfg.getf("mixer", "calibrate_fraction") * (acc_g - acc_h)


def calibrate_mixer_stage(cfg: ExperimentConfig, mc: MixedClassifier, toy: Toy):
    return calibrate_shift(mc, toy.train, calibration_target(cfg, mc.g, mc.h, toy.train))


def mixer_table(cfg: ExperimentConfig, g: Net, h: Net, mixer, toy: Toy) -> list[list]:
    x, y = toy.val.x, toy.val.y
    rows = []
    spec = cfg.attack_spec()
    for name, net in (("g", g), ("h", h)):
        rows.append([name, "clean", accuracy(net, toy.val), None])
        rows.append([name, "attacked", _attack(cfg, net, x, y, spec, toy.domain).accuracy, None])
    mc = MixedClassifier(g, h, cfg.mix_config(), mixer)
    rows.append(["adaptive", "clean", accuracy(mc, toy.val), float(mc.alpha(x).mean())])
    for mode in MIX_MODES:
        res = _attack_mix(cfg, mc, x, y, cfg.attack_spec(mode), toy.domain)
        rows.append(["adaptive", mode, res.accuracy, float(mc.alpha(res.x_adv).mean())])
    return rows


# -- persistence ----------------------------------------------------------------------------
def model_dir(out: str | Path) -> Path:
    return Path(out) / "models"


def save_bases(out, g: Net, h: Net) -> None:
    d = model_dir(out)
    d.mkdir(parents=True, exist_ok=True)
    save_net(g, d / "g.json")
    save_net(h, d / "h.json")


def load_bases(out) -> tuple[Net, Net]:
    d = model_dir(out)
    for name in ("g.json", "h.json"):
        if not (d / name).exists():
            raise ConfigError(f"missing {d / name}; run train-base first")
    return load_net(d / "g.json"), load_net(d / "h.json")


def load_trained_mixer(out):
    path = model_dir(out) / "mixer.json"
    if not path.exists():
        raise ConfigError(f"missing {path}; run train-mixer first")
    return load_mixer(path)


def store_mixer(out, mixer) -> None:
    model_dir(out).mkdir(parents=True, exist_ok=True)
    save_mixer(mixer, model_dir(out) / "mixer.json")


# -- campaign -------------------------------------------------------------------------------
TABLES = {
    "base": BASE_COLUMNS, "sweep_alpha": SWEEP_COLUMNS, "sweep_rules": RULE_COLUMNS,
    "transfer_matrix": TRANSFER_COLUMNS, "confidence": CONFIDENCE_COLUMNS,
    "certify_curves": CURVE_COLUMNS, "certify_compare": COMPARE_COLUMNS,
    "certify_pareto": PARETO_COLUMNS, "lipschitz": LIPSCHITZ_COLUMNS, "mixer": MIXER_COLUMNS,
}


def emit(cfg: ExperimentConfig, out, table: str, rows) -> Path:
    return write_table(Path(out) / f"{table}.csv", table, cfg.hash(), TABLES[table], rows)


def run_campaign(cfg: ExperimentConfig, out=None, log=print) -> dict[str, Path]:
    """Train everything from scratch and write every table under ``out``."""
    out = Path(out or cfg.get("run", "out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.dump())
    toy = build_data(cfg)
    log("training base models")
    g, h = train_base(cfg, "g", toy), train_base(cfg, "h", toy)
    save_bases(out, g, h)
    paths = {"base": emit(cfg, out, "base", base_table(cfg, g, h, toy))}
    log("alpha sweeps")
    paths["sweep_alpha"] = emit(cfg, out, "sweep_alpha", sweep_alpha(cfg, g, h, toy))
    paths["sweep_rules"] = emit(cfg, out, "sweep_rules", sweep_rules(cfg, g, h, toy))
    log("transfer matrix")
    paths["transfer_matrix"] = emit(cfg, out, "transfer_matrix",
                                    alpha_t_transfer_matrix(cfg, g, h, toy, out / "adversarial"))
    log("confidence report")
    paths["confidence"] = emit(cfg, out, "confidence", confidence_table(cfg, g, h, toy))
    log("local Lipschitz estimates")
    paths["lipschitz"] = emit(cfg, out, "lipschitz", lipschitz_report(cfg, {"g": g, "h": h}, toy))
    log("mixing network")
    mixer = train_mixer_stage(cfg, g, h, toy)
    store_mixer(out, mixer)
    paths["mixer"] = emit(cfg, out, "mixer", mixer_table(cfg, g, h, mixer, toy))
    log("certification")
    for name, rows in certify_campaign(cfg).items():
        paths[name] = emit(cfg, out, name, rows)
    return paths
