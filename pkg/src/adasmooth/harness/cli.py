"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from ..attacks import AttackSpec, MODES, attack_mixed, check_not_finite
from ..errors import CertificationError, ConfigError, FormatError, NumericalError
from ..mixing import MixedClassifier
from . import experiments as ex
from .config import load_config
from .csvio import write_table

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file; unset keys use the documented defaults")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")

    p = argparse.ArgumentParser(prog="adasmooth", description="Mix, attack and certify toy classifiers.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-base", parents=[common], help="train g and h and save them")
    sub.add_parser("train-mixer", parents=[common], help="train and calibrate the mixing network")
    sub.add_parser("calibrate-mixer", parents=[common], help="re-calibrate a saved mixing network")
    a = sub.add_parser("attack", parents=[common], help="attack the mixed classifier")
    a.add_argument("--mode", choices=MODES, default="MIX-whitebox")
    a.add_argument("--alpha", type=float, help="fixed alpha (default: the saved mixer if present, else mix.alpha)")
    sub.add_parser("certify", parents=[common], help="certified-accuracy campaign")
    sub.add_parser("sweep-alpha", parents=[common], help="alpha and mixing-rule sweeps")
    sub.add_parser("transfer-matrix", parents=[common], help="accuracy of g and h on alpha_t-targeted sets")
    sub.add_parser("confidence-report", parents=[common], help="confidence-gap table")
    sub.add_parser("lipschitz-est", parents=[common], help="local Lipschitz estimates of g and h")
    sub.add_parser("run-campaign", parents=[common], help="every stage from scratch")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["run.seed"] = args.seed
    if args.out is not None:
        out["run.out"] = args.out
    return out


def _emit(cfg, out, table, rows):
    path = ex.emit(cfg, out, table, rows)
    print(path)


def run(args) -> None:
    cfg = load_config(args.config, _overrides(args))
    out = Path(cfg.get("run", "out"))
    cmd = args.command
    if cmd == "show-config":
        print(cfg.dump(), end="")
        return
    if cmd == "run-campaign":
        for path in ex.run_campaign(cfg, out).values():
            print(path)
        return
    if cmd == "certify":
        for table, rows in ex.certify_campaign(cfg).items():
            _emit(cfg, out, table, rows)
        return
    toy = ex.build_data(cfg)
    if cmd == "train-base":
        g, h = ex.train_base(cfg, "g", toy), ex.train_base(cfg, "h", toy)
        ex.save_bases(out, g, h)
        _emit(cfg, out, "base", ex.base_table(cfg, g, h, toy))
        return
    g, h = ex.load_bases(out)
    if cmd == "train-mixer":
        mixer = ex.train_mixer_stage(cfg, g, h, toy)
        ex.store_mixer(out, mixer)
        _emit(cfg, out, "mixer", ex.mixer_table(cfg, g, h, mixer, toy))
    elif cmd == "calibrate-mixer":
        mc = MixedClassifier(g, h, cfg.mix_config(), ex.load_trained_mixer(out))
        mixer = ex.calibrate_mixer_stage(cfg, mc, toy)
        ex.store_mixer(out, mixer)
        print(f"shift = {mixer.shift!r}")
    elif cmd == "attack":
        mix = cfg.mix_config()
        if args.alpha is not None:
            mc = MixedClassifier(g, h, replace(mix, alpha=args.alpha))
        elif (ex.model_dir(out) / "mixer.json").exists():
            mc = MixedClassifier(g, h, mix, ex.load_trained_mixer(out))
        else:
            mc = MixedClassifier(g, h, mix)
        spec: AttackSpec = cfg.attack_spec(args.mode)
        res = attack_mixed(mc, toy.val.x, toy.val.y, spec, toy.domain, cfg.stage_seed("attack"),
                           ensemble=cfg.getb("attack", "ensemble"))
        check_not_finite(res)
        rows = [[i, bool(s), float(m), float(d)]
                for i, (s, m, d) in enumerate(zip(res.success, res.margin, res.distance))]
        path = write_table(out / f"attack_{args.mode}.csv", f"attack_{args.mode}", cfg.hash(),
                           ("index", "success", "margin", "distance"), rows)
        print(path)
        print(f"accuracy = {res.accuracy!r}")
    elif cmd == "sweep-alpha":
        _emit(cfg, out, "sweep_alpha", ex.sweep_alpha(cfg, g, h, toy))
        _emit(cfg, out, "sweep_rules", ex.sweep_rules(cfg, g, h, toy))
    elif cmd == "transfer-matrix":
        _emit(cfg, out, "transfer_matrix", ex.alpha_t_transfer_matrix(cfg, g, h, toy, out / "adversarial"))
    elif cmd == "confidence-report":
        _emit(cfg, out, "confidence", ex.confidence_table(cfg, g, h, toy))
    elif cmd == "lipschitz-est":
        _emit(cfg, out, "lipschitz", ex.lipschitz_report(cfg, {"g": g, "h": h}, toy))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        run(args)
    except (ConfigError, FormatError, CertificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
