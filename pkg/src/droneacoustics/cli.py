"""Command-line entry point.

Every verb takes a YAML config path (optional; defaults apply) plus
``--set section.key=value`` overrides.  Exit codes: 0 success, 1 config
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .errors import ConfigError
from .harness import (SUMMARY_HEADER, ExperimentConfig, evaluate, generate_dataset, noise_sweep,
                      resource_log, run_campaign, time_ratio, write_csv)

log = logging.getLogger("droneacoustics")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="droneacoustics", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, help):
        v = sub.add_parser(name, help=help)
        v.add_argument("config", nargs="?", help="YAML config file")
        v.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. attack.beta=0.5")
        v.add_argument("--out", help="output directory (experiment.output_dir)")
        v.add_argument("--seed", type=int, help="experiment seed")
        v.add_argument("-v", "--verbose", action="store_true")
        return v

    verb("gen-data", "simulate the grid dataset")
    for name, help in (("train", "train the localizer"), ("attack", "run the universal attack"),
                       ("campaign", "sweep (beta, gamma) pairs"), ("noise-sweep", "attack RMS versus sensor noise")):
        v = verb(name, help)
        v.add_argument("--dataset", help="dataset .npz (generated when absent)")
        if name != "train":
            v.add_argument("--model", help="model checkpoint (trained when absent)")
    v = sub.choices["attack"]
    v.add_argument("--resource-log", action="store_true", help="also time fixed vs. optimized iterations")
    for name, help in (("defend", "delineate and recover an attack"), ("eval", "score clean/attacked predictions")):
        v = verb(name, help)
        v.add_argument("--dataset")
        v.add_argument("--model")
        v.add_argument("--spec", help="perturbation checkpoint from 'attack'")
        if name == "defend":
            v.add_argument("--export", type=int, metavar="INDEX",
                           help="write recovered waveforms of one sample as CSV and WAV")
    return p


def _output_dir(cfg) -> Path:
    out = Path(cfg["experiment"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _dataset(cfg, room, drone):
    from .localizer import Dataset

    path = cfg["experiment"].get("dataset")
    if path:
        return Dataset.load(_existing(path, "dataset"))
    log.info("generating dataset")
    ds = generate_dataset(room, drone, C.build_grid(cfg), cfg["experiment"]["seed"])
    ds.save(_output_dir(cfg) / "dataset.npz")
    return ds


def _model(cfg, ds):
    from .localizer import LocalizerModel, train

    path = cfg["experiment"].get("model")
    if path:
        return LocalizerModel.load(_existing(path, "model"))
    arch, tcfg = C.build_train(cfg)
    log.info("training localizer")
    model, losses = train(LocalizerModel.for_dataset(ds, seed=tcfg.seed, **arch), ds, tcfg)
    out = _output_dir(cfg)
    model.save(out / "model.npz")
    write_csv(out / "train_loss.csv", ["epoch", "mse"], [[i, float(v)] for i, v in enumerate(losses)])
    return model


def _problem(cfg):
    from .attack import AttackProblem

    room, drone = C.build_room(cfg), C.build_drone(cfg)
    ds = _dataset(cfg, room, drone)
    model = _model(cfg, ds)
    return AttackProblem.from_dataset(model, room, drone, ds)


def _experiment(cfg) -> ExperimentConfig:
    e = cfg["experiment"]
    return ExperimentConfig(C.bound_pairs(cfg), C.build_attack(cfg), e["output_dir"], int(e["seed"]),
                            float(cfg["defense"]["noise_std"]), int(cfg["defense"]["repeats"]))


def run(args) -> int:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"experiment.output_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    for key in ("dataset", "model"):
        if getattr(args, key, None):
            overrides.append(f"experiment.{key}={getattr(args, key)}")
    cfg = C.load_config(args.config, overrides)
    out = _output_dir(cfg)
    C.dump_config(cfg, out / "config_used.yaml")

    if args.verb == "gen-data":
        room, drone = C.build_room(cfg), C.build_drone(cfg)
        ds = generate_dataset(room, drone, C.build_grid(cfg), cfg["experiment"]["seed"])
        ds.save(out / "dataset.npz")
        print(f"{len(ds)} samples -> {out / 'dataset.npz'}")
    elif args.verb == "train":
        from .localizer import forward, scaled_rms

        cfg["experiment"]["model"] = None
        room, drone = C.build_room(cfg), C.build_drone(cfg)
        ds = _dataset(cfg, room, drone)
        model = _model(cfg, ds)
        print(f"train scaled RMS {scaled_rms(forward(model, ds.inputs), ds.targets):.4f}")
    elif args.verb == "attack":
        from .attack import pgd_attack

        prob = _problem(cfg)
        acfg = C.build_attack(cfg, seed=int(cfg["experiment"]["seed"]))
        rep = pgd_attack(prob.model, prob.room, prob.drone, prob, acfg)
        rep.to_csv(out / "attack_log.csv")
        rep.spec.save(out / "spec.npz")
        summary = rep.summary()
        write_csv(out / "attack_summary.csv", list(summary), [list(summary.values())])
        for k, v in summary.items():
            print(f"{k}: {v}")
        if args.resource_log:
            rows = resource_log(prob, acfg, path=out / "resource_log.csv")
            print(f"optimized/fixed iteration time ratio: {time_ratio(rows):.2f}")
    elif args.verb in ("defend", "eval"):
        from .attack import PerturbationSpec

        prob = _problem(cfg)
        spec = PerturbationSpec.load(_existing(args.spec, "spec")) if args.spec else None
        if args.verb == "defend" and spec is None:
            raise ConfigError("defend needs --spec")
        d = cfg["defense"]
        heat = evaluate(prob, spec, recover=args.verb == "defend", noise_std=float(d["noise_std"]),
                        repeats=int(d["repeats"]), seed=int(cfg["experiment"]["seed"]))
        heat.to_csv(out / f"heatmap_{args.verb}.csv")
        write_csv(out / f"summary_{args.verb}.csv", SUMMARY_HEADER, [heat.summary_row()])
        for c, (m, s) in heat.summary().items():
            print(f"{c}: {m:.4f} +/- {s:.4f}")
        if args.verb == "defend" and args.export is not None:
            _export(prob, spec, args.export, out, d)
    elif args.verb == "campaign":
        prob = _problem(cfg)
        for h in run_campaign(prob, _experiment(cfg)):
            s = h.summary()
            print(f"beta={h.beta:g} gamma={h.gamma:g} " + " ".join(f"{c}={m:.4f}" for c, (m, _) in s.items()))
    elif args.verb == "noise-sweep":
        prob = _problem(cfg)
        levels = [float(v) for v in cfg["experiment"]["noise_levels"]]
        for row in noise_sweep(prob, _experiment(cfg), levels):
            print(" ".join(str(v) for v in row))
    return 0


def _export(prob, spec, index, out, d):
    from .defense import delineate
    from .io import export_waveforms

    if not 0 <= index < len(prob):
        raise ConfigError(f"export index {index} outside dataset of {len(prob)}")
    sigma = prob.perturbation_at_mics(spec, np.array([index]))[0]
    res = delineate(prob.room, prob.drone, prob.states[index], sigma=sigma, noise_std=float(d["noise_std"]),
                    repeats=int(d["repeats"]))
    for suffix in (".csv", ".wav"):
        export_waveforms(res.array, out / f"recovered_{index}{suffix}", prob.drone.sample_rate)
    write_csv(out / f"residual_{index}.csv", ["mic", "max_abs_error"],
              [[m, float(r)] for m, r in enumerate(res.residual)])


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
