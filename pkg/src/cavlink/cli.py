"""Command-line entry points.

Subcommands: gen-scenes, train-weighting, train-denoiser, run, report,
validate-schedule. Configuration is one JSON file (schema in the README);
--seed overrides the config's root seed where a command takes one.

Exit codes: 0 ok, 2 configuration error, 3 missing model file,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cav_weighting, noise_predictor
from .cond_diffusion import build_schedule
from .errors import (CavlinkError, ConfigurationError, ModelMissingError,
                     NumericalAbortError)
from .feature_core import generate_scene, write_tensor
from .harness import (ExperimentConfig, load_models, make_denoiser_generator,
                      make_weighting_generator, report, run_sweep)
from .noise_predictor import TrainState, init_params, loss_curve_csv


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        return ExperimentConfig()
    return ExperimentConfig.from_json(args.config)


def _out_dir(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_scenes(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    spec = cfg.scene_spec()
    truth_all = {}
    for s in range(cfg.scenes_per_point):
        ego, cavs, truth = generate_scene(spec, cfg.num_cavs, seed + s)
        write_tensor(out / f"scene{s:04d}_ego.cwdt", ego)
        for k, f in enumerate(cavs):
            write_tensor(out / f"scene{s:04d}_cav{k}.cwdt", f)
        truth_all[str(s)] = truth
    with open(out / "truth.json", "w") as fh:
        json.dump(truth_all, fh, indent=2)
    print(f"wrote {cfg.scenes_per_point} scenes to {out}")
    return 0


def cmd_validate_schedule(args) -> int:
    cfg = _load_config(args)
    sched = build_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
    if args.out:
        out = _out_dir(args)
        sched.to_csv(out / "schedule.csv")
        print(f"schedule csv written to {out / 'schedule.csv'}")
    print(f"schedule ok: T={sched.T} beta=[{sched.betas[0]:g}, "
          f"{sched.betas[-1]:g}] m_T={sched.m[-1]:.4f} "
          f"delta_T={sched.delta[-1]:.4f}")
    print(f"all delta >= 0: {bool(np.all(sched.delta >= 0))}; "
          f"all delta_tilde >= 0: {bool(np.all(sched.delta_tilde >= 0))}")
    return 0


def cmd_train_weighting(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    model = cav_weighting.init_weighting_model(cfg.scene_channels, seed)
    generator = make_weighting_generator(cfg)
    model, history = cav_weighting.train_weighting(
        model, generator, seed, steps=cfg.weighting_steps,
        batch_size=cfg.weighting_batch)
    path = out / "weighting.cwdw"
    cav_weighting.save_weighting(path, model)
    with open(out / "weighting_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(history):
            fh.write(f"{i + 1},{loss!r}\n")
    print(f"weighting model written to {path} "
          f"(a={model.a:.3f}, b={model.b:.3f})")
    return 0


def cmd_train_denoiser(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    weighting = None
    if cfg.weighting_model:
        if not Path(cfg.weighting_model).exists():
            raise ModelMissingError(
                f"configured weighting model not found: {cfg.weighting_model}")
        weighting = cav_weighting.load_weighting(cfg.weighting_model)
    sched = build_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
    params = init_params(cfg.scene_channels, hidden=cfg.denoiser_hidden,
                         num_steps=sched.T, rng_seed=seed)
    state = TrainState(params=params, sched=sched,
                       beta_coop=cfg.beta_coop,
                       beta_diffusion=cfg.beta_diffusion,
                       coop_fusion_maps=cfg.num_cavs)
    generator = make_denoiser_generator(cfg, weighting)
    params, history = noise_predictor.train(
        state, generator, sched, steps=cfg.denoiser_steps, rng_seed=seed,
        batch_size=cfg.denoiser_batch)
    path = out / "denoiser.cwdp"
    noise_predictor.save_params(path, params)
    loss_curve_csv(history, out / "denoiser_loss.csv")
    print(f"denoiser written to {path} "
          f"({params.param_count()} parameters, {len(history)} steps)")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.variant:
        cfg = ExperimentConfig.from_dict(
            {**_cfg_dict(cfg), "variants": [args.variant]})
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict(
            {**_cfg_dict(cfg), "seeds": [args.seed]})
    out = _out_dir(args)
    models = load_models(cfg)
    paths = run_sweep(cfg, out, threads=args.threads, models=models)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cfg_dict(cfg: ExperimentConfig) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


def cmd_report(args) -> int:
    if not args.records:
        raise ConfigurationError("report needs --records <csv>")
    text = report(args.records, args.timings)
    if args.out:
        out = Path(args.out)
        if out.suffix:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
            print(f"report written to {out}")
        else:
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.md").write_text(text)
            print(f"report written to {out / 'report.md'}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavlink",
        description="cooperative-perception link recovery experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="root seed override")

    p = sub.add_parser("gen-scenes", help="write synthetic scene tensors")
    common(p)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("validate-schedule",
                       help="build and check the diffusion schedule")
    common(p, seed=False)
    p.set_defaults(func=cmd_validate_schedule)

    p = sub.add_parser("train-weighting", help="train the weighting model")
    common(p)
    p.set_defaults(func=cmd_train_weighting)

    p = sub.add_parser("train-denoiser", help="train the diffusion denoiser")
    common(p)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("run", help="run the configured sweep")
    common(p)
    p.add_argument("--variant", help="run a single variant")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize a records CSV")
    p.add_argument("--records", help="records CSV path")
    p.add_argument("--timings", help="timings CSV path")
    p.add_argument("--out", help="output file or directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ModelMissingError as exc:
        print(f"missing model: {exc}", file=sys.stderr)
        return 3
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except CavlinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
