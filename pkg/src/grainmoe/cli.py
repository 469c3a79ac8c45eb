"""Command-line entry point: plan / train / analyze.

All randomness derives from --seed; identical arguments produce byte-
identical metrics. The analyze and train report paths render matplotlib
figures next to the delimited outputs unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import analysis, figures, planner
from .data import SyntheticCorpus
from .model import ModelConfig
from .moe import MoEConfig, SoftmaxOrder
from .optim import TrainHyperparams
from .tensor import set_default_dtype
from .training import TrainingDivergedError, train

RESOLVED_CONFIG_FILENAME = "resolved_config.json"
SAVINGS_REPORT_FILENAME = "savings_report.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    hp: TrainHyperparams
    ep_size: int = 8
    preset: str | None = None

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "ep_size": self.ep_size,
            "model": dataclasses.asdict(self.model),
            "hp": dataclasses.asdict(self.hp),
        }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        model_d = dict(d["model"])
        moe = MoEConfig(**model_d.pop("moe"))
        return RunConfig(
            model=ModelConfig(moe=moe, **model_d),
            hp=TrainHyperparams(**d["hp"]),
            ep_size=int(d.get("ep_size", 8)),
            preset=d.get("preset"),
        )


def _desk_run_config(name: str, n_experts: int, top_k: int, d_expert: int, order: SoftmaxOrder) -> RunConfig:
    model = ModelConfig(
        n_layers=2,
        d_model=64,
        n_heads=4,
        vocab_size=18,
        seq_len=32,
        moe=MoEConfig(
            n_experts=n_experts,
            top_k=top_k,
            d_model=64,
            d_expert=d_expert,
            softmax_order=order,
        ),
    )
    hp = TrainHyperparams(peak_lr=1e-3, batch_tokens=256, total_steps=2000, val_interval=50)
    return RunConfig(model=model, hp=hp, ep_size=8, preset=name)


# Scaled-down instantiations shaped like the published presets: the G8
# variants keep non-router cost identical to their G1 partners (d_ff 128).
DESK_PRESETS = {
    "desk-g1": lambda: _desk_run_config("desk-g1", 8, 1, 128, SoftmaxOrder.BEFORE_TOPK),
    "desk-g8": lambda: _desk_run_config("desk-g8", 64, 8, 16, SoftmaxOrder.AFTER_TOPK),
    "desk-2x-g1": lambda: _desk_run_config("desk-2x-g1", 8, 2, 128, SoftmaxOrder.AFTER_TOPK),
    "desk-2x-g8": lambda: _desk_run_config("desk-2x-g8", 64, 16, 16, SoftmaxOrder.AFTER_TOPK),
}


def resolve_run_config(args) -> RunConfig:
    if bool(args.preset) == bool(args.config):
        raise ValueError("provide exactly one of --preset or --config")
    if args.preset:
        if args.preset not in DESK_PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; train presets: {', '.join(DESK_PRESETS)}")
        run = DESK_PRESETS[args.preset]()
    else:
        with open(args.config) as fh:
            run = RunConfig.from_dict(json.load(fh))
    hp = run.hp
    if args.seed is not None:
        hp = dataclasses.replace(hp, seed=args.seed)
    if args.steps is not None:
        hp = dataclasses.replace(hp, total_steps=args.steps)
    if args.ep_size is not None:
        run = dataclasses.replace(run, ep_size=args.ep_size)
    # hp owns the loss coefficients for a run; push them into the layer config
    moe = dataclasses.replace(run.model.moe, aux_coeff=hp.aux_coeff, z_coeff=hp.z_coeff)
    return dataclasses.replace(run, hp=hp, model=dataclasses.replace(run.model, moe=moe))


def _cmd_plan(args) -> int:
    if bool(args.preset) == bool(args.config):
        raise ValueError("provide exactly one of --preset or --config")
    if args.preset:
        if args.preset not in planner.PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; plan presets: {', '.join(planner.PRESETS)}")
        spec = planner.PRESETS[args.preset]
    else:
        with open(args.config) as fh:
            spec = planner.ArchSpec(**json.load(fh))
    report = planner.plan_report(spec)
    print(f"# {spec.name}: experts, top_k, active_params, d_model, d_expert, total_params")
    print(planner.plan_table_row(spec))
    print(f"# assumptions: {planner.DERIVED_ASSUMPTIONS}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"plan_{spec.name}.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        print(f"# wrote {path}")
    return 0


def _cmd_train(args) -> int:
    run = resolve_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, RESOLVED_CONFIG_FILENAME), "w") as fh:
        json.dump(run.to_dict(), fh, indent=2)
        fh.write("\n")
    corpus = SyntheticCorpus(seed=run.hp.seed, vocab_size=run.model.vocab_size, seq_len=run.model.seq_len)
    result = train(run.model, run.hp, corpus, ep_size=run.ep_size, out_dir=args.out)
    print(f"finished {run.hp.total_steps} steps; final validation loss {result.final_val_loss:.4f}")
    if not args.no_figures:
        for path in figures.render_run_figures(args.out, args.out):
            print(f"wrote {path}")
    return 0


def _cmd_analyze(args) -> int:
    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    cols = analysis.read_metrics(args.run)

    import csv

    ep_path = os.path.join(out_dir, analysis.EP_LOAD_FILENAME)
    groups = sorted(int(k.split("_")[-1]) for k in cols if k.startswith("ep_load_"))
    with open(ep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "group", "fraction"])
        for i, step in enumerate(cols["step"]):
            for g in groups:
                writer.writerow([int(step), g, f"{cols[f'ep_load_{g}'][i]:.6f}"])
    print(f"wrote {ep_path}")

    ranks_src = os.path.join(args.run, analysis.LOGIT_RANKS_FILENAME)
    if os.path.abspath(out_dir) != os.path.abspath(args.run) and os.path.exists(ranks_src):
        with open(ranks_src) as src, open(os.path.join(out_dir, analysis.LOGIT_RANKS_FILENAME), "w") as dst:
            dst.write(src.read())

    report = None
    if args.baseline:
        baseline_curve = analysis.validation_curve(args.baseline)
        variant_curve = analysis.validation_curve(args.run)
        try:
            report = analysis.savings_report(baseline_curve, variant_curve, args.window)
        except analysis.TargetUnreachedError as exc:
            report = {"target_loss": None, "crossing_step": None, "savings_pct": None, "note": str(exc)}
        path = os.path.join(out_dir, SAVINGS_REPORT_FILENAME)
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        print(f"wrote {path}")

    if not args.no_figures:
        for path in figures.render_run_figures(args.run, out_dir):
            print(f"wrote {path}")
        if args.baseline:
            print(f"wrote {figures.render_savings(args.baseline, args.run, out_dir, args.window, report)}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="grainmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_plan = sub.add_parser("plan", help="parameter/FLOPs accounting for an architecture")
    p_plan.add_argument("--preset", help=f"one of: {', '.join(planner.PRESETS)}")
    p_plan.add_argument("--config", help="path to an architecture JSON")
    p_plan.add_argument("--out", help="directory for the machine-readable plan")
    p_plan.set_defaults(func=_cmd_plan)

    p_train = sub.add_parser("train", help="train a desk-scale model on synthetic data")
    p_train.add_argument("--preset", help=f"one of: {', '.join(DESK_PRESETS)}")
    p_train.add_argument("--config", help="path to a run-config JSON (e.g. a resolved_config.json)")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, help="override the run seed")
    p_train.add_argument("--steps", type=int, help="override the step count")
    p_train.add_argument("--ep-size", type=int, dest="ep_size", help="expert-parallel group count")
    p_train.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p_train.set_defaults(func=_cmd_train)

    p_an = sub.add_parser("analyze", help="export diagnostics (and savings vs a baseline run)")
    p_an.add_argument("--run", required=True, help="run directory containing metrics.csv")
    p_an.add_argument("--baseline", help="baseline run directory for step savings")
    p_an.add_argument("--out", help="output directory (default: the run directory)")
    p_an.add_argument("--window", type=int, default=5, help="smoothing window for savings")
    p_an.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p_an.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    precision = os.environ.get("GRAINMOE_PRECISION")
    try:
        if precision is not None:
            set_default_dtype(precision)
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"grainmoe: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, OSError) as exc:
        print(f"grainmoe: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
