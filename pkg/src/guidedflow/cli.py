"""Command-line entry point: ``guidedflow <subcommand> [--config cfg.json] [flags]``.

The JSON config holds paths and hyperparameters; flags override it.  Every
subcommand is seeded explicitly.  Artifacts go to ``--out`` (default
``$GUIDEDFLOW_OUT`` or ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .controller import GuidanceConfig
from .dynamics import (ForwardTrainConfig, LipschitzEstimates, estimate_lipschitz,
                       fit_forward_model, load_dynamics, transitions_from_trajectories)
from .env import MazeWorld, default_world, generate_expert, load_dataset, sample_start, save_dataset
from .evaluation import (ABLATIONS, METRICS, evaluate, execution_metrics, plot_trajectory,
                         run_ablation, run_comparison, write_csv)
from .flow import FlowTrainConfig, VectorFieldModel, train
from .sampler import SAMPLERS, PlanResult, SolverFailure, sample

log = logging.getLogger("guidedflow")

OUT_ENV = "GUIDEDFLOW_OUT"


def parse_seeds(text: str) -> list[int]:
    """``"7"`` -> [7]; ``"0..4"`` -> [0, 1, 2, 3, 4] (inclusive)."""
    if ".." in text:
        lo, hi = (int(x) for x in text.split("..", 1))
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    return json.loads(p.read_text())


class Context:
    """Resolved config plus flag overrides."""

    def __init__(self, args):
        self.args = args
        self.cfg = _load_config(args.config)
        out = args.out or self.cfg.get("out") or os.environ.get(OUT_ENV) or "runs"
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, key: str, default: str) -> Path:
        val = self.cfg.get(key)
        return Path(val) if val else self.out / default

    def world(self) -> MazeWorld:
        wp = self.cfg.get("world")
        return MazeWorld.load(wp) if wp else default_world()

    def seed(self) -> int:
        if self.args.seed is not None:
            return self.args.seed
        return int(self.cfg.get("seed", 0))

    def seeds(self) -> list[int]:
        if getattr(self.args, "seeds", None):
            return parse_seeds(self.args.seeds)
        raw = self.cfg.get("seeds")
        if raw is None:
            return [self.seed()]
        return parse_seeds(raw) if isinstance(raw, str) else [int(s) for s in raw]

    def guidance(self) -> GuidanceConfig:
        base = GuidanceConfig.from_dict(self.cfg.get("guidance", {}))
        a = self.args
        return base.with_overrides(T0=a.t0, c=a.c, ode_steps=a.ode_steps, robust=True if a.robust else None)

    def flow(self) -> VectorFieldModel:
        p = self.path("flow", "flow.bin")
        if not p.exists():
            raise FileNotFoundError(f"flow checkpoint {p} not found; run train-flow first")
        return VectorFieldModel.load(p)

    def planning_model(self, world: MazeWorld):
        """Dynamics used inside the controller: learned when configured, else analytic."""
        dyn = self.cfg.get("dynamics")
        if dyn is None:
            return world.dynamics
        return load_dynamics(dyn)

    def spec(self, world: MazeWorld, guidance: GuidanceConfig):
        spec = world.test_spec
        if guidance.robust:
            lp = self.path("lipschitz", "forward_lipschitz.json")
            if not lp.exists():
                raise FileNotFoundError(f"robust mode needs Lipschitz estimates at {lp}; run train-forward")
            d = json.loads(lp.read_text())
            spec = spec.with_robust(LipschitzEstimates(d["L_f"], d["zeta"], d["xi"], d["horizon_index"]))
        return spec


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(ctx: Context) -> int:
    world = ctx.world()
    count = ctx.args.count or int(ctx.cfg.get("data_count", 2000))
    ds = generate_expert(world, count, seed=ctx.seed(), avoid=bool(ctx.cfg.get("avoid", False)))
    path = ctx.path("data", "data.bin")
    save_dataset(ds, path)
    world.save(ctx.out / "world.json")
    print(f"wrote {len(ds)} trajectories to {path}")
    return 0


def cmd_train_flow(ctx: Context) -> int:
    world = ctx.world()
    ds = load_dataset(ctx.path("data", "data.bin"), world.layout)
    opts = FlowTrainConfig(**ctx.cfg.get("flow_train", {}))
    opts.seed = ctx.seed()
    opts.loss_csv = str(ctx.out / "flow_loss.csv")
    hidden = tuple(ctx.cfg.get("flow_hidden", (256, 256, 256)))
    model = VectorFieldModel(world.layout, hidden=hidden, seed=ctx.seed())
    model, hist = train(model, ds, opts)
    path = ctx.path("flow", "flow.bin")
    model.save(path)
    print(f"final loss {hist.epoch_loss[-1]:.4e}; checkpoint {path}")
    return 0


def cmd_train_forward(ctx: Context) -> int:
    world = ctx.world()
    ds = load_dataset(ctx.path("data", "data.bin"), world.layout)
    fcfg = dict(ctx.cfg.get("forward_train", {}))
    if "hidden" in fcfg:
        fcfg["hidden"] = tuple(fcfg["hidden"])
    fcfg["seed"] = ctx.seed()
    model, report = fit_forward_model(transitions_from_trajectories(world.layout, ds.values),
                                      ForwardTrainConfig(**fcfg))
    path = ctx.path("forward", "forward.bin")
    model.save(path)
    lip = estimate_lipschitz(model, report.zeta, world.layout.horizon - 1, state_only=True)
    info = {"L_f": lip.L_f, "zeta": lip.zeta, "xi": lip.xi, "horizon_index": lip.horizon_index,
            "holdout_mse": report.holdout_mse, "monotone": report.monotone}
    ctx.path("lipschitz", "forward_lipschitz.json").write_text(json.dumps(info, indent=2))
    print(json.dumps(info))
    return 0


def _plan(ctx: Context, seed: int, kind: str):
    world = ctx.world()
    guidance = ctx.guidance()
    flow = ctx.flow()
    spec = ctx.spec(world, guidance)
    dyn = ctx.planning_model(world)
    s0 = sample_start(world, np.random.default_rng(seed))
    trace = ctx.out / "trace.jsonl" if ctx.args.trace else None
    res = sample(kind, flow, dyn, spec, guidance, s0, seed, trace_file=trace)
    return world, res


def cmd_plan(ctx: Context) -> int:
    kind = ctx.args.sampler
    rows = []
    for seed in ctx.seeds():
        try:
            world, res = _plan(ctx, seed, kind)
        except SolverFailure as err:
            print(f"seed {seed}: {err}", file=sys.stderr)
            err.result.save(ctx.out / f"plan_{kind}_{seed}_failed.json")
            return 2
        path = ctx.out / f"plan_{kind}_{seed}.json"
        res.save(path)
        m = evaluate(res, world.test_spec, world.dynamics, world)
        rows.append({"seed": seed, **m.__dict__})
        print(f"seed {seed}: safety {m.safety:.3g} admissibility {m.admissibility:.3g} "
              f"V {m.consistency:.3g} reward {m.reward:.3f} -> {path}")
    write_csv(ctx.out / "metrics.csv", ("seed",) + METRICS, rows)
    return 0


def cmd_eval(ctx: Context) -> int:
    world = ctx.world()
    rows = []
    for p in ctx.args.plans:
        res = PlanResult.load(p)
        m = execution_metrics(res, world.test_spec, world.dynamics, world) if ctx.args.execute \
            else evaluate(res, world.test_spec, world.dynamics, world)
        rows.append({"plan": str(p), **m.__dict__})
        print(f"{p}: " + " ".join(f"{k} {v:.4g}" for k, v in m.__dict__.items()))
    write_csv(ctx.out / "metrics.csv", ("plan",) + METRICS, rows)
    return 0


def cmd_compare(ctx: Context) -> int:
    world = ctx.world()
    samplers = ctx.args.samplers.split(",") if ctx.args.samplers else SAMPLERS
    table = run_comparison(ctx.flow(), world, ctx.seeds(), ctx.guidance(), samplers,
                           ctx.planning_model(world), ctx.out / "metrics.csv")
    for row in table:
        print(f"{row['sampler']:>6}  safety {row['safety_mean']:.2f}±{row['safety_std']:.2f}  "
              f"adm {row['admissibility_mean']:.2f}±{row['admissibility_std']:.2f}  "
              f"V {row['consistency_mean']:.2e}±{row['consistency_std']:.1e}  "
              f"reward {row['reward_mean']:.3f}")
    return 0


def cmd_ablate(ctx: Context) -> int:
    world = ctx.world()
    kind = ctx.args.kind
    grid = [float(x) for x in ctx.args.grid.split(",")]
    dataset = train_opts = None
    if kind == "data_fraction":
        dataset = load_dataset(ctx.path("data", "data.bin"), world.layout)
        train_opts = FlowTrainConfig(**ctx.cfg.get("flow_train", {}))
    table = run_ablation(kind, grid, None if kind == "data_fraction" else ctx.flow(), world, ctx.seeds(),
                         ctx.guidance(), ctx.planning_model(world),
                         ctx.out / f"ablation_{kind}.csv", ctx.out / f"ablation_{kind}.svg",
                         dataset, train_opts, tuple(ctx.cfg.get("flow_hidden", (256, 256, 256))))
    for row in table:
        print(f"{kind}={row['value']:g}: safety max {row['safety_max']:.3g} "
              f"median V {row['consistency_median']:.3e} reward {row['reward_mean']:.3f}")
    return 0


def cmd_plot(ctx: Context) -> int:
    world = ctx.world()
    for p in ctx.args.plans:
        res = PlanResult.load(p)
        out = ctx.out / (Path(p).stem + ".svg")
        plot_trajectory(res, world, out)
        print(out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-flow": cmd_train_flow,
    "train-forward": cmd_train_forward,
    "plan": cmd_plan,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--seeds", help="seed range N..M (inclusive)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--t0", type=float)
    common.add_argument("--c", type=float)
    common.add_argument("--ode-steps", type=int)
    common.add_argument("--robust", action="store_true")
    common.add_argument("--trace", action="store_true", help="append per-node QP records to trace.jsonl")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="guidedflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="generate expert demonstrations")
    p.add_argument("--count", type=int)
    sub.add_parser("train-flow", parents=[common], help="train the flow-matching model")
    sub.add_parser("train-forward", parents=[common], help="train a forward model and estimate Lipschitz bounds")
    p = sub.add_parser("plan", parents=[common], help="sample plans")
    p.add_argument("--sampler", choices=SAMPLERS, default="sad")
    p = sub.add_parser("eval", parents=[common], help="metrics for saved plans")
    p.add_argument("plans", nargs="+")
    p.add_argument("--execute", action="store_true", help="score the open-loop execution of the actions")
    p = sub.add_parser("compare", parents=[common], help="compare samplers over a seed list")
    p.add_argument("--samplers", help="comma-separated subset of " + ",".join(SAMPLERS))
    p.add_argument("--sampler", choices=SAMPLERS, help=argparse.SUPPRESS)
    p = sub.add_parser("ablate", parents=[common], help="sweep one guidance knob")
    p.add_argument("--kind", choices=ABLATIONS, required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p = sub.add_parser("plot", parents=[common], help="SVG of saved plans")
    p.add_argument("plans", nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "sampler", None) and args.command == "compare" and not args.samplers:
        args.samplers = args.sampler
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](Context(args))
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
