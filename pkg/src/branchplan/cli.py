"""Command-line entry points: gen-data, train, plan and eval.

Exit codes: 0 success, 1 error (bad config, unreadable input, failed
episodes), 3 the planning cycle fell back to emergency braking.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from .config import RunConfig, dump_config, load_config, packaged_checkpoint
from .denoise.features import Normalizer
from .denoise.model import load_checkpoint, save_checkpoint
from .denoise.training import encode_clips, learning_rate, train_full, train_shared
from .errors import BranchPlanError, ConfigurationError
from .planner import ContingencyPlanner, PlannerModels
from .scene import Scenario, load_scenario
from .schedule import build_vp_schedule
from .sim.data import generate_clips, load_clips, save_clips
from .sim.episode import METRIC_KEYS, run_episode
from .sim.scenarios import BUILDERS, load_shipped

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FALLBACK = 3
CSV_COLUMNS = ("scenario", "mode", "seed", "composite", "collision", "ttc", "drivable", "comfort", "progress",
               "fallbacks", "wall_ms")


def resolve_scenario(name: str) -> Scenario:
    """Shipped scenario by name, otherwise a scenario JSON path."""
    if name in BUILDERS:
        return load_shipped(name)
    if not Path(name).is_file():
        raise ConfigurationError(f"{name!r} is neither a shipped scenario {sorted(BUILDERS)} nor a scenario file")
    return load_scenario(name)


def load_models(config: RunConfig) -> PlannerModels:
    loaded = {}
    for role in ("shared", "full"):
        path = getattr(config.checkpoints, role)
        if path is None:
            with resources.as_file(packaged_checkpoint(role)) as p:
                loaded[role] = load_checkpoint(p, role)
        else:
            loaded[role] = load_checkpoint(path, role)
    return PlannerModels(loaded["shared"], loaded["full"])


def build_planner(config: RunConfig, models: PlannerModels | None = None, dump_path=None) -> ContingencyPlanner:
    models = models or load_models(config)
    return ContingencyPlanner(models, config.planner_config(), dump_path=dump_path)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_gen_data(config: RunConfig, out) -> int:
    d = config.data
    clips = generate_clips(d.variants, d.seed, duration=d.duration, horizon_steps=config.split.horizon_steps,
                           stride=d.stride, perturbed=d.perturbed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_clips(clips, out)
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def cmd_train(config: RunConfig, role: str, data, out) -> int:
    split = config.split
    if data is None:
        d = config.data
        clips = generate_clips(d.variants, d.seed, duration=d.duration, horizon_steps=split.horizon_steps,
                               stride=d.stride, perturbed=d.perturbed)
    else:
        clips = load_clips(data)
    if not clips:
        raise ConfigurationError("training data is empty")
    horizon = clips[0].future.horizon_steps
    if role == "full" and horizon != split.horizon_steps:
        raise ConfigurationError(f"role 'full' needs {split.horizon_steps}-step clips, data has {horizon}")
    if role == "shared" and horizon < split.t_b_steps:
        raise ConfigurationError(f"role 'shared' needs clips of at least {split.t_b_steps} steps, data has {horizon}")
    dataset = encode_clips(clips)
    normalizer = Normalizer.fit(dataset.x)
    schedule = build_vp_schedule(**config.schedule_params())
    tc = config.train_config()
    if role == "shared":
        model = train_shared(dataset, split.t_b_steps, tc, schedule, normalizer)
    elif role == "full":
        model = train_full(dataset, split, config.train.dropout, tc, schedule, normalizer)
    else:
        raise ConfigurationError(f"unknown role {role!r}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    curve = out.with_suffix(".curve.csv")
    with open(curve, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config.hash()} role={role}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss in enumerate(model.losses):
            w.writerow([step, repr(float(loss)), repr(learning_rate(tc, step))])
    print(f"{role}: {len(dataset)} clips, loss {model.losses[0]:.4f} -> {model.losses[-1]:.4f}; wrote {out}")
    return EXIT_OK


def plan_document(result, scenario: Scenario, config: RunConfig, seed: int, cycle: int) -> dict:
    return {
        "scenario": scenario.name, "seed": seed, "cycle": cycle, "config_hash": config.hash(),
        "fallback": result.fallback, "k_star": result.k_star, "n_star": result.n_star,
        "plan": result.plan.data.tolist(),
        "raw_plan": None if result.raw_plan is None else result.raw_plan.data.tolist(),
        "stats": result.stats, "report": result.report,
    }


def cmd_plan(config: RunConfig, scenario_name: str, out, seed: int, dump_futures=None, models=None) -> int:
    scenario = resolve_scenario(scenario_name)
    out = _out_dir(out)
    dump = None
    if dump_futures is not None:
        dump = Path(dump_futures)
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text("", encoding="utf-8")
    planner = build_planner(config, models, dump)
    result = planner.plan(scenario.context, seed, 0)
    _write_json(out / "plan.json", plan_document(result, scenario, config, seed, 0))
    state = "fallback (emergency braking)" if result.fallback else f"k*={result.k_star} n*={result.n_star}"
    print(f"{scenario.name}: {state}; wrote {out / 'plan.json'}")
    return EXIT_FALLBACK if result.fallback else EXIT_OK


_WORKER = {}


def _init_worker(config: RunConfig) -> None:
    _WORKER["config"] = config
    _WORKER["planner"] = build_planner(config)


def _run_job(job) -> tuple[dict, dict]:
    name, mode, seed = job
    config = _WORKER["config"]
    t0 = time.perf_counter()
    try:
        scenario = resolve_scenario(name)
        report = run_episode(scenario, _WORKER["planner"], seed, mode, steps=config.episode_steps,
                             replan_every=config.planner_config().replan_steps, score_config=config.score,
                             config_hash=config.hash())
        doc = report.to_dict()
        row = {k: report.metrics[k] for k in METRIC_KEYS}
        row["fallbacks"] = report.fallbacks
    except Exception as exc:  # a crashed episode becomes a failed row
        doc = {"scenario": name, "mode": mode, "seed": seed, "config_hash": config.hash(),
               "error": f"{type(exc).__name__}: {exc}"}
        row = {k: float("nan") for k in METRIC_KEYS}
        row["fallbacks"] = -1
    row.update(scenario=Path(name).stem if name not in BUILDERS else name, mode=mode, seed=seed,
               wall_ms=int(round(1000 * (time.perf_counter() - t0))))
    return row, doc


def eval_jobs(config: RunConfig) -> list[tuple[str, str, int]]:
    return [(name, mode, int(seed)) for name in config.scenarios for mode in config.modes for seed in config.seeds]


def run_suite(config: RunConfig, workers: int | None = None) -> list[tuple[dict, dict]]:
    jobs = eval_jobs(config)
    workers = workers or config.workers
    if workers <= 1:
        _init_worker(config)
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(config,)) as pool:
        return list(pool.map(_run_job, jobs))


def write_metrics_csv(path: Path, rows, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["scenario"], r["mode"], r["seed"]]
                       + [f"{float(r[k]):.6f}" for k in METRIC_KEYS]
                       + [r["fallbacks"], r["wall_ms"]])


def cmd_eval(config: RunConfig, out, workers: int | None = None) -> int:
    out = _out_dir(out)
    results = run_suite(config, workers)
    rows = [r for r, _ in results]
    write_metrics_csv(out / "metrics.csv", rows, config.hash())
    reports = _out_dir(out / "reports")
    for row, doc in results:
        _write_json(reports / f"{row['scenario']}_{row['mode']}_{row['seed']}.json", doc)
    (out / "config.yaml").write_text(f"# config_hash={config.hash()}\n" + dump_config(config), encoding="utf-8")
    failed = sum(1 for _, doc in results if "error" in doc)
    for r in rows:
        print(f"{r['scenario']:>18} {r['mode']:>2} seed={r['seed']} composite={float(r['composite']):.3f} "
              f"collision={float(r['collision']):.0f} fallbacks={r['fallbacks']}")
    if failed:
        print(f"{failed} episode(s) failed; see {reports}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchplan", description="Branching diffusion planner for driving scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", help="output path")

    p = sub.add_parser("gen-data", help="synthesize training clips from the scenario library")
    common(p)
    p = sub.add_parser("train", help="train one denoiser role")
    common(p)
    p.add_argument("--role", choices=("shared", "full"), required=True)
    p.add_argument("--data", help="clips JSONL from gen-data (generated on the fly when omitted)")
    p = sub.add_parser("plan", help="run one planning cycle on a scenario")
    common(p)
    p.add_argument("--scenario", required=True, help="shipped scenario name or scenario JSON path")
    p.add_argument("--dump-futures", help="write every sampled joint future as JSONL")
    p = sub.add_parser("eval", help="closed-loop episodes over the configured suite")
    common(p)
    p.add_argument("--mode", choices=("NR", "R"), help="restrict to one mode")
    p.add_argument("--workers", type=int, help="parallel episode workers")
    p.add_argument("--scenarios", help="comma-separated subset of scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "gen-data":
            if args.seed is not None:
                config = config.replace(data=dataclasses.replace(config.data, seed=args.seed))
            return cmd_gen_data(config, args.out or "clips.jsonl")
        if args.command == "train":
            if args.seed is not None:
                config = config.replace(train=dataclasses.replace(config.train, seed=args.seed))
            return cmd_train(config, args.role, args.data, args.out or f"{args.role}.npz")
        if args.command == "plan":
            seed = config.seed if args.seed is None else args.seed
            return cmd_plan(config, args.scenario, args.out or config.out, seed, args.dump_futures)
        changes = {}
        if args.seed is not None:
            changes["seeds"] = (args.seed,)
        if args.mode is not None:
            changes["modes"] = (args.mode,)
        if args.scenarios:
            changes["scenarios"] = tuple(s for s in args.scenarios.split(",") if s)
        if args.workers is not None:
            changes["workers"] = args.workers
        if changes:
            config = config.replace(**changes)
        return cmd_eval(config, args.out or config.out)
    except BranchPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
