"""``eimplace`` command line: design generation through policy evaluation.

Every command that produces more than one file writes a run directory with
``config.json`` (the merged configuration), its artifacts, and
``manifest.json`` listing each artifact's sha256. Exit codes: 0 success,
1 usage error, 2 domain error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import env, expert, ppo, reward
from .approximator import ShapeError
from .netlist import NetlistError, SynthConfig, generate_synthetic, load_netlist, save_netlist
from .parallel import parallel_map
from .svg import render_svg

log = logging.getLogger("eimplace")


class DomainError(Exception):
    pass


DOMAIN_ERRORS = (DomainError, NetlistError, expert.ExpertError, env.PlacementError,
                 reward.RewardLearningError, ppo.StaleBatchError, ShapeError,
                 cfgmod.ConfigError, FileNotFoundError, json.JSONDecodeError, KeyError)


class Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- run directories -----------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def _dumps(doc) -> str:
    return json.dumps(_clean(doc), sort_keys=True)


class RunDir:
    def __init__(self, path):
        self.root = Path(path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def json(self, name: str, doc) -> Path:
        return self.text(name, json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n")

    def jsonl(self, name: str, rows) -> Path:
        return self.text(name, "".join(_dumps(r) + "\n" for r in rows))

    def finish(self) -> None:
        digests = {f: hashlib.sha256((self.root / f).read_bytes()).hexdigest()
                   for f in sorted(self.files)}
        (self.root / "manifest.json").write_text(
            json.dumps({"files": digests}, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _run_dir(args, rc: cfgmod.RunConfig, *default_parts: str) -> RunDir:
    path = args.out_dir or os.path.join(rc.out_dir, *default_parts)
    rd = RunDir(path)
    rd.text("config.json", cfgmod.dump_config(rc))
    return rd


def _emit(args, report: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(_clean(report), sort_keys=True, indent=2))
    else:
        for line in lines:
            print(line)


# --- configuration ---------------------------------------------------------------

def _run_config(args) -> cfgmod.RunConfig:
    rc = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    for key, value in sorted(vars(args).items()):
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            try:
                rc = rc.set(section, name, value)
            except (TypeError, ValueError) as e:
                raise cfgmod.ConfigError(f"--{name}: {e}") from None
    for key in ("seed", "threads"):
        if getattr(args, key, None) is not None:
            rc = rc.set("", key, getattr(args, key))
    if rc.threads < 1:
        raise cfgmod.ConfigError("--threads must be >= 1")
    return rc.seeded()


def _load_dataset(path, n) -> expert.EIMDataset:
    with open(path, encoding="utf-8") as f:
        return expert.dataset_from_jsonl(f.read(), n)


def _final_state(n, layout: env.Layout) -> env.PlacementState:
    return env.replay(n, env.layout_actions(n, layout))[-1]


# --- commands ----------------------------------------------------------------------

def cmd_gen_design(args) -> int:
    rc = _run_config(args)
    n = generate_synthetic(rc.synth, rc.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_netlist(n, out)
    report = {"design": n.name, "grid_n": n.grid_n, "macros": len(n.macros),
              "nets": len(n.nets), "density": round(n.density, 6), "path": str(out)}
    _emit(args, report, [f"{n.name}: {len(n.macros)} macros, {len(n.nets)} nets, "
                         f"density {n.density:.3f} -> {out}"])
    return 0


def cmd_gen_expert(args) -> int:
    rc = _run_config(args)
    n = load_netlist(args.netlist)
    ec = rc.expert
    if ec.count < 1:
        raise DomainError("--count must be >= 1")
    rd = _run_dir(args, rc, n.name, "expert")
    seeds = [rc.seed + i for i in range(ec.count)]
    layouts = parallel_map(lambda s: expert.generate_expert_layout(n, s), seeds, rc.threads)
    for i, lay in enumerate(layouts):
        rd.text(f"layouts/layout_{i:03d}.layout.json", env.layout_to_json(lay))
    ds = expert.build_dataset(n, layouts, ec.m, ec.k_per_step, rc.seed)
    rd.text("dataset.eimset.jsonl", expert.dataset_to_jsonl(ds))
    periph = [env.periphery_occupancy(_final_state(n, lay)) for lay in layouts]
    report = {"design": n.name, "count": ec.count, "distinct_layouts": len(set(layouts)),
              "train_ids": ds.train_ids, "validation_ids": ds.validation_ids,
              "n_preferences": len(ds.preferences), "n_validation": len(ds.validation),
              "m": ec.m, "k_per_step": ec.k_per_step, "expert_seeds": [seeds[0], seeds[-1]],
              "periphery_mean": float(np.mean(periph)), "periphery_min": float(np.min(periph))}
    rd.json("dataset_manifest.json", report)
    rd.finish()
    _emit(args, report, [f"{ec.count} layouts ({report['distinct_layouts']} distinct) "
                         f"-> {rd.root}",
                         f"train {len(ds.train_ids)} / validation {len(ds.validation_ids)} "
                         f"layouts; {len(ds.preferences)} preferences; "
                         f"{len(ds.validation)} validation tuples",
                         f"expert boundary fraction {report['periphery_mean']:.3f}"])
    return 0


def cmd_train_reward(args) -> int:
    from . import plots
    rc = _run_config(args)
    n = load_netlist(args.netlist)
    ds = _load_dataset(args.dataset, n)
    if args.method == "pref" and not ds.preferences:
        raise DomainError(f"{args.dataset} holds no preference records")
    if args.method == "demo" and not ds.train_ids:
        raise DomainError(f"{args.dataset} holds no training trajectories")
    rd = _run_dir(args, rc, n.name, f"reward-{args.method}")
    train = reward.train_eim_p if args.method == "pref" else reward.train_eim_d
    vset = reward.ValidationSet.build(ds, threads=rc.threads) if ds.validation else None
    rm, history, summary = train(ds, rc.train, vset, rc.threads)
    reward.save_reward(rm, rd.path("reward.qmap.json"))
    rd.jsonl("metrics.jsonl", history)
    final = reward.reward_accuracy(rm, vset, rc.threads) if vset is not None else None
    report = {"design": n.name, "method": args.method, "kind": rm.kind,
              "n_validation": len(ds.validation), "validation_accuracy": final, **summary}
    rd.json("report.json", report)
    if not args.no_plots:
        plots.write_csv(rd.path("metrics.csv"), history, ["epoch", "loss", "val_accuracy"])
        plots.reward_curves(history, rd.path("curves.png"),
                            f"{'EIM-P' if args.method == 'pref' else 'EIM-D'} on {n.name}")
    rd.finish()
    acc = "n/a" if final is None else f"{final:.4f}"
    _emit(args, report, [f"validation accuracy {acc} (best epoch {summary['best_epoch']}) "
                         f"-> {rd.root}"])
    return 0


def _model_label(rm: reward.RewardModel) -> str:
    return "eim_d" if rm.kind == reward.DEMONSTRATION else "eim_p"


def cmd_eval_reward(args) -> int:
    from . import plots
    rc = _run_config(args)
    models = []
    for path in args.checkpoint:
        rm = reward.load_reward(path)
        label = _model_label(rm)
        if any(lbl == label for lbl, _ in models):
            label = f"{label}:{Path(path).stem}"
        models.append((label, rm))
    rows = []
    for net_path, ds_path in args.design:
        n = load_netlist(net_path)
        ds = _load_dataset(ds_path, n)
        for label, rm in models:
            if rm.model.arch.grid_n != n.grid_n:
                raise DomainError(f"checkpoint grid {rm.model.arch.grid_n} does not match "
                                  f"design {n.name} grid {n.grid_n}")
        if args.split == "all":
            tuples = expert.build_validation_set(ds.trajectories, rc.expert.m, rc.seed)
            vset = reward.ValidationSet.build(ds.trajectories, tuples, threads=rc.threads)
        else:
            vset = reward.ValidationSet.build(ds, threads=rc.threads)
        m = vset.candidates.shape[1] - 1
        for label, rm in models:
            acc = reward.reward_accuracy(rm, vset, rc.threads)
            rows.append({"model": label, "design": n.name, "n": len(vset),
                         "accuracy": acc, "chance": 1.0 / (m + 1)})
    ref = rows[0]["design"]
    by = {(r["model"], r["design"]): r["accuracy"] for r in rows}
    for r in rows:
        r["drop"] = by[(r["model"], ref)] - r["accuracy"]
    flags = []
    labels = [lbl for lbl, _ in models]
    if "eim_d" in labels and "eim_p" in labels:
        for d in dict.fromkeys(r["design"] for r in rows):
            if d == ref:
                continue
            dd = by[("eim_d", ref)] - by[("eim_d", d)]
            dp = by[("eim_p", ref)] - by[("eim_p", d)]
            worse = "eim_p" if dp > dd else "eim_d" if dd > dp else "tie"
            flags.append({"design": d, "eim_d_drop": dd, "eim_p_drop": dp,
                          "degrades_more": worse})
    report = {"reference_design": ref, "split": args.split, "results": rows,
              "degradation": flags}
    lines = [f"{r['model']:>12s} on {r['design']:<20s} n={r['n']:<5d} "
             f"accuracy {r['accuracy']:.4f} (chance {r['chance']:.4f})" for r in rows]
    lines += [f"{f['design']}: {f['degrades_more']} degrades more "
              f"(EIM-D drop {f['eim_d_drop']:+.3f}, EIM-P drop {f['eim_p_drop']:+.3f})"
              for f in flags]
    if args.out_dir or not args.no_report:
        rd = _run_dir(args, rc, ref, "eval-reward")
        rd.json("report.json", report)
        if not args.no_plots:
            plots.write_csv(rd.path("report.csv"), rows,
                            ["model", "design", "n", "accuracy", "chance", "drop"])
            plots.accuracy_bars(rows, rd.path("accuracy.png"), rows[0]["chance"])
        rd.finish()
        lines.append(f"-> {rd.root}")
    _emit(args, report, lines)
    return 0


def _reward_source(rc: cfgmod.RunConfig, checkpoint):
    name = rc.ppo.reward_source
    if name == "hpwl":
        return ppo.make_reward_source("hpwl")
    if not checkpoint:
        raise DomainError(f"--reward {name} needs --reward-checkpoint")
    try:
        return ppo.make_reward_source(name, reward.load_reward(checkpoint),
                                      rc.ppo.reward_standardize)
    except ValueError as e:
        raise DomainError(str(e)) from None


def cmd_train_policy(args) -> int:
    from . import plots
    rc = _run_config(args)
    n = load_netlist(args.netlist)
    source = _reward_source(rc, args.reward_checkpoint)
    if isinstance(source, ppo.LearnedReward) and source.rm.model.arch.grid_n != n.grid_n:
        raise DomainError("reward checkpoint grid does not match the design")
    rd = _run_dir(args, rc, n.name, f"policy-{rc.ppo.reward_source}")
    policy, history = ppo.train_policy(n, source, rc.ppo, rc.threads)
    ppo.save_policy(policy, rd.path("policy.json"), rc.ppo)
    rd.jsonl("metrics.jsonl", history)
    eval_seed = rc.seed + 1_000_000
    rows = ppo.episode_metrics(policy, n, args.eval_episodes, eval_seed, threads=rc.threads)
    base = ppo.episode_metrics(ppo.uniform_policy(n.grid_n), n, args.eval_episodes,
                               eval_seed, threads=rc.threads)
    trained, uniform = ppo.summarize_episodes(rows), ppo.summarize_episodes(base)
    report = {"design": n.name, "reward_source": rc.ppo.reward_source,
              "updates": rc.ppo.total_updates, "eval_seed": eval_seed,
              "trained": trained, "uniform": uniform,
              "hpwl_ratio": trained["hpwl_mean"] / uniform["hpwl_mean"]}
    rd.json("report.json", report)
    sample = next((r["layout"] for r in rows if not r["failed"]), None)
    if sample is not None:
        rd.text("sample_layout.layout.json", env.layout_to_json(sample))
        rd.text("sample_layout.svg", render_svg(sample, n))
    if not args.no_plots:
        plots.write_csv(rd.path("metrics.csv"), history,
                        ["update", "failures", "loss", "entropy", "mean_hpwl",
                         "mean_periphery", "mean_reward"])
        plots.policy_curves(history, rd.path("curves.png"),
                            f"PPO ({rc.ppo.reward_source}) on {n.name}", uniform["hpwl_mean"])
    rd.finish()
    _emit(args, report, [
        f"trained: HPWL {trained['hpwl_mean']:.3f} +- {trained['hpwl_std']:.3f}, "
        f"boundary fraction {trained['periphery_mean']:.3f}",
        f"uniform: HPWL {uniform['hpwl_mean']:.3f}, boundary fraction "
        f"{uniform['periphery_mean']:.3f}",
        f"HPWL ratio {report['hpwl_ratio']:.3f} -> {rd.root}"])
    return 0


def cmd_eval_policy(args) -> int:
    from . import plots
    rc = _run_config(args)
    n = load_netlist(args.netlist)
    results = {}
    for path in args.policy:
        p = ppo.load_policy(path)
        if p.actor.arch.grid_n != n.grid_n:
            raise DomainError(f"{path}: policy grid {p.actor.arch.grid_n} != design grid {n.grid_n}")
        label = Path(path).parent.name or Path(path).stem
        while label in results:
            label += "'"
        results[label] = ppo.episode_metrics(p, n, args.episodes, rc.seed, threads=rc.threads)
    if args.uniform:
        results["uniform"] = ppo.episode_metrics(ppo.uniform_policy(n.grid_n), n,
                                                 args.episodes, rc.seed, threads=rc.threads)
    summary = {k: ppo.summarize_episodes(v) for k, v in results.items()}
    if args.dataset:
        ds = _load_dataset(args.dataset, n)
        per = [env.periphery_occupancy(t.states()[-1]) for t in ds.trajectories]
        summary["expert"] = {"episodes": len(per), "failures": 0,
                             "periphery_mean": float(np.mean(per)),
                             "periphery_std": float(np.std(per)),
                             "hpwl_mean": float(np.mean([env.hpwl(t.states()[-1])
                                                         for t in ds.trajectories]))}
    report = {"design": n.name, "seed": rc.seed, "policies": summary}
    lines = [f"{k:>16s}: HPWL {v['hpwl_mean']:.3f}, boundary fraction "
             f"{v['periphery_mean']:.3f}, failures {v['failures']}" for k, v in summary.items()]
    rd = _run_dir(args, rc, n.name, "eval-policy")
    rd.json("report.json", report)
    if not args.no_plots:
        flat = [{"policy": k, **{c: r[c] for c in ("episode", "failed", "hpwl", "periphery",
                                                   "reward_sum")}}
                for k, rows in results.items() for r in rows]
        plots.write_csv(rd.path("episodes.csv"), flat)
        plots.policy_hist({k: [r["hpwl"] for r in rows if not r["failed"]]
                           for k, rows in results.items()}, rd.path("hpwl_hist.png"))
    rd.finish()
    lines.append(f"-> {rd.root}")
    _emit(args, report, lines)
    return 0


def cmd_render(args) -> int:
    try:
        with open(args.layout, encoding="utf-8") as f:
            layout = env.layout_from_json(f.read())
    except (ValueError, KeyError, TypeError) as e:
        raise DomainError(f"{args.layout}: malformed layout ({e})") from None
    n = None
    if args.netlist:
        n = load_netlist(args.netlist)
        if n.grid_n != layout.grid_n:
            raise DomainError(f"layout grid {layout.grid_n} != netlist grid {n.grid_n}")
        ids = {m.id for m in n.macros}
        s = env.reset(n)
        for mid, x, y in layout.placements:
            if mid not in ids:
                raise DomainError(f"layout places unknown macro {mid}")
            m = n.macros[mid]
            if x < 0 or y < 0 or x + m.width_cells > n.grid_n or y + m.height_cells > n.grid_n:
                raise DomainError(f"macro {mid} at ({x}, {y}) leaves the canvas")
            if s.occupancy[y:y + m.height_cells, x:x + m.width_cells].any():
                raise DomainError(f"macro {mid} at ({x}, {y}) overlaps another macro")
            s.occupancy[y:y + m.height_cells, x:x + m.width_cells] = 1
    text = render_svg(layout, n)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    report = {"layout": args.layout, "macros": len(layout.placements), "path": str(out)}
    _emit(args, report, [f"{len(layout.placements)} macros -> {out}"])
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> Parser:
    common = Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="JSON run configuration; flags override its values")
    g.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    g.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    g.add_argument("--json", action="store_true", help="print the report as JSON")
    g.add_argument("-v", "--verbose", action="store_true")

    outdir = Parser(add_help=False)
    outdir.add_argument("--out-dir", help="run directory (default $EIM_OUT_DIR/<design>/<step>)")
    outdir.add_argument("--no-plots", action="store_true", help="skip CSV tables and figures")

    parser = Parser(prog="eimplace", description="Expert-imitating macro placement workbench.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-design", parents=[common], help="generate a synthetic netlist")
    p.add_argument("--grid", type=int, dest="synth.grid_n")
    p.add_argument("--macros", type=int, dest="synth.macro_count")
    p.add_argument("--nets", type=int, dest="synth.net_count")
    p.add_argument("--min-size", type=int, dest="synth.min_size")
    p.add_argument("--max-size", type=int, dest="synth.max_size")
    p.add_argument("--min-degree", type=int, dest="synth.min_degree")
    p.add_argument("--max-degree", type=int, dest="synth.max_degree")
    p.add_argument("--terminal-prob", type=float, dest="synth.terminal_prob")
    p.add_argument("--max-density", type=float, dest="synth.max_density")
    p.add_argument("--name", dest="synth.name")
    p.add_argument("-o", "--output", required=True, help="netlist file to write")
    p.set_defaults(func=cmd_gen_design)

    p = sub.add_parser("gen-expert", parents=[common, outdir],
                       help="synthesize expert layouts and the learning dataset")
    p.add_argument("--netlist", required=True)
    p.add_argument("--count", type=int, dest="expert.count", help="layouts (default 50)")
    p.add_argument("--m", type=int, dest="expert.m", help="validation distractors (default 15)")
    p.add_argument("--k-per-step", type=int, dest="expert.k_per_step",
                   help="preference pairs per expert step (default 1)")
    p.set_defaults(func=cmd_gen_expert)

    p = sub.add_parser("train-reward", parents=[common, outdir], help="train EIM-D or EIM-P")
    p.add_argument("--method", choices=["demo", "pref"], required=True)
    p.add_argument("--netlist", required=True)
    p.add_argument("--dataset", required=True, help=".eimset.jsonl from gen-expert")
    p.add_argument("--epochs", type=int, dest="train.epochs")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--alpha", type=float, dest="train.alpha")
    p.add_argument("--gamma", type=float, dest="train.gamma")
    p.add_argument("--hidden", type=int, dest="train.hidden")
    p.add_argument("--pixel-hidden", type=int, dest="train.pixel_hidden")
    p.add_argument("--eval-every", type=int, dest="train.eval_every")
    p.set_defaults(func=cmd_train_reward)

    p = sub.add_parser("eval-reward", parents=[common, outdir],
                       help="reward accuracy, optionally across designs")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="reward checkpoint (repeatable)")
    p.add_argument("--design", nargs=2, action="append", required=True,
                   metavar=("NETLIST", "DATASET"),
                   help="design to evaluate on (repeatable); the first is the reference")
    p.add_argument("--split", choices=["validation", "all"], default="validation",
                   help="score the held-out tuples or fresh tuples over every trajectory")
    p.add_argument("--m", type=int, dest="expert.m", help="distractors for --split all")
    p.add_argument("--no-report", action="store_true", help="print only, write no run directory")
    p.set_defaults(func=cmd_eval_reward)

    p = sub.add_parser("train-policy", parents=[common, outdir], help="train a PPO policy")
    p.add_argument("--netlist", required=True)
    p.add_argument("--reward", choices=list(ppo.REWARD_SOURCES), dest="ppo.reward_source")
    p.add_argument("--reward-checkpoint")
    p.add_argument("--updates", type=int, dest="ppo.total_updates")
    p.add_argument("--episodes", type=int, dest="ppo.rollout_episodes",
                   help="rollout episodes per update")
    p.add_argument("--lr", type=float, dest="ppo.lr")
    p.add_argument("--entropy-coef", type=float, dest="ppo.entropy_coef")
    p.add_argument("--hidden", type=int, dest="ppo.hidden")
    p.add_argument("--pixel-hidden", type=int, dest="ppo.pixel_hidden")
    p.add_argument("--no-standardize", action="store_false", default=None,
                   dest="ppo.reward_standardize")
    p.add_argument("--eval-episodes", type=int, default=100)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("eval-policy", parents=[common, outdir], help="evaluate PPO policies")
    p.add_argument("--policy", action="append", default=[], help="policy checkpoint (repeatable)")
    p.add_argument("--netlist", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--uniform", action="store_true", help="include the uniform random policy")
    p.add_argument("--dataset", help="expert dataset to compare against")
    p.set_defaults(func=cmd_eval_policy)

    p = sub.add_parser("render", parents=[common], help="render a layout as SVG")
    p.add_argument("--layout", required=True)
    p.add_argument("--netlist", help="netlist for macro sizes and pins")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_render)
    for sp in sub.choices.values():
        for action in sp._actions:
            if "." in action.dest and action.metavar is None and action.nargs != 0:
                action.metavar = action.dest.split(".", 1)[1].upper()
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval-policy" and not args.policy and not args.uniform:
        parser.error("eval-policy needs --policy or --uniform")
    try:
        return args.func(args)
    except DOMAIN_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"eimplace {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
