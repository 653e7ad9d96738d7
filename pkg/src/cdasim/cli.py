"""Command-line entry point: ``cdasim {pretrain,simulate,analyze,probe,replay}``.

Exit status is 0 on success, 1 on a configuration or usage error and 2 on a
runtime failure.  Progress goes to stderr as ``key=value`` lines; machine
outputs are written only under the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, harness
from .config import GROUP_ALIASES, ConfigInvalid, ExperimentConfig, load_config

log = logging.getLogger("cdasim")

GROUP_CHOICES = ("train", "test", "untrained")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _progress(event: str, **kw) -> None:
    fields = " ".join(f"{k}={v}" for k, v in kw.items())
    log.info("event=%s %s", event, fields)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        kw["n_steps"] = args.steps
    if getattr(args, "group", None) is not None:
        kw["group"] = GROUP_ALIASES.get(args.group, args.group)
    if getattr(args, "checkpoints", None) is not None:
        kw["checkpoint_dir"] = str(args.checkpoints)
    return cfg.replace(**kw) if kw else cfg


def _summary(result) -> dict:
    m = result.log.mid_series()
    return {"steps": result.config.n_steps, "trades": len(result.log.trades),
            "mid_defined": float(np.isfinite(m).mean()) if len(m) else 0.0,
            "out": str(result.out_dir)}


def cmd_simulate(args) -> int:
    cfg = _config(args).validate()
    _progress("simulate.start", config=cfg.name, seed=cfg.seed, steps=cfg.n_steps,
              group=cfg.group)
    t = time.perf_counter()
    res = harness.run(cfg, args.out, force=args.force)
    _progress("simulate.done", seconds=f"{time.perf_counter() - t:.2f}", **_summary(res))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    steps = args.steps if args.steps is not None else cfg.pretrain_steps
    _progress("pretrain.start", config=cfg.name, seed=cfg.seed, steps=steps)
    t = time.perf_counter()
    res = harness.pretrain(cfg, args.out, force=args.force, steps=steps)
    _progress("pretrain.done", seconds=f"{time.perf_counter() - t:.2f}",
              checkpoints=len(res.checkpoints), updates=len(res.log.updates))
    return 0


def _analysis_out(args) -> Path:
    out = Path(args.out) if args.out else Path(args.run) / "analysis"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_analyze(args) -> int:
    run = analysis.load_run(args.run)
    cfg = ExperimentConfig.from_dict(run["manifest"]["config"])
    out = _analysis_out(args)
    reference = analysis.read_reference_returns(args.reference) if args.reference else None
    facts = analysis.stylized_facts_report(run["mids"], reference=reference)
    impact = None
    sched = cfg.flash_schedule
    if sched is not None and sched.n_events:
        starts = sched.event_starts(len(run["mids"]) - args.horizon - 1)
        impact = analysis.price_impact(run["mids"], starts, args.horizon)
    accounts = analysis.read_accounts(Path(args.run) / "accounts.csv")
    identity = {}
    for aid, acc in accounts.items():
        if "mid" not in acc:
            continue
        dec = analysis.pnl_decompose(acc["cash"], acc["inventory"], acc["mid"])
        identity[aid] = dec.identity_holds()
    report = analysis.write_report(facts, out, impact=impact,
                                   extra={"pnl_identity": all(identity.values())})
    _progress("analyze.done", out=out, kurtosis_1=f"{report['kurtosis'][str(facts.dts[0])]:.3f}",
              acf1=f"{report['acf_returns_lag1']:.3f}")
    return 0


def _parse_groups(items, run_dir: Path, manifest: dict) -> dict:
    groups = {}
    for item in items or []:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--checkpoints expects GROUP=DIR, got {item!r}")
        groups[name] = Path(path)
    if not groups:
        own = run_dir / "checkpoints"
        if own.is_dir():
            groups["run"] = own
        src = manifest["config"].get("checkpoint_dir")
        if src:
            groups["loaded"] = Path(src)
    if not groups:
        raise UsageError("no checkpoints to probe; pass --checkpoints GROUP=DIR")
    return groups


def cmd_probe(args) -> int:
    run_dir = Path(args.run)
    run = analysis.load_run(run_dir)
    groups = _parse_groups(args.checkpoints, run_dir, run["manifest"])
    mm_obs = {aid: v for aid, v in run["observations"].items()
              if run["manifest"]["config"] and aid.startswith("mm")}
    if not mm_obs:
        raise analysis.NoStatesInPartition("run has no logged market-maker observations")
    cks = {g: {aid: d / f"{aid}.ckpt" for aid in mm_obs if (d / f"{aid}.ckpt").exists()}
           for g, d in groups.items()}
    phases = None
    if args.phases:
        phases = {}
        for item in args.phases:
            name, _, rng = item.partition("=")
            lo, _, hi = rng.partition(":")
            phases[name] = (int(lo), int(hi))
    probe = analysis.probe_policies(mm_obs, run["imbalance"], cks, threshold=args.threshold,
                                    phases=phases)
    out = _analysis_out(args)
    rows = []
    for g, parts in probe.items():
        for p, d in parts.items():
            rows.extend((g, p, float(a), float(b)) for a, b in zip(d["eps_s"], d["eps_a"]))
    analysis._write_rows(out / "probe.csv", ["group", "partition", "eps_s", "eps_a"], rows)
    summary = analysis.summarize_probe(probe)
    (out / "probe.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _progress("probe.done", out=out, groups=",".join(groups))
    return 0


def cmd_replay(args) -> int:
    run_dir = Path(args.run)
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if cfg.mode != "stepped":
        raise ConfigInvalid("only stepped runs replay bitwise")
    tmp = None
    if args.out:
        out = Path(args.out)
    else:
        tmp = tempfile.TemporaryDirectory(prefix="cdasim-replay-")
        out = Path(tmp.name) / "run"
    try:
        res = harness.run(cfg, out, force=args.force)
        mismatched = sorted(k for k, v in manifest["files"].items()
                            if res.manifest["files"].get(k) != v)
        if manifest["checkpoints_out"] != res.manifest["checkpoints_out"]:
            mismatched.append("checkpoints")
    finally:
        if tmp is not None:
            tmp.cleanup()
    if mismatched:
        log.error("event=replay.mismatch files=%s", ",".join(mismatched))
        return 2
    _progress("replay.ok", run=run_dir, content_hash=manifest["content_hash"][:16])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdasim", description="Agent-based continuous double auction simulator.")
    p.add_argument("--version", action="version", version=f"cdasim {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="preset name or JSON config path")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("simulate", help="run one simulation")
    common(sp)
    sp.add_argument("--group", choices=GROUP_CHOICES)
    sp.add_argument("--checkpoints", help="directory of <agent>.ckpt files to load")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("pretrain", help="train fresh agents and save checkpoints")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("analyze", help="stylized facts, price impact and PnL identity")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--reference", help="reference return series, one float per line")
    sp.add_argument("--horizon", type=int, default=100)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("probe", help="feed logged market-maker states to policies")
    sp.add_argument("--run", required=True)
    sp.add_argument("--checkpoints", action="append", metavar="GROUP=DIR")
    sp.add_argument("--threshold", type=float, default=0.2)
    sp.add_argument("--phases", action="append", metavar="NAME=START:STOP")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("replay", help="re-run a stepped run and compare output hashes")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"cdasim: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (ConfigInvalid, UsageError, FileExistsError) as e:
        log.error("event=error kind=%s message=%s", type(e).__name__, e)
        return 1
    except Exception as e:  # noqa: BLE001 - surfaced as exit status
        log.error("event=error kind=%s message=%s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
