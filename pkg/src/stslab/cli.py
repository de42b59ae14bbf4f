"""``sts`` command-line entry point.

    sts <command> [--config PATH] [--out DIR] [--seed N] [--override key=value]...

Exit codes: 0 success, 1 config error, 2 encoding sampling failure,
3 numerical divergence, 4 verification failure.
"""
from __future__ import annotations

import os

# BLAS reads these at import time, so they must be set before numpy loads.
if os.environ.get("STS_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["STS_THREADS"])

import argparse
import datetime as _dt
import hashlib
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, fcn as fcn_mod, io, reduced, svg, trainer, verify
from .encoding import ONE_HOT, RipSampler
from .errors import (ConfigError, DivergenceError, NotApplicableError,
                     PeSamplingFailedError)
from .model import FixedPE, ResamplePerStep
from .numerics import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_PE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4
COMMANDS = ("train", "ode", "lengthgen", "fcn", "verify", "heatmap")


# --- manifest ------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for f in sorted(root.glob("*.py")):
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(out: Path, command: str, config: dict, seed: int | None, outputs) -> Path:
    """Written once, before any long computation; never rewritten."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    io.write_json(path, {"command": command, "config": config, "build": build_id(),
                         "seed": seed, "started": _now(),
                         "outputs": sorted(str(o) for o in outputs)})
    return path


def _finish(out: Path, outputs):
    io.write_json(out / "completed.json", {"finished": _now(),
                                           "outputs": sorted(str(o) for o in outputs)})


# --- config loading -------------------------------------------------------------

def preset_path(name: str) -> Path:
    return Path(str(resources.files("stslab") / "presets" / f"{name}.json"))


def load_config(args, default_preset: str | None = None) -> trainer.TrainConfig:
    path = args.config
    if path is None:
        if default_preset is None:
            raise ConfigError("--config is required")
        path = preset_path(default_preset)
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return trainer.TrainConfig.from_json(path, overrides)


# --- plotting helpers ----------------------------------------------------------------

def _plot_training(out: Path, trace, prefix=""):
    s = trace.column("step")
    svg.save(out / f"{prefix}loss.svg", svg.line_chart(
        [("loss", s, trace.column("loss"))], "training loss", "step", "loss", logy=True))
    svg.save(out / f"{prefix}inv_loss.svg", svg.line_chart(
        [("1/loss", s, trace.column("inv_loss"))], "inverse loss", "step", "1/loss"))
    svg.save(out / f"{prefix}cosine.svg", svg.line_chart(
        [("cos(W, W*)", s, trace.column("cos_w")), ("cos(V, V*)", s, trace.column("cos_v"))],
        "cosine similarity to ground truth", "step", "cosine"))


def _save_run(out: Path, cfg, params, trace, tag=""):
    io.write_trace_csv(out / f"trace{tag}.csv", trace)
    io.save_checkpoint(out / f"checkpoint{tag}", params, cfg.pe.kind, cfg.steps)
    if trace.fixed_pe is not None and trace.fixed_pe.kind != ONE_HOT:
        io.write_pe_csv(out / f"pe{tag}.csv", trace.fixed_pe)


# --- commands --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args, "desk_train")
    out = Path(args.out)
    files = ["trace.csv", "checkpoint/", "loss.svg", "inv_loss.svg", "cosine.svg"]
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, files)
    params, trace = trainer.train(cfg)
    _save_run(out, cfg, params, trace)
    _plot_training(out, trace)
    _finish(out, files)
    print(f"final loss {trace.last('loss'):.6g}  cos_w {trace.last('cos_w'):.4f}  "
          f"cos_v {trace.last('cos_v'):.4f}")
    return EXIT_OK


def cmd_ode(args) -> int:
    vals = {"T": args.T, "q": args.q, "d": args.d, "eta": args.eta, "steps": args.steps}
    try:
        T, q, d, steps = int(vals["T"]), int(vals["q"]), int(vals["d"]), int(vals["steps"])
        eta = float(vals["eta"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scalar arguments: {exc}") from exc
    if not (1 <= q < T) or d < 1 or steps < 0 or not (eta > 0 and np.isfinite(eta)):
        raise ConfigError(f"invalid scalars T={T} q={q} d={d} eta={eta} steps={steps}")
    out = Path(args.out)
    files = ["trajectory.csv", "trajectory.svg", "report.json"]
    write_manifest(out, "ode", vals, None, files)
    traj = reduced.simulate_onehot(T, q, d, eta, steps)
    io.write_table_csv(out / "trajectory.csv", reduced.TRAJECTORY_COLUMNS,
                       [(int(r[0]),) + tuple(r[1:]) for r in traj])
    view = traj[::max(1, len(traj) // 2000)]   # keep the SVG small on long runs
    t = view[:, 0]
    svg.save(out / "trajectory.svg", svg.line_chart(
        [("C", t, view[:, 1]), ("alpha", t, view[:, 2]), ("q * s_plus", t, q * view[:, 3]),
         ("loss", t, view[:, 4])], "reduced dynamics", "step", "value"))
    rep = reduced.convergence_report(T, q, d, eta, float(args.eps))
    io.write_json(out / "report.json", {
        "final": dict(zip(reduced.TRAJECTORY_COLUMNS, traj[-1].tolist())),
        "t_bound_onehot": rep.t_bound_onehot, "t_bound_stochastic": rep.t_bound_stochastic,
        "delta_used": rep.delta_used, "eps": float(args.eps), "note": rep.note})
    _finish(out, files)
    return EXIT_OK


def cmd_lengthgen(args) -> int:
    cfg = load_config(args, "desk_lengthgen")
    if not cfg.eval.T2_list:
        raise ConfigError("lengthgen needs a non-empty eval.T2_list")
    if cfg.pe.kind == ONE_HOT:
        raise ConfigError("lengthgen compares Rademacher encodings; pe.kind must be rademacher")
    out = Path(args.out)
    pairs = cfg.ood_pairs
    files = ["trace_fixed.csv", "trace_stochastic.csv", "summary.json"] + \
        [f"ood_T{T2}_q{q2}.svg" for T2, q2 in pairs]
    write_manifest(out, "lengthgen", cfg.to_dict(), cfg.seed, files)
    runs = {}
    for tag, policy in (("fixed", "fixed"), ("stochastic", "resample")):
        c = trainer.TrainConfig.from_dict({**cfg.to_dict(), "pe_policy": policy})
        params, trace = trainer.train(c)
        _save_run(out, c, params, trace, f"_{tag}")
        runs[tag] = (params, trace)
    summary = {"T1": cfg.task.T, "train_loss_stochastic": runs["stochastic"][1].last("loss"),
               "train_loss_fixed": runs["fixed"][1].last("loss"), "ood": []}
    for T2, q2 in pairs:
        col = trainer.ood_column(T2, q2)
        series = [(tag, tr.column("step"), tr.column(col)) for tag, (_, tr) in runs.items()]
        svg.save(out / f"ood_T{T2}_q{q2}.svg", svg.line_chart(
            series, f"OOD loss at T={T2}, q={q2}", "step", "loss", logy=True))
        st, fx = runs["stochastic"][1].last(col), runs["fixed"][1].last(col)
        scale = (T2 / cfg.task.T) ** 2 * summary["train_loss_stochastic"]
        summary["ood"].append({"T2": T2, "q2": q2, "stochastic": st, "fixed": fx,
                               "ratio_to_scaled_train": st / max(scale, 1e-300)})
    io.write_json(out / "summary.json", summary)
    _finish(out, files)
    for row in summary["ood"]:
        print(f"T2={row['T2']} q2={row['q2']}: stochastic {row['stochastic']:.4g}  "
              f"fixed {row['fixed']:.4g}")
    return EXIT_OK


def _transformer_reference(cfg, path):
    """Un-halved squared error of a saved transformer, for the width plot."""
    params, meta = io.load_checkpoint(path)
    if meta["pe_kind"] == ONE_HOT:
        from .encoding import one_hot_pe
        policy = FixedPE(one_hot_pe(cfg.task.T))
    else:
        policy = ResamplePerStep(RipSampler(meta["d_e"], cfg.task.T, cfg.task.q, cfg.pe.delta,
                                            cfg.pe.mode, cfg.pe.threshold, cfg.pe.max_attempts))
    mean, se = trainer.estimate_loss(params, cfg, cfg.eval.n_eval, policy)
    return 2 * mean, 2 * se


def _adversarial_ok(params, task) -> bool:
    pair = fcn_mod.adversarial_pair(params, task.T, task.q, task.d)
    gap = float(np.abs(fcn_mod.fcn_forward(params, pair.input_a)
                       - fcn_mod.fcn_forward(params, pair.input_b)).max())
    err = max(fcn_mod.pair_errors(params, pair, task.T, task.q, task.d))
    return gap <= 1e-9 and err >= 1 / (2 * task.q) - 1e-8


def cmd_fcn(args) -> int:
    cfg = load_config(args, "desk_fcn")
    f = cfg.fcn
    if f is None or not f.widths:
        raise ConfigError("fcn command needs an 'fcn' section with a non-empty widths list")
    task = cfg.task
    out = Path(args.out)
    files = ["fcn.csv", "fcn.svg", "reports.json"]
    write_manifest(out, "fcn", cfg.to_dict(), cfg.seed, files)
    in_dim = fcn_mod.fcn_input_dim(task.T, task.q, task.d, f.qhot)
    adv_limit = (task.T - task.q + 1) * task.d - 1
    rows, reports = [], []
    for k, m in enumerate(f.widths):
        init = fcn_mod.init_fcn(RngStream(cfg.seed, "init", (k,)), in_dim,
                                [int(m)] * (f.depth - 1), task.d, f.activation, f.bias, f.qhot)
        opt = trainer.make_optimizer(f.optimizer, f.eta, cfg.anneal)
        params, _ = fcn_mod.train_fcn(init, task, f.steps, f.batch, opt,
                                      RngStream(cfg.seed, "data", (k,)))
        rep = fcn_mod.fcn_report(params, task, f.n_eval, RngStream(cfg.seed, "eval", (k,)))
        adv = "n/a"
        if int(m) <= adv_limit:
            # the trained network plus n_adversarial freshly initialised ones
            nets = [params] + [
                fcn_mod.init_fcn(RngStream(cfg.seed, "init", (k, 1 + j)), in_dim,
                                 [int(m)] * (f.depth - 1), task.d, f.activation, f.bias, f.qhot)
                for j in range(f.n_adversarial)]
            adv = "pass" if all(_adversarial_ok(n, task) for n in nets) else "fail"
        rows.append((int(m), rep.mc_loss, rep.std_err, rep.bound, int(rep.applicable), adv))
        reports.append({**rep.to_json(), "adversarial": adv})
        print(f"width {m}: E||f - target||^2 = {rep.mc_loss:.5g} +- {rep.std_err:.2g} "
              f"(bound {rep.bound:.5g}, applicable {rep.applicable}, adversarial {adv})")
    io.write_table_csv(out / "fcn.csv", ("width", "mc_loss", "std_err", "bound", "applicable",
                                         "adversarial"), rows)
    widths = np.array([r[0] for r in rows], float)
    hl = [("lower bound (widths <= Td-1)", rows[0][3])]
    if f.transformer_checkpoint:
        ref, _ = _transformer_reference(cfg, f.transformer_checkpoint)
        hl.append(("transformer", ref))
        reports.append({"transformer_reference": ref})
    svg.save(out / "fcn.svg", svg.line_chart(
        [("FCN", widths, [r[1] for r in rows])], "FCN squared error vs first-layer width",
        "width", "E||f - target||^2", logy=True, hlines=hl))
    io.write_json(out / "reports.json", reports)
    _finish(out, files)
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = args.suite or ["all"]
    bad = [s for s in suites if s not in (*verify.SUITES, "all")]
    if bad:
        raise ConfigError(f"unknown verify suite(s): {', '.join(bad)}")
    res = verify.run(suites, seed=args.seed or 0)
    print(f"# {res.failed} failed, {res.seconds:.1f}s")
    return EXIT_OK if res.failed == 0 else EXIT_VERIFY


def cmd_heatmap(args) -> int:
    cfg = load_config(args, "desk_heatmap")
    out = Path(args.out)
    snaps = sorted(set(int(s) for s in cfg.heatmap_steps if s <= cfg.steps) | {cfg.steps})
    files = ["trace.csv"] + [f"{m}_step{t}.svg" for t in snaps for m in ("W", "V")]
    write_manifest(out, "heatmap", cfg.to_dict(), cfg.seed, files)
    params, trace = trainer.train(cfg, snapshots=snaps)
    io.write_trace_csv(out / "trace.csv", trace)
    for t in snaps:
        p = trace.snapshots[t]
        svg.save(out / f"W_step{t}.svg", svg.heatmap(p.W, f"W at step {t}"))
        svg.save(out / f"V_step{t}.svg", svg.heatmap(p.V, f"V at step {t}"))
    _finish(out, files)
    print(f"final offblock_ratio {trace.last('offblock_ratio'):.4f}  cos_v {trace.last('cos_v'):.4f}")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sts", description="Sparse token selection experiments")
    ap.add_argument("--version", action="version", version=f"sts {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config (defaults to a desk preset)")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, value parsed as JSON")
        if name == "ode":
            p.add_argument("--T", default=20)
            p.add_argument("--q", default=2)
            p.add_argument("--d", default=4)
            p.add_argument("--eta", default=0.05)
            p.add_argument("--steps", default=10_000)
            p.add_argument("--eps", default=1e-2)
        if name == "verify":
            p.add_argument("suite", nargs="*", help=f"one or more of {', '.join(verify.SUITES)}, all")
    return ap


HANDLERS = {"train": cmd_train, "ode": cmd_ode, "lengthgen": cmd_lengthgen, "fcn": cmd_fcn,
            "verify": cmd_verify, "heatmap": cmd_heatmap}


def _dump_partial(args, exc):
    trace = getattr(exc, "trace", None)
    if trace is not None and trace.rows:
        io.write_trace_csv(Path(args.out) / "trace_partial.csv", trace)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which would collide with EXIT_PE
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PeSamplingFailedError as exc:
        print(f"encoding sampling failed: {exc}", file=sys.stderr)
        _dump_partial(args, exc)
        return EXIT_PE
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        _dump_partial(args, exc)
        return EXIT_DIVERGED
    except NotApplicableError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
