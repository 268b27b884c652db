"""Command-line harness: data generation, configuration-set construction,
training (the cyclic pipeline and three baselines), evaluation curves,
Pareto/hypervolume reports, and budget-based configuration selection.

Exit codes: 0 success, 2 validation error, 3 infeasible, 4 numeric failure.
Artifacts are deterministic given the same flags; wall-clock appears only in
the run directory's manifest.json.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, qconfig, runio, search, tinynet
from .errors import InfeasibleError, NumericError, TrainingError
from .pareto import hypervolume_2d, normalize_objectives
from .qconfig import (
    ModelQuantConfig,
    avg_bits,
    config_set_from_json,
    config_set_to_json,
    nearest_member_index,
    random_config_at_bits,
    select_for_budget,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

SELECT_TOL = 0.05


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("QUANTADAPT_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    n = _n_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _parse_range(spec: str) -> list[float]:
    """'a:b:step' (inclusive of b up to rounding) or a comma-separated list."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"range must be start:stop:step, got {spec!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("range step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 10) for k in range(n)]
    return [float(p) for p in spec.split(",") if p.strip()]


def _base_manifest(args, command: str) -> dict:
    skip = {"func", "out"}
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    return {"command": command, "flags": flags, "tool_version": __version__}


def _write_json(path, payload) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# --- dataset / net persistence ---


def save_dataset(path, dataset: tinynet.Dataset, net: tinynet.TargetNet, manifest: dict) -> None:
    arrays = {
        "inputs": dataset.inputs,
        "targets": dataset.targets,
        "train_idx": dataset.train_idx.astype(np.int64),
        "cal_idx": dataset.cal_idx.astype(np.int64),
        "val_idx": dataset.val_idx.astype(np.int64),
    }
    for i, W in enumerate(net.weights):
        arrays[f"weight_{i}"] = W
    runio.save_container(path, manifest, arrays)


def load_dataset(path) -> tuple[tinynet.Dataset, tinynet.TargetNet, dict]:
    manifest, arrays = runio.load_container(path)
    ds = tinynet.Dataset(
        inputs=arrays["inputs"],
        targets=arrays["targets"],
        train_idx=arrays["train_idx"],
        cal_idx=arrays["cal_idx"],
        val_idx=arrays["val_idx"],
    )
    n_layers = manifest["n_layers"]
    net = tinynet.TargetNet([arrays[f"weight_{i}"] for i in range(n_layers)])
    return ds, net, manifest


def save_checkpoint(path, stack: tinynet.AdapterStack, manifest: dict) -> None:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in stack.snapshot().items()}
    runio.save_container(path, {**manifest, "r": stack.r, "n_layers": stack.n_layers}, arrays)


def load_checkpoint(path, net: tinynet.TargetNet) -> tuple[tinynet.AdapterStack, dict]:
    manifest, arrays = runio.load_container(path)
    stack = tinynet.AdapterStack.from_snapshot(net, r=int(manifest["r"]), snap=arrays)
    return stack, manifest


# --- subcommands ---


def cmd_gen_data(args) -> int:
    if args.samples < 64:
        raise ValueError("--samples must be >= 64")
    dataset, net = tinynet.gen_teacher_student(args.seed, n_samples=args.samples,
                                               noise_std=args.noise)
    manifest = {
        **_base_manifest(args, "gen-data"),
        "n_layers": net.n_layers,
        "layer_shapes": [list(s) for s in net.layer_shapes],
        "splits": {
            "train": len(dataset.train_idx),
            "calibration": len(dataset.cal_idx),
            "validation": len(dataset.val_idx),
        },
    }
    save_dataset(args.out, dataset, net, manifest)
    print(f"wrote {args.out}: {args.samples} samples, splits "
          f"{manifest['splits']['train']}/{manifest['splits']['calibration']}"
          f"/{manifest['splits']['validation']}")
    return EXIT_OK


def cmd_init_configs(args) -> int:
    dataset, net, data_manifest = load_dataset(args.data)
    budgets = _parse_range(args.budgets)[:50]
    ladder = qconfig.build_ladder()
    tables = [qconfig.layer_error_table(W, args.rank, ladder) for W in net.weights]

    configs, used_budgets = [], []
    for b in budgets:
        try:
            got = qconfig.init_config_set(net.weights, [b], args.rank, error_tables=tables)
        except InfeasibleError:
            warnings.warn(f"budget {b} infeasible (below ladder minimum); skipped")
            continue
        configs.extend(got)
        used_budgets.append(b)

    meta = {
        **_base_manifest(args, "init-configs"),
        "N": net.n_layers,
        "layer_shapes": [list(s) for s in net.layer_shapes],
        "budgets": used_budgets,
        "rank": args.rank,
        "seed": data_manifest["flags"].get("seed"),
    }
    with open(args.out, "w") as fh:
        fh.write(config_set_to_json(configs, meta))
        fh.write("\n")
    print(f"wrote {args.out}: {len(configs)} configurations "
          f"({len(budgets) - len(used_budgets)} budgets skipped)")
    return EXIT_OK


def _matched_total_steps(args) -> int:
    return args.epochs * args.steps_per_epoch


def cmd_train(args) -> int:
    t_start = time.time()
    dataset, net, _ = load_dataset(args.data)
    configs, meta = config_set_from_json(open(args.configs).read())
    if not configs:
        raise ValueError("configuration set is empty")
    os.makedirs(args.out, exist_ok=True)

    base = {**_base_manifest(args, "train"), "data": os.path.abspath(args.data),
            "configs": os.path.abspath(args.configs)}
    written: list[str] = []

    if args.mode == "coa":
        history_path = os.path.join(args.out, "history.jsonl")
        if os.path.exists(history_path):
            os.unlink(history_path)
        result = search.run_coa(
            net, dataset, configs, epochs=args.epochs, fd_steps=args.fd_steps,
            n_segments=args.segments, seed=args.seed, steps_per_epoch=args.steps_per_epoch,
            lr=args.lr, r=args.rank, history_path=history_path,
            search_enabled=not args.no_search,
        )
        save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), result.stack,
                        {**base, "mode": args.mode})
        snap_dir = os.path.join(args.out, "snapshots")
        os.makedirs(snap_dir, exist_ok=True)
        for sid, snap in enumerate(result.snapshots):
            runio.save_container(os.path.join(snap_dir, f"epoch_{sid:03d}.ckpt"),
                                 {"snapshot_id": sid, "r": args.rank}, snap)
        result.archive.to_csv(os.path.join(args.out, "archive.csv"))
        archive_meta = [
            {"config_id": e.config_id, "snapshot_id": e.snapshot_id, "loss": e.loss,
             "avg_bits": e.avg_bits, "ranks": [int(r) for r in e.ranks]}
            for e in result.archive.entries
        ]
        _write_json(os.path.join(args.out, "archive.json"), {
            "entries": archive_meta,
            "loss_max": result.loss_max,
            "bits_max": result.bits_max,
            "retained_ids": result.archive.retained_ids,
        })
        with open(os.path.join(args.out, "final_configs.json"), "w") as fh:
            fh.write(config_set_to_json(result.final_configs, {**meta, "stage": "final"}))
            fh.write("\n")
        written += ["checkpoint.ckpt", "final_configs.json", "history.jsonl", "archive.csv"]
    elif args.mode == "shared":
        stack = tinynet.train_shared(net, configs, dataset, steps=_matched_total_steps(args),
                                     lr=args.lr, seed=args.seed, r=args.rank)
        save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), stack,
                        {**base, "mode": args.mode})
        with open(os.path.join(args.out, "final_configs.json"), "w") as fh:
            fh.write(config_set_to_json(configs, {**meta, "stage": "final"}))
            fh.write("\n")
        written += ["checkpoint.ckpt", "final_configs.json"]
    elif args.mode in ("per-config", "per-config-svd"):
        if not args.bits:
            raise ValueError(f"--mode {args.mode} requires --bits with one or more targets")
        targets = _parse_range(args.bits)
        chosen = []
        for b in targets:
            C = configs[nearest_member_index(configs, b)]
            stack = tinynet.train_lora_per_config(
                net, C, dataset, steps=_matched_total_steps(args), lr=args.lr,
                seed=args.seed, svd_init=(args.mode == "per-config-svd"), r=args.rank,
            )
            tag = f"{b:.2f}"
            save_checkpoint(os.path.join(args.out, f"checkpoint_{tag}.ckpt"), stack,
                            {**base, "mode": args.mode, "bits_target": b})
            _write_json(os.path.join(args.out, f"manifest_{tag}.json"),
                        {**base, "mode": args.mode, "bits_target": b,
                         "achieved_bits": avg_bits(C)})
            chosen.append(C)
            written += [f"checkpoint_{tag}.ckpt", f"manifest_{tag}.json"]
        with open(os.path.join(args.out, "final_configs.json"), "w") as fh:
            fh.write(config_set_to_json(chosen, {**meta, "stage": "final",
                                                 "bits_targets": targets}))
            fh.write("\n")
        written.append("final_configs.json")
    else:
        raise ValueError(f"unknown mode {args.mode!r}")

    _write_json(os.path.join(args.out, "manifest.json"),
                {**base, "mode": args.mode, "wall_clock_s": time.time() - t_start,
                 "artifacts": sorted(set(written))})
    print(f"run complete: {args.out} ({args.mode})")
    return EXIT_OK


def _load_run(run_dir):
    manifest = json.load(open(os.path.join(run_dir, "manifest.json")))
    dataset, net, _ = load_dataset(manifest["data"])
    configs, meta = config_set_from_json(open(os.path.join(run_dir, "final_configs.json")).read())
    return manifest, dataset, net, configs, meta


def curve_rows(run_dir, grid, unseen_seed: int):
    """(bits, loss_seen, loss_unseen, config_id) rows for a finished run."""
    manifest, dataset, net, configs, meta = _load_run(run_dir)
    mode = manifest["mode"]
    rng = np.random.default_rng(unseen_seed)
    val = dataset.val_batch
    rows = []

    if mode in ("per-config", "per-config-svd"):
        for b, C in zip(meta["bits_targets"], configs):
            stack, _ = load_checkpoint(
                os.path.join(run_dir, f"checkpoint_{b:.2f}.ckpt"), net)
            loss_seen = tinynet.forward_loss(net, C, stack, False, val)
            unseen = random_config_at_bits(avg_bits(C), net.layer_shapes, rng, tol=SELECT_TOL)
            loss_unseen = tinynet.forward_loss(net, unseen, stack, False, val)
            rows.append((avg_bits(C), loss_seen, loss_unseen, nearest_member_index(configs, b)))
        return rows

    stack, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"), net)
    use_hyper = mode == "coa"

    def one(b):
        try:
            C = select_for_budget(configs, b, tol=SELECT_TOL)
        except InfeasibleError:
            warnings.warn(f"grid point {b}: no configuration in window; skipped")
            return None
        unseen = random_config_at_bits(b, net.layer_shapes,
                                       np.random.default_rng(unseen_seed + int(round(b * 1000))),
                                       tol=SELECT_TOL)
        loss_seen = tinynet.forward_loss(net, C, stack, use_hyper, val)
        loss_unseen = tinynet.forward_loss(net, unseen, stack, use_hyper, val)
        return (avg_bits(C), loss_seen, loss_unseen, nearest_member_index(configs, b))

    for row in _pmap(one, grid):
        if row is not None:
            rows.append(row)
    return rows


def write_curve_csv(path, rows, manifest: dict) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write("# manifest " + json.dumps(manifest, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["bits", "loss_seen", "loss_unseen", "config_id"])
        for bits, seen, unseen, cid in rows:
            w.writerow([repr(float(bits)), repr(float(seen)), repr(float(unseen)), cid])
        gaps = [abs(u - s) / s for _, s, u, _ in rows if s > 0]
        gap = float(np.mean(gaps)) if gaps else float("nan")
        fh.write(f"# summary mean_rel_gap {gap!r}\n")
    os.replace(tmp, path)


def read_curve_csv(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("bits"):
                continue
            parts = line.strip().split(",")
            if len(parts) >= 3 and parts[0]:
                rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
    return rows


def cmd_eval_curve(args) -> int:
    grid = _parse_range(args.bits)
    rows = curve_rows(args.run, grid, args.unseen_seed)
    if not rows:
        raise InfeasibleError("no grid point produced a configuration")
    write_curve_csv(args.out, rows, _base_manifest(args, "eval-curve"))
    gaps = [abs(u - s) / s for _, s, u, _ in rows if s > 0]
    print(f"wrote {args.out}: {len(rows)} rows, mean seen-vs-unseen gap "
          f"{float(np.mean(gaps)):.4f}")
    return EXIT_OK


def pareto_report(curve_paths, ref=(1.0, 1.0), baseline: str | None = None):
    curves = {}
    for p in curve_paths:
        name = os.path.splitext(os.path.basename(p))[0]
        curves[name] = read_curve_csv(p)
        if not curves[name]:
            raise ValueError(f"curve {p} has no data rows")
    names = list(curves)
    baseline = baseline or names[0]
    if baseline not in curves:
        raise ValueError(f"baseline {baseline!r} not among curves {names}")

    loss_max = max(loss for rows in curves.values() for _, loss, _ in rows)
    bits_max = max(bits for rows in curves.values() for bits, _, _ in rows)

    report = {"ref": list(ref), "baseline": baseline, "loss_max": loss_max,
              "bits_max": bits_max, "schema_version": 1, "methods": {}}
    base_grid = {round(b, 3): loss for b, loss, _ in curves[baseline]}
    for name, rows in curves.items():
        pts = [normalize_objectives(loss, loss_max, bits, bits_max) for bits, loss, _ in rows]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            hv = hypervolume_2d(pts, ref)
        matched = [(base_grid[round(b, 3)], loss) for b, loss, _ in rows
                   if round(b, 3) in base_grid]
        if not matched:
            raise ValueError(
                f"curve {name!r} shares no grid points with baseline {baseline!r}: "
                f"{sorted(round(b, 3) for b, _, _ in rows)} vs {sorted(base_grid)}"
            )
        gap = float(np.mean([(lb - lm) / lb for lb, lm in matched if lb > 0]))
        report["methods"][name] = {"hv": hv, "gap_vs_baseline": gap, "n_points": len(rows)}
    return report


def cmd_pareto_report(args) -> int:
    ref = tuple(float(x) for x in args.ref.split(","))
    if len(ref) != 2:
        raise ValueError("--ref must be 'x,y'")
    report = pareto_report(args.curves, ref=ref, baseline=args.baseline)
    _write_json(args.out, report)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "hv", "gap_vs_baseline", "n_points"])
        for name in sorted(report["methods"]):
            m = report["methods"][name]
            w.writerow([name, repr(m["hv"]), repr(m["gap_vs_baseline"]), m["n_points"]])
    for name in sorted(report["methods"]):
        m = report["methods"][name]
        print(f"{name}: hv={m['hv']:.4f} gap={m['gap_vs_baseline']:+.4f}")
    return EXIT_OK


def cmd_select_config(args) -> int:
    _, _, net, configs, meta = _load_run(args.run)
    C = select_for_budget(configs, args.bits, tol=SELECT_TOL)
    with open(args.out, "w") as fh:
        fh.write(config_set_to_json([C], {**meta, "stage": "selected",
                                          "bits_target": args.bits}))
        fh.write("\n")
    print(f"selected configuration at {avg_bits(C):.4f} bits (target {args.bits}) -> {args.out}")
    return EXIT_OK


# --- argument parsing / dispatch ---


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quantadapt", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic regression dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("init-configs", help="storage-budgeted initial configuration set")
    p.add_argument("--data", required=True)
    p.add_argument("--budgets", default="2.25:7.25:0.1")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_configs)

    p = sub.add_parser("train", help="train adapters (pipeline or baselines)")
    p.add_argument("--mode", required=True,
                   choices=["coa", "shared", "per-config", "per-config-svd"])
    p.add_argument("--data", required=True)
    p.add_argument("--configs", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--fd-steps", type=int, default=search.DEFAULT_FD_STEPS)
    p.add_argument("--segments", type=int, default=search.DEFAULT_SEGMENTS)
    p.add_argument("--steps-per-epoch", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--bits", help="comma list of bit targets (per-config modes)")
    p.add_argument("--no-search", action="store_true",
                   help="freeze the initial configuration set (ablation)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-curve", help="seen/unseen loss curve over a bit grid")
    p.add_argument("--run", required=True)
    p.add_argument("--bits", default="2.1:8.6:0.1")
    p.add_argument("--unseen-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_curve)

    p = sub.add_parser("pareto-report", help="hypervolume and gap report over curves")
    p.add_argument("--curves", nargs="+", required=True)
    p.add_argument("--ref", default="1,1")
    p.add_argument("--baseline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pareto_report)

    p = sub.add_parser("select-config", help="pick a configuration at a bit budget")
    p.add_argument("--run", required=True)
    p.add_argument("--bits", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_config)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except InfeasibleError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericError, TrainingError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
