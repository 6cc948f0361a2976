"""Command-line entry point: ``dualattn <command> [--config file.json] [flags]``.

Exit codes: 0 success, 2 bad config or flags, 3 solver convergence failure or
training divergence, 4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from . import evalkit, synthdata
from .consistency import project_consistent_oracle, solve_witness
from .errors import ConvergenceFailure, FormatError, RejectedInput, TrainingDiverged
from .grid import (
    ProbabilityMap,
    build_neighborhood,
    build_neighborhood_1d,
    read_map_csv,
    write_map_csv,
)
from .toynet import TrainConfig, load_checkpoint, predict, save_checkpoint, train, upsample_attention, write_metrics
from .toynet.model import COARSE_SIDE, FINE_SIDE, NMAP

log = logging.getLogger("dualattn")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4


# helpers ------------------------------------------------------------------------------

def _echo_config(directory: Path, command: str, resolved: dict):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(cfg.dump(command, resolved))


def _update_summary(run: Path, values: dict):
    path = run / "summary.json"
    summary = json.loads(path.read_text()) if path.exists() else {}
    summary.update(values)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _tau_pair(resolved):
    tau_f = read_map_csv(resolved["tau_fine"])
    tau_c = read_map_csv(resolved["tau_coarse"])
    fine, coarse = resolved["fine"], resolved["coarse"]
    if tau_f.values.ndim == 1 and tau_c.values.ndim == 1:
        nmap = build_neighborhood_1d(fine, coarse)
    else:
        nmap = build_neighborhood(fine, coarse)
    if tau_f.size != nmap.n_fine or tau_c.size != nmap.n_coarse:
        raise RejectedInput(f"CSV sizes {tau_f.size}/{tau_c.size} do not match --fine {fine} / --coarse {coarse}")
    return tau_f, tau_c, nmap


def _load_run(run: Path):
    params, train_cfg = load_checkpoint(run / "checkpoint.catn")
    return params, train_cfg


def _attribution_path(run: Path, source: str) -> Path:
    return run / "attributions" / f"{source}.npz"


def _records(run: Path, source: str, dataset, seed: int = 0):
    if source == "random":
        att = np.stack([evalkit.random_attribution(dataset.images.shape[1:], seed + i) for i in range(len(dataset))])
    else:
        path = _attribution_path(run, source)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `dualattn attribute` first")
        with np.load(path) as z:
            att = z["attribution"]
        if len(att) != len(dataset):
            raise RejectedInput(f"{path} holds {len(att)} records but the dataset has {len(dataset)}")
    return [
        evalkit.AttributionRecord(att[i], dataset.images[i], int(dataset.labels[i]), dataset.masks[i])
        for i in range(len(dataset))
    ]


def cvx_project_batch(tau_fine: np.ndarray, tau_coarse: np.ndarray, tol: float):
    """Post-hoc KL projection of each attention pair onto the consistent set."""
    mu_f, mu_c = np.empty_like(tau_fine), np.empty_like(tau_coarse)
    for i in range(len(tau_fine)):
        pair = project_consistent_oracle(
            ProbabilityMap(tau_fine[i]).smoothed(), ProbabilityMap(tau_coarse[i]).smoothed(), NMAP, tol=tol
        )
        mu_f[i], mu_c[i] = pair.mu_fine.flat, pair.mu_coarse.flat
    return mu_f, mu_c


# commands -----------------------------------------------------------------------------

def cmd_synth(r):
    spec = synthdata.DatasetSpec(
        count=r["count"], pos_frac=r["pos_frac"], intensity_min=r["intensity_min"], intensity_max=r["intensity_max"],
        radius_min=r["radius_min"], radius_max=r["radius_max"], texture=r["texture"], noise=r["noise"], seed=r["seed"],
    )
    out = Path(r["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = synthdata.generate(spec)
    synthdata.save(ds, out)
    out.with_name(out.name + ".config.json").write_text(cfg.dump("synth", r))
    print(f"wrote {len(ds)} samples ({int(ds.labels.sum())} positive) to {out}")


def cmd_train(r):
    out = Path(r["out"])
    train_cfg = TrainConfig(
        variant=r["variant"], alpha=r["alpha"], learning_rate=r["learning_rate"], epochs=r["epochs"],
        batch_size=r["batch_size"], seed=r["seed"], witness=r["witness"], key_scale=r["key_scale"],
    )
    data = synthdata.load(r["data"])
    held_out = synthdata.load(r["eval_data"]) if r["eval_data"] else None
    init = None
    if r["init_from"]:
        source, _ = _load_run(Path(r["init_from"]))
        init = {k: v for k, v in source.items() if not k.startswith(("fine.", "coarse.", "witness."))}
    _echo_config(out, "train", r)
    result = train(data, train_cfg, eval_dataset=held_out, init=init)
    save_checkpoint(out / "checkpoint.catn", result.params, train_cfg)
    write_metrics(result.log, out / "metrics.csv")
    last = result.log[-1]
    summary = {"final_train_accuracy": last["train_accuracy"]}
    for k in ("ce", "penalty", "residual", "eval_accuracy", "eval_residual"):
        if last.get(k) is not None:
            summary[f"final_{k}"] = last[k]
    if result.log[0].get("eval_residual") is not None:
        summary["initial_eval_residual"] = result.log[0]["eval_residual"]
    _update_summary(out, summary)
    print(f"trained {train_cfg.variant} for {train_cfg.epochs} epochs; checkpoint in {out}")


def cmd_project(r):
    tau_f, tau_c, nmap = _tau_pair(r)
    pair = project_consistent_oracle(tau_f.smoothed(), tau_c.smoothed(), nmap, tol=r["tol"])
    out = Path(r["out"])
    _echo_config(out, "project", r)
    write_map_csv(pair.mu_fine, out / "mu_fine.csv")
    write_map_csv(pair.mu_coarse, out / "mu_coarse.csv")
    summary = {"objective": pair.objective, "residual": pair.residual, "iterations": pair.iterations}
    _update_summary(out, summary)
    print(f"objective {pair.objective:.17g} residual {pair.residual:.3g} iterations {pair.iterations}")


def cmd_witness(r):
    tau_f, tau_c, nmap = _tau_pair(r)
    w = solve_witness(tau_f, tau_c, nmap)
    if r["out"] is None:
        print(",".join(f"{x:.17g}" for x in w.lam))
        return
    out = Path(r["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    lam = w.lam if tau_c.values.ndim == 1 else w.lam.reshape(tau_c.values.shape)
    write_map_csv(lam, out)
    out.with_name(out.name + ".config.json").write_text(cfg.dump("witness", r))
    print(" ".join(f"{x:.7f}" for x in w.lam))


def cmd_attribute(r):
    run = Path(r["run"])
    params, train_cfg = _load_run(run)
    site = r["site"]
    if site not in train_cfg.sites:
        raise RejectedInput(f"variant {train_cfg.variant!r} has no {site} attention unit")
    if r["cvx"] and len(train_cfg.sites) < 2:
        raise RejectedInput("projection needs both attention sites")
    data = synthdata.load(r["data"])
    _, fine, coarse, _ = predict(params, train_cfg, data.images)
    if r["cvx"]:
        fine, coarse = cvx_project_batch(fine, coarse, r["tol"])
    tau = fine if site == "fine" else coarse
    att = upsample_attention(tau, FINE_SIDE if site == "fine" else COARSE_SIDE)
    source = site + ("_cvx" if r["cvx"] else "")
    (run / "attributions").mkdir(parents=True, exist_ok=True)
    np.savez(_attribution_path(run, source), attribution=att, labels=data.labels, tau=tau)
    heat = run / "heatmaps"
    heat.mkdir(exist_ok=True)
    for i in range(min(r["heatmaps"], len(att))):
        evalkit.write_pgm(att[i], heat / f"{source}_{i:04d}.pgm")
        write_map_csv(att[i], heat / f"{source}_{i:04d}.csv")
    (run / f"attribute_{source}.config.json").write_text(cfg.dump("attribute", r))
    print(f"wrote {len(att)} {source} attributions to {run / 'attributions'}")


def _scorer(run_dir: Path):
    params, scorer_cfg = _load_run(run_dir)

    def score(images):
        return np.argmax(predict(params, scorer_cfg, images)[0], axis=1)

    return score


def cmd_perturb(r):
    run = Path(r["run"])
    data = synthdata.load(r["data"])
    records = _records(run, r["source"], data, r["seed"])
    step = r["fraction_step"]
    n = int(round(1.0 / step))
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise RejectedInput("fraction step must divide 1")
    curve = evalkit.perturbation_curve(_scorer(Path(r["scorer"])), records, np.round(np.linspace(0, 1, n + 1), 12))
    auc = evalkit.curve_auc(curve)
    evalkit.write_curve_csv(curve, run / f"perturb_{r['source']}.csv")
    (run / f"perturb_{r['source']}.config.json").write_text(cfg.dump("perturb", r))
    _update_summary(run, {f"auc_{r['source']}": auc})
    print(f"AUC {auc:.4f}")


def cmd_eval(r):
    run = Path(r["run"])
    data = synthdata.load(r["data"])
    records = [rec for rec in _records(run, r["source"], data) if rec.label == 1]
    if not records:
        raise RejectedInput("no positive samples to evaluate against")
    rows = evalkit.segmentation_table(records)
    ids = np.flatnonzero(data.labels == 1)
    for row, i in zip(rows, ids):
        row["record_id"] = int(i)
    evalkit.write_segmentation_csv(rows, run / f"segmentation_{r['source']}.csv")
    (run / f"eval_{r['source']}.config.json").write_text(cfg.dump("eval", r))
    summary = {f"map_{r['source']}": 100.0 * float(np.mean([x["ap"] for x in rows]))}
    for q in ("975", "95", "90"):
        summary[f"iou{q}_{r['source']}"] = 100.0 * float(np.mean([x[f"iou_q{q}"] for x in rows]))
    _update_summary(run, summary)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))


def aggregate(runs) -> dict:
    """Mean and sample standard deviation of every numeric summary key shared by all runs."""
    summaries = []
    for run in runs:
        path = Path(run) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found")
        summaries.append(json.loads(path.read_text()))
    shared = set.intersection(*(set(s) for s in summaries))
    table = {}
    for key in sorted(shared):
        vals = np.array([s[key] for s in summaries], dtype=np.float64)
        table[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0, len(vals))
    return table


def cmd_report(r):
    table = aggregate(r["runs"])
    out = Path(r["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std", "n"])
        for key, (m, s, n) in table.items():
            writer.writerow([key, f"{m:.17g}", f"{s:.17g}", n])
    (out / "config.json").write_text(cfg.dump("report", r))
    for key, (m, s, n) in table.items():
        print(f"{key}: {m:.2f} ± {s:.2f} (n={n})")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "project": cmd_project, "witness": cmd_witness,
    "attribute": cmd_attribute, "perturb": cmd_perturb, "eval": cmd_eval, "report": cmd_report,
}

HELP = {
    "synth": "generate a synthetic CADS dataset",
    "train": "train one model variant",
    "project": "KL-project a fine/coarse attention pair onto the consistent set",
    "witness": "closed-form multiplier for a fine/coarse attention pair",
    "attribute": "export attention attributions (optionally projected) for a dataset",
    "perturb": "input-perturbation curve and AUC for stored attributions",
    "eval": "IoU and mAP of stored attributions against masks",
    "report": "mean and std of summaries across runs",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in cfg.COMMANDS:
        p = sub.add_parser(command, help=HELP[command], description=HELP[command])
        p.add_argument("--config", help="JSON file with settings; flags override it")
        for key in cfg.keys_for(command):
            kwargs = {"help": f"{key.help} (default: {key.default})", "default": None, "dest": key.name}
            if key.type is bool:
                kwargs["action"] = argparse.BooleanOptionalAction
            elif key.type is list:
                kwargs["nargs"] = key.nargs
            else:
                kwargs["type"] = key.type
                if key.choices:
                    kwargs["choices"] = key.choices
            p.add_argument(key.flag, **kwargs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        file_values = cfg.load_config_file(args.config) if args.config else {}
        flags = {k.name: getattr(args, k.name) for k in cfg.keys_for(args.command)}
        resolved = cfg.resolve(args.command, file_values, flags)
        HANDLERS[args.command](resolved)
    except (ConvergenceFailure, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RejectedInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
