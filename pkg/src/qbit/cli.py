"""Command-line surface: train / profile / sweep.

A run config is one JSON file with "model", "quant", "train" and "data"
sections (each maps onto the matching dataclass) plus an optional
"teacher_checkpoint" path.  Every command is deterministic given its seed:
rerunning with identical inputs rewrites byte-identical logs, checkpoints
and manifests.  QBIT_THREADS caps the sweep worker pool.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .model import TransformerConfig
from .profiler import profile_model, validate_table_fixture
from .quantizers import QuantSpec
from .trainer import QatDiverged, Schedule, SyntheticDataset, TrainConfig, \
    one_step_schedule, parse_schedule, run_qat, train_teacher

SWEEP_COLUMNS = ["precision", "seed", "schedule", "task_metric", "distill_mse"]


# -- config plumbing -----------------------------------------------------------

def load_config(path) -> dict:
    try:
        config = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise click.ClickException(f"cannot read config {path}: {err}")
    if not isinstance(config, dict):
        raise click.ClickException(f"config {path} must be a JSON object")
    return config


def build_run(config: dict) -> tuple[TransformerConfig, QuantSpec, TrainConfig,
                                     SyntheticDataset]:
    try:
        cfg = TransformerConfig(**config.get("model", {}))
        spec = QuantSpec(**config.get("quant", {}))
        train_section = dict(config.get("train", {}))
        train_section.pop("schedule", None)
        train_cfg = TrainConfig(**train_section)
        data = SyntheticDataset(seq_len=cfg.seq_len, model_dim=cfg.model_dim,
                                num_classes=cfg.num_classes,
                                **config.get("data", {}))
    except (TypeError, ValueError) as err:
        raise click.ClickException(f"invalid config: {err}")
    return cfg, spec, train_cfg, data


def code_hash() -> str:
    digest = hashlib.sha256()
    package = Path(__file__).parent
    for source in sorted(package.glob("*.py")):
        digest.update(source.name.encode())
        digest.update(source.read_bytes())
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seeds,
                   outputs: list[str], results: dict) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "code_hash": code_hash(),
        "outputs": sorted(outputs),
        "results": results,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _prepare_out(out, no_clobber: bool, names: list[str]) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if no_clobber:
        existing = [n for n in names if (out_dir / n).exists()]
        if existing:
            raise click.ClickException(
                f"refusing to overwrite {', '.join(existing)} in {out_dir}")
    return out_dir


def _load_teacher(config: dict, cfg: TransformerConfig):
    path = config.get("teacher_checkpoint")
    if not path:
        raise click.ClickException(
            "distillation needs a 'teacher_checkpoint' entry in the config")
    if not Path(path).exists():
        raise click.ClickException(f"teacher checkpoint not found: {path}")
    teacher, teacher_cfg, _ = load_checkpoint(path)
    if teacher_cfg != cfg:
        raise click.ClickException(
            f"teacher checkpoint {path} was trained with a different model config")
    return teacher


# -- commands -------------------------------------------------------------------

@click.group()
def main():
    """Desk-scale quantization-aware-training lab."""


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--schedule", "schedule_text", default=None,
              help="Precision schedule, e.g. 'w2a2' or 'fp16>w8a8>w4a4'.")
@click.option("--loss", type=click.Choice(["task", "distill"]), default=None,
              help="Override the loss kind from the config.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--no-clobber", is_flag=True, help="Refuse to overwrite outputs.")
def train(config_file, schedule_text, loss, out, no_clobber):
    """Run quantization-aware training and write checkpoint + metrics log."""
    config = load_config(config_file)
    cfg, spec, train_cfg, data = build_run(config)
    if loss is not None:
        train_cfg = replace(train_cfg, loss_kind=loss)

    text = schedule_text or config.get("train", {}).get("schedule")
    try:
        schedule = parse_schedule(text) if text else one_step_schedule(spec)
    except ValueError as err:
        raise click.ClickException(f"bad schedule: {err}")

    teacher = _load_teacher(config, cfg) if train_cfg.loss_kind == "distill" else None
    outputs = ["checkpoint.qbck", "metrics.jsonl", "manifest.json"]
    out_dir = _prepare_out(out, no_clobber, outputs)

    try:
        params, log = run_qat(teacher, cfg, spec, schedule, train_cfg, data)
    except (QatDiverged, ValueError) as err:
        raise click.ClickException(str(err))

    save_checkpoint(out_dir / "checkpoint.qbck", params, cfg, spec)
    (out_dir / "metrics.jsonl").write_text("\n".join(log.jsonl_records()) + "\n")
    write_manifest(out_dir, "train", config, [train_cfg.seed], outputs, log.final)
    click.echo(f"trained {schedule.text} [{train_cfg.loss_kind}] -> {out_dir}: "
               + json.dumps(log.final, sort_keys=True))


@main.command()
@click.argument("target", type=click.Path(exists=True, dir_okay=False))
@click.option("--fixture", type=click.Path(exists=True, dir_okay=False),
              help="Published cost table CSV to validate.")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Also write the report (and figures) to this directory.")
def profile(target, fixture, fmt, out):
    """Print the four-metric cost report; optionally validate a fixture table."""
    params = None
    if Path(target).read_bytes()[:4] == MAGIC:
        params, cfg, spec = load_checkpoint(target)
    else:
        cfg, spec, _, _ = build_run(load_config(target))
    report = profile_model(cfg, spec, params=params)

    if fmt == "json":
        rendered = json.dumps(report.as_dict(), sort_keys=True)
    else:
        rendered = ("storage_bytes,flops,quantops_bits,runtime_rel\n"
                    f"{report.storage_bytes},{report.flops},"
                    f"{report.quantops_bits},{report.runtime_rel:.6f}")
    click.echo(rendered)

    out_dir = Path(out) if out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        suffix = "json" if fmt == "json" else "csv"
        (out_dir / f"report.{suffix}").write_text(rendered + "\n")

    if fixture:
        try:
            checks = validate_table_fixture(fixture)
        except ValueError as err:
            raise click.ClickException(f"bad fixture: {err}")
        failed = 0
        for check in sorted(checks, key=lambda c: c.name):
            line = (f"{check.name:22s} runtime {check.runtime_computed:6.3f} "
                    f"(printed {check.runtime_printed:5.2f}) "
                    f"{'ok' if check.runtime_ok else 'FAIL'}")
            if check.storage_ok is not None:
                line += (f" | storage {check.storage_computed:7.3f} "
                         f"(printed {check.storage_printed:6.2f}) "
                         f"{'ok' if check.storage_ok else 'FAIL'}")
            click.echo(line)
            failed += 0 if check.ok else 1
        click.echo(f"{len(checks) - failed}/{len(checks)} rows pass")
        if out_dir:
            from .report import save_fixture_figure
            with open(out_dir / "fixture_report.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["name", "runtime_printed", "runtime_computed",
                                 "runtime_ok", "storage_printed",
                                 "storage_computed", "storage_ok"])
                for c in sorted(checks, key=lambda c: c.name):
                    writer.writerow([c.name, c.runtime_printed,
                                     f"{c.runtime_computed:.6f}", c.runtime_ok,
                                     c.storage_printed,
                                     "" if c.storage_computed is None
                                     else f"{c.storage_computed:.6f}",
                                     c.storage_ok])
            save_fixture_figure(sorted(checks, key=lambda c: c.name),
                                out_dir / "fixture_report.png")
        if failed:
            raise click.ClickException(f"{failed} fixture rows failed")


def _parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if not text:
        raise click.UsageError("empty seeds list")
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip() != ""]


def ladder_schedule(precision: str) -> Schedule:
    """fp16 warm start, then bit-halving symmetric rungs down to the target."""
    target = parse_schedule(precision).target
    if target.label == "fp16":
        return parse_schedule("fp16")
    rungs = [b for b in (8, 4, 2) if b > max(target.weight_bits, target.act_bits)]
    tokens = ["fp16"] + [f"w{b}a{b}" for b in rungs] + [target.label]
    return parse_schedule(">".join(tokens))


def _run_seed_cells(payload: dict) -> tuple[list[dict], list[str]]:
    """All sweep cells for one seed; runs inside a pool worker."""
    config = payload["config"]
    seed = payload["seed"]
    cfg, spec, train_cfg, _ = build_run(config)
    train_cfg = replace(train_cfg, seed=seed, loss_kind=payload["loss"])
    data = SyntheticDataset(seq_len=cfg.seq_len, model_dim=cfg.model_dim,
                            num_classes=cfg.num_classes,
                            seed=seed,
                            mask_prob=config.get("data", {}).get("mask_prob", 0.5))
    teacher, _ = train_teacher(cfg, train_cfg, data)

    rows, failures = [], []
    for precision in payload["precisions"]:
        schedules = []
        if payload["mode"] in ("onestep", "both"):
            schedules.append(parse_schedule(precision))
        if payload["mode"] in ("ladder", "both"):
            schedules.append(ladder_schedule(precision))
        for schedule in schedules:
            row = {"precision": precision, "seed": seed, "schedule": schedule.text,
                   "task_metric": "", "distill_mse": ""}
            try:
                stage_spec = spec.with_bits(schedule.target.weight_bits,
                                            schedule.target.act_bits)
                _, log = run_qat(teacher, cfg, stage_spec, schedule, train_cfg, data)
                row["task_metric"] = f"{log.final['masked_pred_accuracy']:.6f}"
                row["distill_mse"] = f"{log.final['distill_mse']:.8e}"
            except (QatDiverged, ValueError) as err:
                failures.append(f"precision={precision} seed={seed} "
                                f"schedule={schedule.text}: {err}")
            rows.append(row)
    return rows, failures


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--precisions", required=True,
              help="Comma-separated precision labels, e.g. 'w8a8,w4a4,w2a2,w1a1'.")
@click.option("--seeds", required=True, help="Comma list or range, e.g. '0..4'.")
@click.option("--loss", type=click.Choice(["task", "distill"]), default="distill")
@click.option("--schedule-mode", type=click.Choice(["onestep", "ladder", "both"]),
              default="onestep")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--no-clobber", is_flag=True)
def sweep(config_file, precisions, seeds, loss, schedule_mode, out, no_clobber):
    """Run the precision x seed grid and write a plot-ready CSV + figure."""
    config = load_config(config_file)
    build_run(config)  # fail fast on a bad config
    precision_list = [p.strip() for p in precisions.split(",") if p.strip()]
    if not precision_list:
        raise click.UsageError("empty precisions list")
    for token in precision_list:
        try:
            parse_schedule(token)
        except ValueError as err:
            raise click.UsageError(f"bad precision {token!r}: {err}")
    seed_list = _parse_seeds(seeds)
    if not seed_list:
        raise click.UsageError("empty seeds list")

    outputs = ["sweep.csv", "sweep.png", "manifest.json"]
    out_dir = _prepare_out(out, no_clobber, outputs)

    payloads = [{"config": config, "seed": s, "precisions": precision_list,
                 "mode": schedule_mode, "loss": loss} for s in seed_list]
    threads = int(os.environ.get("QBIT_THREADS", "1"))
    if threads > 1 and len(payloads) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_seed_cells, payloads))
    else:
        results = [_run_seed_cells(p) for p in payloads]

    rows = [row for cell_rows, _ in results for row in cell_rows]
    failures = [msg for _, cell_failures in results for msg in cell_failures]
    rows.sort(key=lambda r: (precision_list.index(r["precision"]), r["seed"],
                             r["schedule"]))

    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    from .report import save_sweep_figure
    save_sweep_figure(rows, precision_list, out_dir / "sweep.png")
    write_manifest(out_dir, "sweep", config, seed_list, outputs,
                   {"rows": len(rows), "failures": failures})

    click.echo(f"{len(rows)} cells -> {out_dir / 'sweep.csv'}")
    if failures:
        for msg in failures:
            click.echo(f"cell failed: {msg}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
