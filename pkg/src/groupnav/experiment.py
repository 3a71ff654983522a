"""File-level pipeline steps: environment bundle, training run, robustness report."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

from . import __version__
from .config import ExperimentConfig
from .envgraph import EnvBundle, build_bundle
from .evaluate import robustness_table
from .policy import PolicyParams, checkpoint_from_dict, checkpoint_to_dict
from .train import LOG_COLUMNS, TrainingAborted, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "perturbation", "mode", "level", "seed", "OSR", "NE", "SR", "SPL", "dSPL")
ENV_FILE = "env.json"
LOG_FILE = "train_log.csv"
REPORT_CSV = "robustness.csv"
REPORT_JSON = "robustness.json"


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _read_json(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _csv_text(rows: list[dict], columns, header: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def read_csv(path: Path) -> tuple[dict, list[dict]]:
    """Returns (header echo, rows as strings)."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing config echo line")
        header = json.loads(first[2:])
        rows = list(csv.DictReader(fh))
    return header, rows


def gen_env(cfg: ExperimentConfig, out_dir: Path) -> Path:
    e = cfg.env
    bundle = build_bundle(
        n_train_graphs=e.train_graphs, n_val_graphs=e.val_graphs, episodes_per_graph=e.episodes_per_graph,
        n_nodes=e.n_nodes, area_side=e.area_side, connect_radius=e.connect_radius, l_range=tuple(e.l_range),
        noise_sigma=e.noise_sigma, epsilon=e.epsilon, seed=cfg.seed, config=cfg.echo(),
    )
    path = _write_json(out_dir / ENV_FILE, bundle.to_dict(__version__))
    load_bundle(path)
    return path


def load_bundle(path: Path) -> EnvBundle:
    return EnvBundle.from_dict(_read_json(path))


def save_checkpoint(path: Path, params: PolicyParams, ref: PolicyParams | None, phase: str,
                    cfg: ExperimentConfig) -> Path:
    return _write_json(path, checkpoint_to_dict(params, ref, phase, __version__, cfg.echo()))


def load_checkpoint(path: Path):
    return checkpoint_from_dict(_read_json(path))


def run_training(cfg: ExperimentConfig, bundle_path: Path, out_dir: Path, workers: int = 1) -> dict:
    bundle = load_bundle(bundle_path)
    tcfg = cfg.train_config()
    header = {"artifact_version": __version__, "config": cfg.echo()}
    try:
        result = train(tcfg, bundle, workers=workers)
    except TrainingAborted as exc:
        save_checkpoint(out_dir / "checkpoint_last.json", exc.last_params, exc.ref, "aborted", cfg)
        raise
    paths = {
        "post_sft": save_checkpoint(out_dir / "checkpoint_post_sft.json", result.checkpoints["post_sft"],
                                    result.ref, "post_sft", cfg),
        "final": save_checkpoint(out_dir / "checkpoint_final.json", result.checkpoints["final"],
                                 result.ref, "final", cfg),
    }
    log_path = out_dir / LOG_FILE
    log_path.write_text(_csv_text(result.log_rows, LOG_COLUMNS, header))
    _, rows = read_csv(log_path)
    if len(rows) != len(result.log_rows):
        raise RuntimeError(f"{log_path}: wrote {len(result.log_rows)} rows, read back {len(rows)}")
    paths["log"] = log_path
    return paths


def run_eval(cfg: ExperimentConfig, bundle_path: Path, checkpoints: dict, out_dir: Path,
             specs=None, split: str = "val_unseen", workers: int = 1) -> dict:
    """``checkpoints`` maps a method name to one checkpoint path or a list (one per eval seed)."""
    bundle = load_bundle(bundle_path)
    methods = {}
    for name, ref in checkpoints.items():
        paths = ref if isinstance(ref, (list, tuple)) else [ref]
        params = [load_checkpoint(Path(p))[0] for p in paths]
        methods[name] = params if len(params) > 1 else params[0]
    specs = list(specs) if specs is not None else cfg.eval.specs()
    seeds = list(cfg.eval.seeds)
    table = robustness_table(methods, bundle, bundle.splits[split], specs, seeds, workers=workers)
    header = {"artifact_version": __version__, "config": cfg.echo(), "split": split,
              "checkpoints": {k: [str(p) for p in (v if isinstance(v, (list, tuple)) else [v])]
                              for k, v in checkpoints.items()}}
    csv_path = out_dir / REPORT_CSV
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(_csv_text(table["rows"], REPORT_COLUMNS, header))
    json_path = _write_json(out_dir / REPORT_JSON, {**header, **table})
    _validate_report(csv_path, json_path)
    return {"csv": csv_path, "json": json_path, "table": table}


def _validate_report(csv_path: Path, json_path: Path) -> None:
    _, rows = read_csv(csv_path)
    data = _read_json(json_path)
    if len(rows) != len(data["rows"]):
        raise RuntimeError("report CSV and JSON disagree on row count")
    for row in data["rows"]:
        if not 0.0 <= row["SPL"] <= row["SR"] + 1e-9 <= row["OSR"] + 2e-9 <= 100.0 + 2e-9:
            raise RuntimeError(f"metric ordering violated in report row {row}")


def format_report(data: dict) -> str:
    """Markdown table in the global/early perturbation layout, averaged over seeds."""
    lines = [
        f"groupnav {data.get('artifact_version', '?')} - split {data.get('split', '?')}",
        "",
        "| Method | Perturbation | OSR | NE | SR | SPL | dSPL |",
        "|---|---|---:|---:|---:|---:|---:|",
    ]
    for r in data["summary"]:
        lines.append(f"| {r['method']} | {r['perturbation']} | {r['OSR']:.2f} | {r['NE']:.2f} | "
                     f"{r['SR']:.2f} | {r['SPL']:.2f} | {r['dSPL']:.2f} |")
    return "\n".join(lines) + "\n"


def write_report(json_paths, out_path: Path) -> Path:
    parts = [format_report(_read_json(Path(p))) for p in json_paths]
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts))
    return out_path
