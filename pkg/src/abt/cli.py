"""``abt`` command line: synth, stats, pretrain, embed, probe, sweep.

Exit codes: 0 success, 1 user error (bad config or inputs), 2 internal error.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .checkpoint import CheckpointVersionError, CorruptCheckpointError, file_hash
from .config import PRESETS, RunConfig, dump_config, load_config
from .data import (DataError, DatasetStats, Manifest, SynthSpec, dataset_stats, load_spectrogram,
                   stats_from_spectrograms, synth_dataset)
from .dsp import AudioError, load_audio
from .eval import (Embedder, extract_scene_embeddings, extract_timestamp_embeddings,
                   Split, read_embeddings, stratified_split, train_probe, write_embeddings)
from .schema import ConfigError, from_dict
from .train import pretrain

log = logging.getLogger("abt")

USER_ERRORS = (ConfigError, DataError, AudioError, CorruptCheckpointError,
               CheckpointVersionError, FileNotFoundError)


class Ctx:
    def __init__(self, config, preset, seed, out_dir, overrides):
        self.config_path = config
        self.preset = preset
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.overrides = list(overrides)
        self._cfg = None

    @property
    def cfg(self) -> RunConfig:
        if self._cfg is None:
            self._cfg = load_config(self.config_path, self.preset, self.overrides, self.seed)
        return self._cfg

    def run_dir(self) -> Path:
        """Create the output directory and echo the resolved config into it."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, self.out_dir / "config.yaml")
        return self.out_dir

    def manifest_path(self, given: str | None) -> Path:
        path = given or self.cfg.paths.manifest or self.out_dir / "manifest.jsonl"
        return Path(path)


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
              help="YAML run config.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Named base config merged under --config.")
@click.option("--seed", type=int, default=None, help="Overrides every seed in the config.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="run", show_default=True)
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Config override, e.g. --set train.epochs=5 (repeatable).")
@click.version_option(__version__)
@click.pass_context
def cli(ctx, config, preset, seed, out_dir, log_level, overrides):
    """Barlow Twins audio representation learning at desk scale."""
    logging.basicConfig(level=log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx.obj = Ctx(config, preset, seed, out_dir, overrides)


@cli.command()
@click.argument("spec_file", required=False, type=click.Path(dir_okay=False))
@click.pass_obj
def synth(obj: Ctx, spec_file):
    """Write a synthetic labelled corpus (WAVs + manifest.jsonl) to --out-dir.

    SPEC_FILE is a YAML mapping of synthetic-corpus fields; without it the
    config's ``synth`` section is used.
    """
    spec = obj.cfg.synth
    if spec_file is not None:
        path = Path(spec_file)
        if not path.exists():
            raise FileNotFoundError(f"spec file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if obj.seed is not None:
            data["seed"] = obj.seed
        spec = from_dict(SynthSpec, data, "synth")
    spec.check_band(obj.cfg.mel)
    out = obj.run_dir()
    manifest, labels = synth_dataset(spec, out)
    counts = {c: labels.count(c) for c in sorted(set(labels))}
    click.echo(f"wrote {len(manifest)} clips to {out / 'manifest.jsonl'} {counts}")


@cli.command()
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--per-bin", is_flag=True, help="One mean/std per mel bin.")
@click.pass_obj
def stats(obj: Ctx, manifest, per_bin):
    """Dataset log-mel mean/std -> <out-dir>/stats.json."""
    m = Manifest.load(obj.manifest_path(manifest))
    st = dataset_stats(m, obj.cfg.mel, per_bin=per_bin)
    out = obj.run_dir() / "stats.json"
    st.save(out)
    click.echo(f"{out}: mean {np.mean(st.mean):.6g} std {np.mean(st.std):.6g} cells {st.n_cells}")


def _load_clips(m: Manifest, cfg: RunConfig) -> list[np.ndarray]:
    return [load_spectrogram(e, cfg.mel).values for e in m]


@cli.command("pretrain")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--stats", "stats_path", type=click.Path(dir_okay=False), default=None,
              help="Stats JSON; computed from the manifest when absent.")
@click.option("--resume", type=click.Path(dir_okay=False), default=None,
              help="Checkpoint to continue from.")
@click.pass_obj
def pretrain_cmd(obj: Ctx, manifest, stats_path, resume):
    """Self-supervised pretraining -> checkpoints/, final.ckpt, metrics.jsonl."""
    cfg = obj.cfg  # strict validation happens before any compute
    m = Manifest.load(obj.manifest_path(manifest))
    out = obj.run_dir()
    clips = _load_clips(m, cfg)
    stats_path = stats_path or cfg.paths.stats
    if stats_path:
        st = DatasetStats.load(stats_path)
    else:
        st = stats_from_spectrograms(clips, mel_config_hash=cfg.mel.digest())
        st.save(out / "stats.json")
    res = pretrain(cfg.train, clips, st, out_dir=out, resume=resume, mel_cfg=cfg.mel)
    last = res.metrics[-1]["loss"] if res.metrics else float("nan")
    click.echo(f"{res.state.step} steps in {res.seconds:.1f}s, final loss {last:.4f}; "
               f"checkpoint {res.checkpoint_path}")


def _embed(obj: Ctx, checkpoint: Path, m: Manifest, mode: str, pooling: str, prefix: Path,
           as_csv: bool) -> Path:
    embedder = Embedder.from_checkpoint(checkpoint, pooling=pooling)
    if mode == "scene":
        records = extract_scene_embeddings(
            embedder, [(e.clip_id, load_spectrogram(e, embedder.mel_cfg).values) for e in m])
    else:
        records = []
        for e in m:
            w = load_audio(e.path, embedder.mel_cfg.sample_rate_hz)
            records += extract_timestamp_embeddings(embedder, e.clip_id, w)
    ck_hash = file_hash(checkpoint)
    meta_path = prefix.with_suffix(".json")
    if meta_path.exists():
        old = json.loads(meta_path.read_text()).get("checkpoint_hash")
        if old and old != ck_hash:
            log.warning("overwriting embeddings made from a different checkpoint (%s != %s)",
                        old[:12], ck_hash[:12])
    write_embeddings(prefix, records, ck_hash, obj.cfg.hash, csv=as_csv)
    return prefix


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--mode", type=click.Choice(["scene", "timestamp"]), default="scene",
              show_default=True)
@click.option("--pooling", type=click.Choice(["mean", "max"]), default="mean", show_default=True)
@click.option("--name", default="embeddings", show_default=True, help="Output file prefix.")
@click.option("--csv", "as_csv", is_flag=True, help="Also write a CSV copy.")
@click.pass_obj
def embed(obj: Ctx, checkpoint, manifest, mode, pooling, name, as_csv):
    """Frozen-encoder embeddings -> <out-dir>/<name>.f32 + .json."""
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    m = Manifest.load(obj.manifest_path(manifest))
    out = obj.run_dir()
    prefix = _embed(obj, Path(checkpoint), m, mode, pooling, out / name, as_csv)
    _, meta = read_embeddings(prefix)
    click.echo(f"wrote {meta['n_rows']} x {meta['dim']} embeddings to {prefix.with_suffix('.f32')}")


def _read_labels(path: Path) -> dict[str, str]:
    """clip_id -> label from a manifest (.jsonl) or a two-column CSV."""
    if not path.exists():
        raise FileNotFoundError(f"labels file not found: {path}")
    out: dict[str, str] = {}
    if path.suffix == ".jsonl":
        for e in Manifest.load(path, check_paths=False):
            if e.label is not None:
                out[e.clip_id] = e.label
    else:
        with open(path, newline="") as f:
            for row in csv.reader(f):
                if row and row[0] != "clip_id":
                    if len(row) < 2:
                        raise DataError(f"{path}: expected clip_id,label rows")
                    out[row[0]] = row[1]
    if not out:
        raise DataError(f"{path}: no labels")
    return out


def _probe(obj: Ctx, prefix: Path, labels: dict[str, str], multilabel: bool, task: str):
    X, meta = read_embeddings(prefix)
    missing = sorted(set(meta["clip_ids"]) - set(labels))
    if missing:
        raise DataError(f"{len(missing)} embedded clips have no label, e.g. {missing[0]}")
    y = [labels[c] for c in meta["clip_ids"]]
    cfg = obj.cfg
    grid = cfg.probe_configs()
    if multilabel:
        for g in grid:
            g.task_type = "multilabel"
    # split by clip so timestamp rows of one clip never straddle splits
    clip_ids = list(dict.fromkeys(meta["clip_ids"]))
    split = stratified_split([labels[c] for c in clip_ids], seed=cfg.probe.seed)
    part = {c: k for k, idx in enumerate((split.train, split.val, split.test))
            for c in (clip_ids[i] for i in idx)}
    rows = [np.array([i for i, c in enumerate(meta["clip_ids"]) if part[c] == k], dtype=int)
            for k in range(3)]
    return train_probe(X, y, Split(*rows), grid, task_name=task), meta


@cli.command()
@click.option("--embeddings", required=True, help="Embedding prefix (without .f32/.json).")
@click.option("--labels", "labels_path", required=True, type=click.Path(dir_okay=False),
              help="Manifest .jsonl or clip_id,label CSV; ';' separates multilabels.")
@click.option("--multilabel", is_flag=True, help="Multilabel task, reports mAP.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Warn when the embeddings were not made from this checkpoint.")
@click.option("--task", default="task", show_default=True)
@click.pass_obj
def probe(obj: Ctx, embeddings, labels_path, multilabel, checkpoint, task):
    """Shallow-MLP probe on frozen embeddings -> <out-dir>/probe_report.json."""
    labels = _read_labels(Path(labels_path))
    prefix = Path(embeddings)
    if checkpoint is not None:
        _, meta = read_embeddings(prefix)
        h = file_hash(checkpoint)
        if meta.get("checkpoint_hash") != h:
            log.warning("embeddings were made from checkpoint %s, not %s",
                        str(meta.get("checkpoint_hash"))[:12], h[:12])
    report, _ = _probe(obj, prefix, labels, multilabel, task)
    out = obj.run_dir() / "probe_report.json"
    data = report.to_json() | {"config_hash": obj.cfg.hash}
    out.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    click.echo(f"{report.metric_name} {report.value:.4f} ({report.chosen_config_id}) -> {out}")


SWEEP_FIELDS = ["config_id", "probe_metric", "final_loss"]


def _read_grid(path: Path) -> list[tuple[str, list[str]]]:
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    data = yaml.safe_load(path.read_text())
    points = data.get("points") if isinstance(data, dict) else data
    if not isinstance(points, list) or not points:
        raise ConfigError(f"{path}: expected a non-empty list of points")
    out, seen = [], set()
    for i, p in enumerate(points):
        if not isinstance(p, dict) or "id" not in p or set(p) - {"id", "set"}:
            raise ConfigError(f"{path}: point {i} must be a mapping with 'id' and 'set'")
        pid = str(p["id"])
        if pid in seen:
            raise ConfigError(f"{path}: duplicate config id {pid!r}")
        seen.add(pid)
        sets = p.get("set") or []
        if isinstance(sets, dict):
            sets = [f"{k}={json.dumps(v)}" for k, v in sets.items()]
        out.append((pid, [str(s) for s in sets]))
    return out


@cli.command()
@click.argument("grid_file", type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def sweep(obj: Ctx, grid_file, manifest):
    """Short pretraining + probe per grid point -> sweep_report.csv (best first).

    Finished points are appended to sweep_rows.csv as they complete; rerunning
    skips them, so an interrupted sweep resumes where it stopped.
    """
    points = _read_grid(Path(grid_file))
    for pid, sets in points:  # validate every point before any compute
        load_config(obj.config_path, obj.preset, obj.overrides + sets, obj.seed)
    m = Manifest.load(obj.manifest_path(manifest))
    if any(e.label is None for e in m):
        raise DataError("sweep needs a labelled manifest")
    out = obj.run_dir()
    clips = _load_clips(m, obj.cfg)
    labels = {e.clip_id: e.label for e in m}
    rows_path = out / "sweep_rows.csv"
    done: dict[str, dict] = {}
    if rows_path.exists():
        with open(rows_path, newline="") as f:
            done = {r["config_id"]: r for r in csv.DictReader(f)}
    else:
        rows_path.write_text(",".join(SWEEP_FIELDS) + "\n")
    for pid, sets in points:
        if pid in done:
            log.info("sweep point %s already complete", pid)
            continue
        sub = Ctx(obj.config_path, obj.preset, obj.seed, out / "points" / pid,
                  obj.overrides + sets)
        cfg = sub.cfg
        run = sub.run_dir()
        st = stats_from_spectrograms(clips, mel_config_hash=cfg.mel.digest())
        res = pretrain(cfg.train, clips, st, out_dir=run, mel_cfg=cfg.mel)
        prefix = _embed(sub, res.checkpoint_path, m, "scene", "mean", run / "embeddings", False)
        report, _ = _probe(sub, prefix, labels, False, pid)
        row = {"config_id": pid, "probe_metric": f"{report.value:.6f}",
               "final_loss": f"{res.metrics[-1]['loss']:.6f}"}
        with open(rows_path, "a", newline="") as f:
            csv.DictWriter(f, SWEEP_FIELDS).writerow(row)
        done[pid] = row
        click.echo(f"{pid}: {report.metric_name} {report.value:.4f}")
    ranked = sorted((done[pid] for pid, _ in points),
                    key=lambda r: (-float(r["probe_metric"]), r["config_id"]))
    with open(out / "sweep_report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, SWEEP_FIELDS)
        w.writeheader()
        w.writerows(ranked)
    click.echo(f"report: {out / 'sweep_report.csv'}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="abt", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except USER_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        click.echo(f"internal error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
