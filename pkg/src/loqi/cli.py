"""Command-line entry point wiring all modules together.

Exit codes: 0 success, 2 usage error, 3 validation/format error,
4 environment error (e.g. missing external encoder). Every successful
run writes a reproducibility record (resolved parameters plus tool
versions and encoder identities) into its output directory.
"""

from __future__ import annotations

import json
import platform
import sys
import time
from pathlib import Path

import click
import cv2
import numpy as np
import torch

from . import __version__
from .datamodel import (DatasetManifest, GeoPose, ImageRecord, load_db,
                        load_manifest, save_db, save_manifest)
from .degrade import (JPEG_ENCODER_ID, DegradationSpec, default_video_codec,
                      degrade_manifest)
from .distill import TrainingConfig, distill_epoch
from .errors import EnvironmentalError, FormatError, LoqiError, ValidationError
from .losses import LossWeights
from .modeladapter import (clone_as_branch_pair, create_extractor,
                           load_checkpoint)
from .panorama import SliceSpec, equirect_to_perspective
from .retrieval import (delta_report, extract_descriptors, format_delta,
                        format_recall, knn_search, recall_at_n)
from .visualize import channel_mean_map, cluster_weighted_map, occlusion_map, render_overlay

EXIT_VALIDATION = 3
EXIT_ENVIRONMENT = 4


def write_repro_record(out_dir, command: str, params: dict, extra: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "parameters": {k: str(v) for k, v in sorted(params.items())},
        "versions": {
            "loqi": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "opencv": cv2.__version__,
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        record.update(extra)
    (out_dir / "repro.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _load_config_defaults(ctx, param, value):
    """--config FILE: JSON whose keys become defaults for missing flags."""
    if value:
        try:
            ctx.default_map = dict(json.loads(Path(value).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise click.UsageError(f"cannot read config file {value}: {e}")
    return value


config_option = click.option(
    "--config", callback=_load_config_defaults, is_eager=True,
    expose_value=False, help="JSON file with default parameter values.")


@click.group()
@click.version_option(__version__)
def cli():
    """Descriptor distillation and place-recognition evaluation tools."""


@cli.command()
@config_option
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--mode", required=True,
              help="jpeg:<q> | resize:<w>x<h> | videoqp:<qp>")
@click.option("--out", "out_dir", required=True, type=click.Path())
def degrade(manifest_path, mode, out_dir):
    """Produce the degraded counterpart of every image in a manifest."""
    manifest = load_manifest(manifest_path)
    spec = DegradationSpec.parse(mode)
    degraded = degrade_manifest(manifest, spec, out_dir)
    save_manifest(degraded, Path(out_dir) / "manifest.csv")
    write_repro_record(out_dir, "degrade",
                       {"manifest": manifest_path, "mode": mode, "out": out_dir},
                       {"encoder_id": degraded.encoder_id})
    click.echo(f"degraded {len(degraded)} images -> {out_dir}/manifest.csv")


@cli.command("slice-pano")
@config_option
@click.option("--input", "input_dir", required=True, type=click.Path())
@click.option("--views", default=18, show_default=True)
@click.option("--fov", default=90.0, show_default=True)
@click.option("--size", default="1440x810", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def slice_pano(input_dir, views, fov, size, out_dir):
    """Slice equirectangular frames into perspective view sequences."""
    try:
        w, h = (int(v) for v in size.split("x"))
    except ValueError:
        raise click.UsageError(f"bad --size {size!r}, expected WxH")
    spec = SliceSpec(num_views=views, fov_deg=fov, out_width=w, out_height=h)
    frames = sorted(p for p in Path(input_dir).iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not frames:
        raise ValidationError(f"no panorama frames found in {input_dir}")
    out_dir = Path(out_dir)
    records_per_view = [[] for _ in range(views)]
    for t, frame_path in enumerate(frames):
        pano = cv2.imread(str(frame_path), cv2.IMREAD_COLOR)
        if pano is None:
            raise ValidationError(f"unreadable panorama {frame_path}")
        for k, yaw in enumerate(spec.yaws()):
            view = equirect_to_perspective(pano, yaw, spec.pitch_deg,
                                           spec.fov_deg, w, h)
            vdir = out_dir / f"view{k:02d}"
            vdir.mkdir(parents=True, exist_ok=True)
            path = vdir / f"frame{t:05d}.png"
            cv2.imwrite(str(path), view)
            records_per_view[k].append(ImageRecord(
                id=f"v{k:02d}f{t:05d}", path=str(path),
                pose=GeoPose.frame_index(t)))
    for k in range(views):
        save_manifest(DatasetManifest(
            name=f"view{k:02d}", split="database",
            records=tuple(records_per_view[k]), gt_mode="index",
            gt_threshold=1), out_dir / f"view{k:02d}.csv")
    write_repro_record(out_dir, "slice-pano",
                       {"input": input_dir, "views": views, "fov": fov,
                        "size": size, "out": str(out_dir)})
    click.echo(f"sliced {len(frames)} frames into {views} view sequences")


@cli.command("train-distill")
@config_option
@click.option("--pairs", nargs=2, required=True, type=click.Path(),
              help="High-quality and low-quality manifest paths.")
@click.option("--extractor", default="toy", show_default=True)
@click.option("--losses", default="ickd,mse,triplet", show_default=True)
@click.option("--alpha", default=1e5, show_default=True)
@click.option("--beta", default=1e4, show_default=True)
@click.option("--margin", default=0.1, show_default=True)
@click.option("--negatives", default=5, show_default=True)
@click.option("--epochs", default=1, show_default=True)
@click.option("--lr", default=1e-5, show_default=True)
@click.option("--radius", default=25.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_distill(pairs, extractor, losses, alpha, beta, margin, negatives,
                  epochs, lr, radius, seed, out_dir):
    """Distill a student extractor from its frozen teacher copy."""
    high = load_manifest(pairs[0])
    low = load_manifest(pairs[1])
    mask = frozenset(x.strip() for x in losses.split(",") if x.strip())
    cfg = TrainingConfig(
        lr_init=lr, negatives_per_sample=negatives, epochs=epochs,
        loss_mask=mask, weights=LossWeights(alpha=alpha, beta=beta, margin_m=margin),
        positive_radius=radius)
    torch.manual_seed(seed)
    handle = create_extractor(extractor, seed=seed)
    pair = clone_as_branch_pair(handle)
    reports = []
    for epoch in range(cfg.epochs):
        reports.append(distill_epoch(pair, high, low, cfg, out_dir,
                                     rng_seed=seed + epoch))
    out = Path(out_dir)
    summary = [{"epoch": i, "steps": r.steps, "samples": r.samples_visited,
                "skipped_no_positive": r.skipped_no_positive,
                "mean_losses": {k: r.mean_loss(k) for k in sorted(mask)},
                "final_param_hash": r.final_param_hash}
               for i, r in enumerate(reports)]
    (out / "epoch_report.json").write_text(json.dumps(summary, indent=2))
    write_repro_record(out_dir, "train-distill",
                       {"pairs": pairs, "extractor": extractor, "losses": losses,
                        "alpha": alpha, "beta": beta, "margin": margin,
                        "negatives": negatives, "epochs": epochs, "lr": lr,
                        "radius": radius, "seed": seed},
                       {"extractor_id": handle.identity})
    click.echo(f"trained {sum(r.steps for r in reports)} steps -> {out}/student.pt")


@cli.command()
@config_option
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--extractor", default="toy", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--checkpoint", type=click.Path(), default=None,
              help="Optional student checkpoint to load.")
@click.option("--out", "out_path", required=True, type=click.Path())
def extract(manifest_path, extractor, seed, checkpoint, out_path):
    """Extract a descriptor database from a manifest."""
    manifest = load_manifest(manifest_path)
    handle = create_extractor(extractor, seed=seed)
    if checkpoint:
        load_checkpoint(handle, checkpoint)
    db = extract_descriptors(handle, manifest)
    save_db(db, out_path)
    out_dir = Path(out_path).parent
    write_repro_record(out_dir, "extract",
                       {"manifest": manifest_path, "extractor": extractor,
                        "seed": seed, "checkpoint": checkpoint or "",
                        "out": out_path},
                       {"extractor_id": handle.identity})
    click.echo(f"extracted {len(db)} descriptors -> {out_path}")


@cli.command()
@config_option
@click.option("--queries", required=True, type=click.Path())
@click.option("--database", required=True, type=click.Path())
@click.option("--query-manifest", required=True, type=click.Path())
@click.option("--db-manifest", required=True, type=click.Path())
@click.option("--threshold", default=25.0, show_default=True)
@click.option("--at", "ns", default="1,2,5,10", show_default=True)
@click.option("--label", default="", help="Configuration label for the report.")
@click.option("--out", "out_path", required=True, type=click.Path())
def evaluate(queries, database, query_manifest, db_manifest, threshold, ns,
             label, out_path):
    """Score Recall@N for a query database against a reference database."""
    q_db = load_db(queries)
    d_db = load_db(database)
    qm = load_manifest(query_manifest)
    dm = load_manifest(db_manifest)
    n_list = sorted(int(x) for x in ns.split(","))
    results = knn_search(q_db, d_db, min(max(n_list), len(d_db)))
    report = recall_at_n(results, qm, dm, threshold, n_list, config_label=label)
    Path(out_path).write_text(format_recall(report))
    write_repro_record(Path(out_path).parent, "evaluate",
                       {"queries": queries, "database": database,
                        "query_manifest": query_manifest,
                        "db_manifest": db_manifest, "threshold": threshold,
                        "at": ns, "label": label})
    click.echo(format_recall(report), nl=False)


def _parse_recall_file(path):
    from .retrieval import RecallReport
    lines = Path(path).read_text().splitlines()
    meta = {}
    recall = {}
    for line in lines:
        if line.startswith("#"):
            for tok in line.lstrip("# ").split():
                k, _, v = tok.partition("=")
                meta[k] = v
        elif line.strip():
            n_s, val = line.split("\t")
            recall[int(n_s[2:])] = float(val)
    return RecallReport(dataset=meta.get("dataset", ""),
                        threshold=float(meta.get("threshold", 25.0)),
                        recall=recall, config_label=meta.get("config", ""))


@cli.command()
@config_option
@click.option("--baseline", required=True, type=click.Path())
@click.option("--treated", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def report(baseline, treated, out_dir):
    """Delta table and recall-vs-N plot for two recall reports."""
    base = _parse_recall_file(baseline)
    trea = _parse_recall_file(treated)
    deltas = delta_report(base, trea)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "deltas.tsv").write_text(format_delta(deltas))
    _plot_recall(base, trea, out / "recall.png")
    write_repro_record(out_dir, "report",
                       {"baseline": baseline, "treated": treated})
    click.echo(format_delta(deltas), nl=False)


def _plot_recall(base, treated, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    ns = sorted(base.recall)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ns, [base.recall[n] for n in ns], "o-",
            label=base.config_label or "baseline")
    ax.plot(ns, [treated.recall[n] for n in ns], "s-",
            label=treated.config_label or "treated")
    ax.set_xlabel("N")
    ax.set_ylabel("Recall@N (%)")
    ax.set_title(base.dataset)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


@cli.command()
@config_option
@click.option("--method", required=True,
              type=click.Choice(["channel-mean", "cluster", "occlusion"]))
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--extractor", default="toy", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--patch", default=32, show_default=True)
@click.option("--stride", default=32, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def viz(method, image_path, extractor, seed, checkpoint, patch, stride, out_path):
    """Render an activation-map overlay for one image."""
    img = cv2.imread(image_path, cv2.IMREAD_COLOR)
    if img is None:
        raise ValidationError(f"unreadable image {image_path}")
    handle = create_extractor(extractor, seed=seed)
    if checkpoint:
        load_checkpoint(handle, checkpoint)
    if method == "occlusion":
        amap = occlusion_map(handle, img, patch, stride)
    else:
        z = handle.encode(img).detach()
        if method == "channel-mean":
            amap = channel_mean_map(z)
        else:
            c = z.shape[0]
            uniform = np.full(tuple(z.shape), 1.0 / c)
            amap = cluster_weighted_map(z, uniform)
    cv2.imwrite(out_path, render_overlay(amap, img))
    write_repro_record(Path(out_path).parent, "viz",
                       {"method": method, "image": image_path,
                        "extractor": extractor, "seed": seed,
                        "checkpoint": checkpoint or "", "patch": patch,
                        "stride": stride})
    click.echo(f"wrote {out_path}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        click.echo(f"error usage: {e.format_message()}", err=True)
        return 2
    except (ValidationError, FormatError) as e:
        click.echo(f"error validation: {e}", err=True)
        return EXIT_VALIDATION
    except EnvironmentalError as e:
        click.echo(f"error environment: {e}", err=True)
        return EXIT_ENVIRONMENT
    except LoqiError as e:
        click.echo(f"error internal: {e}", err=True)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
