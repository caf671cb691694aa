"""``covermap`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 check failure.
Errors are also reported as a JSON object on stderr.
"""

from __future__ import annotations

import functools
import json
import os
import shlex
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import CheckFailure, ConfigError, CovermapError, FormatError
from .fishnet import (
    build_fishnet,
    predict_tiled,
    seam_score,
    spline_window_1d,
    stitch_blend,
    stitch_clip,
    stitch_naive,
)
from .losses import IoUResult, LOSS_IDS, gradient_check, iou_per_class, toy_train
from .raster import HeatMap, LabelMask, RasterF32, Window, load_raster, save_raster
from .stats import dataset_statistics, extract_samples
from .synthetic import (
    BUILTIN_PREDICTORS,
    builtin_predictor,
    generate_scene,
    separable_fixture,
)
from .vector import build_cover_map

MANIFEST = "fishnet.json"


def _fail(exc: BaseException, code: int):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CovermapError as exc:
            _fail(exc, exc.exit_code)
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
            _fail(exc, 3)
    return wrapper


def parse_extent(text: str) -> Window:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
        return Window(0, 0, w, h)
    except (ValueError, CovermapError):
        raise ConfigError(f"extent must look like WIDTHxHEIGHT, got {text!r}") from None


def make_predictor(spec: str, classes: int, workers: int = 1, timeout: float = 300.0, seed: int = 0):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        return builtin_predictor(name, classes=classes, seed=seed)
    if spec.startswith("cmd:"):
        from .protocol import SubprocessPredictor

        return SubprocessPredictor(shlex.split(spec[4:]), timeout=timeout, workers=workers)
    raise ConfigError(f"predictor must be builtin:<name> or cmd:<command>, got {spec!r}")


@click.group()
@click.version_option(__version__)
def main():
    """Stitch tiled segmentation heat maps and vectorize them into land-cover maps."""


def _config(path, **overrides) -> PipelineConfig:
    return load_config(path).with_overrides(**overrides)


@main.command()
@click.option("--extent", required=True, help="WIDTHxHEIGHT in pixels")
@click.option("--tile", type=int, default=2048, show_default=True)
@click.option("--overlap", type=int, default=512, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="print the fishnet as JSON")
@handle_errors
def fishnet(extent, tile, overlap, as_json):
    """Print the tile windows (index x0 y0 w h) covering EXTENT."""
    net = build_fishnet(parse_extent(extent), tile, overlap)
    if as_json:
        click.echo(json.dumps(net.to_dict()))
        return
    for i, w in enumerate(net.tiles):
        click.echo(f"{i} {w.x0} {w.y0} {w.w} {w.h}")


@main.command()
@click.argument("outdir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=int, default=1024, show_default=True)
@click.option("--classes", type=int, default=7, show_default=True)
@click.option("--preset", type=click.Choice(["default", "imbalanced"]), default="default")
@handle_errors
def scene(outdir, seed, size, classes, preset):
    """Write a synthetic scene: image.cmr, truth.cmr and heat.cmr."""
    s = generate_scene(seed, size, classes, preset)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    save_raster(s.image, out / "image.cmr")
    save_raster(s.truth, out / "truth.cmr")
    save_raster(s.heat, out / "heat.cmr")
    click.echo(json.dumps({"classes": s.class_names, "primitives": s.primitive_counts().tolist()}))


@main.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.argument("outdir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--tile", type=int)
@click.option("--overlap", type=int)
@click.option("--tta/--no-tta", default=None)
@click.option("--predictor", help="builtin:<oracle|edge_artifact|noisy> or cmd:<command line>")
@click.option("--workers", type=int)
@click.option("--seed", type=int, default=0, show_default=True, help="seed for builtin predictors")
@handle_errors
def predict(image, outdir, config_path, tile, overlap, tta, predictor, workers, seed):
    """Run the predictor over a fishnet of IMAGE and write per-tile heat maps."""
    cfg = _config(config_path, tile=tile, overlap=overlap, tta=tta, predictor=predictor, workers=workers)
    img = load_raster(image)
    if not isinstance(img, RasterF32):
        raise FormatError(f"{image} is not an f32 image")
    net = build_fishnet(img.extent, cfg.tile, cfg.overlap)
    pred = make_predictor(cfg.predictor, len(cfg.class_names), cfg.workers, cfg.predictor_timeout, seed)
    try:
        tiles = predict_tiled(img, net, pred, cfg.tta, cfg.workers)
    finally:
        if hasattr(pred, "close"):
            pred.close()
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (_, h) in enumerate(tiles):
        name = f"tile_{i:04d}.cmr"
        save_raster(h, out / name)
        names.append(name)
    manifest = net.to_dict()
    manifest["files"] = names
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    click.echo(f"wrote {len(tiles)} tiles to {out}")


def _read_tiles(tiledir):
    d = Path(tiledir)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {d / MANIFEST}: {exc}") from exc
    wins = [Window(*w) for w in manifest["tiles"]]
    tiles = [(w, load_raster(d / f, kind="heat")) for w, f in zip(wins, manifest["files"])]
    return manifest, tiles


@main.command()
@click.argument("tiledir", type=click.Path(exists=True, file_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["clip", "blend", "naive"]))
@click.option("--power", type=float)
@click.option("--workers", type=int)
@handle_errors
def stitch(tiledir, output, config_path, mode, power, workers):
    """Stitch the per-tile heat maps of TILEDIR into OUTPUT."""
    cfg = _config(config_path, window_power=power, workers=workers)
    manifest, tiles = _read_tiles(tiledir)
    extent = Window(*manifest["extent"])
    mode = mode or cfg.stitch_mode
    if mode == "clip":
        out = stitch_clip(tiles, extent, manifest["overlap"])
    elif mode == "naive":
        out = stitch_naive(tiles, extent)
    else:
        window = spline_window_1d(manifest["tile"], cfg.window_power)
        out = stitch_blend(tiles, extent, window, workers=cfg.workers)
    save_raster(out, output)
    click.echo(f"stitched {len(tiles)} tiles ({mode}) into {output}")


@main.command()
@click.argument("heatmap", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--low", type=int, help="low threshold for all classes (0-255)")
@click.option("--high", type=int, help="high threshold for all classes (0-255)")
@click.option("--min-area", type=float)
@click.option("--tolerance", type=float)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="per-class summary CSV")
@handle_errors
def vectorize(heatmap, output, config_path, low, high, min_area, tolerance, csv_path):
    """Vectorize HEATMAP into a GeoJSON land-cover map."""
    cfg = _config(config_path, min_area=min_area, simplify_tolerance=tolerance)
    if low is not None or high is not None:
        lo, hi = cfg.threshold_pairs()[0].low, cfg.threshold_pairs()[0].high
        cfg.thresholds = {"default": [lo if low is None else low, hi if high is None else high]}
        cfg.validate()
    h = load_raster(heatmap, kind="heat")
    names = cfg.class_names if len(cfg.class_names) == h.classes else [f"class_{i}" for i in range(h.classes)]
    pairs = cfg.threshold_pairs() if len(cfg.class_names) == h.classes else [cfg.threshold_pairs()[0]] * h.classes
    cmap = build_cover_map(h, pairs, cfg.min_area, cfg.simplify_tolerance, names, workers=cfg.workers)
    Path(output).write_text(cmap.to_geojson())
    if csv_path:
        Path(csv_path).write_text(cmap.summary_csv())
    click.echo(f"wrote {len(cmap.objects)} objects to {output}")


@main.command()
@click.argument("source", type=click.Path(exists=True))
@click.option("--size", type=int, default=512, show_default=True, help="sample size when SOURCE is one mask")
@click.option("--stride", type=int, help="sample stride when SOURCE is one mask (default: size)")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
@click.option("--names", help="comma-separated class names")
@handle_errors
def stats(source, size, stride, fmt, names):
    """Dataset statistics of a directory of *.mask.cmr files or of one mask raster."""
    src = Path(source)
    if src.is_dir():
        files = sorted(src.glob("*mask*.cmr"))
        if not files:
            raise FormatError(f"no *mask*.cmr files in {src}")
        masks = (load_raster(f, kind="label") for f in files)
    else:
        mask = load_raster(src, kind="label")
        masks = (s.mask for s in extract_samples(None, mask, size, stride))
    st = dataset_statistics(masks)
    if names:
        st.class_names = tuple(names.split(","))
    click.echo(st.to_json() if fmt == "json" else st.to_csv(), nl=fmt == "json")


@main.command()
@click.argument("preddir", type=click.Path(exists=True, file_okay=False))
@click.argument("truthdir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="write the CSV here instead of stdout")
@click.option("--names", help="comma-separated class names")
@handle_errors
def metrics(preddir, truthdir, out_path, names):
    """Micro-aggregated per-class IoU over matching mask files."""
    total = None
    files = sorted(Path(preddir).glob("*.cmr"))
    if not files:
        raise FormatError(f"no .cmr files in {preddir}")
    for f in files:
        tf = Path(truthdir) / f.name
        if not tf.exists():
            raise FormatError(f"no truth mask for {f.name}")
        res = iou_per_class(load_raster(f, kind="label"), load_raster(tf, kind="label"))
        total = res if total is None else total + res
    text = total.to_csv(names.split(",") if names else None)
    if out_path:
        Path(out_path).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--seeds", type=int, default=20, show_default=True)
@click.option("--eps", type=float, default=1e-3, show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True)
@handle_errors
def losscheck(seeds, eps, tol):
    """Finite-difference gradient checks for every loss."""
    worst_all = 0.0
    failed = []
    for loss in LOSS_IDS:
        errs = [gradient_check(loss, s, eps) for s in range(seeds)]
        worst = max(errs)
        worst_all = max(worst_all, worst)
        status = "ok" if worst < tol else "FAIL"
        if worst >= tol:
            failed.append(loss)
        click.echo(f"{loss:8s} max rel err {worst:.3e} over {seeds} seeds  {status}")
    if failed:
        raise CheckFailure(f"gradient check failed for {failed} (worst {worst_all:.3e})")


@main.command()
@click.option("--loss", type=click.Choice(LOSS_IDS), default="ce")
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--lr", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--imbalanced", is_flag=True, help="noisy fixture with a 2%% rare class")
@click.option("--rare-weight", type=float, default=10.0, show_default=True, help="WCE weight of the rare class")
@handle_errors
def toytrain(loss, steps, lr, seed, imbalanced, rare_weight):
    """Train the per-pixel linear classifier on a synthetic fixture."""
    feats, truth = separable_fixture(seed, imbalanced=imbalanced, spread=0.12 if imbalanced else 0.0)
    weights = None
    if loss == "wce":
        weights = np.ones(truth.classes)
        weights[-1] = rare_weight if imbalanced else 1.0
    res = toy_train(feats, truth, loss, steps, lr, seed, class_weight=weights)
    click.echo(json.dumps({
        "loss": loss,
        "steps": steps,
        "final_loss": res.loss_history[-1],
        "iou": [None if np.isnan(v) else round(float(v), 4) for v in res.iou],
        "recall": [None if np.isnan(v) else round(float(v), 4) for v in res.recall],
    }))


@main.command()
@click.option("--predictor", "name", type=click.Choice(BUILTIN_PREDICTORS), default="oracle")
@click.option("--classes", type=int, default=7, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def serve(name, classes, seed):
    """Answer CMP1 requests on stdin with a builtin predictor (child side)."""
    from .protocol import serve as serve_loop

    sys.exit(serve_loop(builtin_predictor(name, classes=classes, seed=seed)))


def run_demo(seed: int, size: int, tile: int, overlap: int, workers: int, tta: bool):
    """Full synthetic run; returns (cover maps, report dict, heat maps)."""
    sc = generate_scene(seed, size)
    net = build_fishnet(sc.image.extent, tile, overlap)
    naive_net = build_fishnet(sc.image.extent, tile, 0)
    window = spline_window_1d(tile, 2)
    report = {"seed": seed, "size": size, "tile": tile, "overlap": overlap, "tiles": len(net)}

    oracle = builtin_predictor("oracle", sc)
    clip_oracle = stitch_clip(predict_tiled(sc.image, net, oracle, tta, workers), net.extent, overlap)
    report["clip_equals_direct"] = bool(np.array_equal(clip_oracle.data, sc.heat.data))

    art = builtin_predictor("edge_artifact", sc, seed=seed)
    tiles = predict_tiled(sc.image, net, art, False, workers)
    clip = stitch_clip(tiles, net.extent, overlap)
    blend = stitch_blend(tiles, net.extent, window, workers=workers)
    naive = stitch_naive(predict_tiled(sc.image, naive_net, art, False, workers), naive_net.extent)
    seams = {
        "blend": seam_score(blend, net),
        "clip": seam_score(clip, net),
        "naive": seam_score(naive, naive_net),
    }
    report["seam_score"] = seams
    report["seams_ordered"] = seams["blend"] <= seams["clip"] <= seams["naive"]

    # the count check runs on the oracle map; the artifact map keeps some bias
    # along the outer scene border where no neighbouring tile can cancel it
    cmap = build_cover_map(clip_oracle, None, 1.0, 0.2, sc.class_names, geo=sc.image.geo, workers=workers)
    counts = np.bincount([o.class_id for o in cmap.objects], minlength=sc.classes)
    report["objects_per_class"] = counts.tolist()
    report["primitives_per_class"] = sc.primitive_counts().tolist()
    report["counts_match"] = bool(np.array_equal(counts, sc.primitive_counts()))
    blend_map = build_cover_map(blend, None, 1.0, 0.2, sc.class_names, geo=sc.image.geo, workers=workers)
    report["objects_blend"] = len(blend_map.objects)
    maps = {"cover": cmap, "cover_blend": blend_map}
    return maps, report, {"blend": blend, "clip": clip, "naive": naive}


@main.command()
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--size", type=int, default=2048, show_default=True)
@click.option("--tile", type=int, default=512, show_default=True)
@click.option("--overlap", type=int, default=256, show_default=True)
@click.option("--workers", type=int)
@click.option("--tta", is_flag=True, help="use dihedral TTA for the oracle run")
@click.option("--out", "outdir", type=click.Path(file_okay=False), default="demo_out", show_default=True)
@handle_errors
def demo(seed, size, tile, overlap, workers, tta, outdir):
    """Synthetic end-to-end run: scene, tiled prediction, both stitches, seams, vectors."""
    if workers is None:
        workers = load_config(None).workers
    t0 = time.perf_counter()
    cmaps, report, heats = run_demo(seed, size, tile, overlap, workers, tta)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, cmap in cmaps.items():
        (out / f"{name}.geojson").write_text(cmap.to_geojson())
    (out / "summary.csv").write_text(cmaps["cover"].summary_csv())
    for name, h in heats.items():
        save_raster(h, out / f"heat_{name}.cmr")
    report["seconds"] = round(time.perf_counter() - t0, 2)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    click.echo(json.dumps(report, indent=2))
    bad = [k for k in ("clip_equals_direct", "seams_ordered", "counts_match") if not report[k]]
    if bad:
        raise CheckFailure(f"demo checks failed: {bad}")


if __name__ == "__main__":
    main()
