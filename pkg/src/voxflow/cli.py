"""Command-line pipeline: phantom-gen -> train-spatial -> encode -> train-temporal -> forecast -> evaluate.

Every subcommand writes ``run.json`` into its output directory with the
resolved arguments, the derived stage seed and a sha256 of each artifact it
produced. Per-epoch timing logs (``metrics.csv``) are listed but not hashed.

Seeds: a stage's seed is ``SeedSequence([root_seed, STAGE_KEYS[stage]])``
reduced to one 32-bit word, so stages draw independent streams from one
root seed.

Exit codes: 0 ok, 1 contract error or divergence, 2 I/O or format error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from .errors import ContractError, FormatError, TrainingDiverged, VerificationFailed, VoxflowError
from .flow import FlowConfig, config_dict, load_flow, save_flow
from .forecast import forecast_n
from .ingest import DatasetManifest, Volume, ingest_dir, load_manifest, read_volume, write_volume
from .phantom import PhantomSpec, gen_dataset
from .quantify import (T_AIR, T_SKULL, T_VENTRICLE, VolumeCurve, brain_mask, mae_by_year,
                       normalized_volume_curve, overlay_slice, partial_volume_ventricle, segment_ventricles,
                       write_curve_csv, write_mae_csv, write_pgm)
from .spatial import TrainSchedule, dequantize, load_schedule, to_uint8, train_spatial, write_metrics
from .temporal import (FINAL_ACTIVATIONS, NormalizationParams, TemporalConfig, TemporalModel,
                       identity_mse, layer_count, level_mse, load_temporal, normalize_latent, save_temporal,
                       train_temporal)

log = logging.getLogger("voxflow")

STAGE_KEYS = {"phantom-gen": 1, "train-spatial": 2, "train-temporal": 3, "verify": 4}

DESK_SCHEDULE = TrainSchedule(((1, 5, 1e-3), (2, 5, 1e-3), (8, 10, 1e-3)))

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


def stage_seed(root, stage):
    return int(np.random.SeedSequence([int(root), STAGE_KEYS[stage]]).generate_state(1)[0])


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run(out, args, artifacts, seed=None, extra=None, unhashed=()):
    """Record config, seed and artifact checksums in ``out/run.json``."""
    out = Path(out)
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "voxflow": __version__,
        "subcommand": args.command,
        "config": cfg,
        "seed": seed,
        "precision": np.dtype(dc.default_dtype()).name,
        "artifacts": {str(Path(a).relative_to(out)): sha256(a) for a in sorted(map(str, artifacts))},
        "unhashed": sorted(str(Path(a).relative_to(out)) for a in unhashed),
    }
    if extra:
        doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _mkdir(p):
    p = Path(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def midbin(v):
    """Deterministic 8-bit dequantization (noise fixed at the bin centre)."""
    v = np.asarray(v)
    return dequantize(v, 8, u=np.full(v.shape, 0.5))


def _series(man: DatasetManifest, split):
    if split == "all":
        out = {}
        for s in sorted(man.splits):
            out.update(man.subjects(s))
        return out
    if split not in man.splits:
        raise ContractError(f"manifest has no [{split}] split (found {sorted(man.splits)})")
    return man.subjects(split)


# ------------------------------------------------------------------ commands


def cmd_phantom_gen(args):
    out = _mkdir(args.out)
    seed = stage_seed(args.seed, "phantom-gen")
    overrides = dict(texture_sigma=args.texture_sigma, supersample=args.supersample,
                     accel_onset=args.accel_onset, accel_growth=args.accel_growth,
                     scan_noise=args.scan_noise)
    if args.growth is not None:
        overrides["growth"] = args.growth
    spec = PhantomSpec.for_resolution(args.res, **overrides)
    man = gen_dataset(spec, args.subjects, args.years, seed, out, n_test=args.test)
    files = [man.path(rel) for split in man.splits.values() for ser in split.values() for _, rel in ser]
    files += [out / "manifest.txt", out / "truth.csv"]
    write_run(out, args, files, seed, {"phantom": {k: v for k, v in vars(spec).items()}})
    log.info("wrote %d volumes to %s", len(files) - 2, out)


def cmd_ingest(args):
    out = _mkdir(args.dst)
    rels = ingest_dir(args.src, out, args.size, args.downsample)
    files = [out / r for r in rels]
    if (out / "manifest.txt").exists():
        files.append(out / "manifest.txt")
    write_run(out, args, files)
    log.info("preprocessed %d volumes", len(rels))


def _load_u8(man, series, staggered=False):
    """All volumes, or with ``staggered`` one per subject: subject i gives scan i mod its count."""
    vols = []
    for i, sid in enumerate(sorted(series)):
        picked = [series[sid][i % len(series[sid])]] if staggered else series[sid]
        for _, rel in picked:
            v = read_volume(man.path(rel)).data
            if v.dtype != np.uint8:
                raise ContractError(f"{rel}: expected uint8 volumes, got {v.dtype} (run ingest first)")
            vols.append(v)
    return vols


def cmd_train_spatial(args):
    out = _mkdir(args.out)
    man = load_manifest(args.data)
    man.validate()
    vols = _load_u8(man, _series(man, args.split), staggered=args.one_per_subject)
    if not vols:
        raise ContractError("no training volumes")
    res = vols[0].shape[0]
    cfg = FlowConfig(levels=args.levels, depth=args.depth, width=args.width, resolution=res,
                     channels=vols[0].shape[-1])
    schedule = load_schedule(args.schedule) if args.schedule else DESK_SCHEDULE
    seed = stage_seed(args.seed, "train-spatial")

    def report(row):
        log.info("epoch %d (%d-bit) nll %.2f bpd %.4f lr %.2e", row["epoch"], row["stage_bits"],
                 row["nll"], row["bpd"], row["lr"])

    try:
        result = train_spatial(vols, cfg, schedule, seed=seed, on_epoch=report, snapshots=set(args.snapshot))
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_flow(exc.last_good, out / "flow.last_good.vfck")
        raise
    save_flow(result.model, out / "flow.vfck")
    snaps = []
    for epoch, m in sorted(result.snapshots.items()):
        snaps.append(out / f"flow.epoch{epoch:03d}.vfck")
        save_flow(m, snaps[-1])
    write_metrics(out / "metrics.csv", result.metrics)
    (out / "schedule.txt").write_text(schedule.dumps())
    write_run(out, args, [out / "flow.vfck", out / "schedule.txt", *snaps], seed,
              {"flow": config_dict(cfg), "steps": result.steps,
               "warmup_epochs": schedule.resolved_warmup(),
               "final_bpd": result.metrics[-1]["bpd"] if result.metrics else None},
              unhashed=[out / "metrics.csv"])


def cmd_encode(args):
    out = _mkdir(args.out)
    man = load_manifest(args.data)
    flow = load_flow(args.flow)
    lines = ["# voxflow latents v1", f"# levels {flow.config.levels}"]
    files = []
    splits = sorted(man.splits) if args.split == "all" else [args.split]
    for split in splits:
        lines.append(f"[{split}]")
        for sid, series in sorted(_series(man, split).items()):
            for age, rel in series:
                zs, logdet = flow.encode(midbin(read_volume(man.path(rel)).data))
                # one .npy per level: np.savez stamps zip entries with the wall clock
                stem = f"{sid}_y{int(age):02d}"
                for l, z in enumerate(zs, start=1):
                    np.save(out / f"{stem}_z{l}.npy", z)
                    files.append(out / f"{stem}_z{l}.npy")
                lines.append(f"{sid} {int(age)} {stem}")
    (out / "latents.txt").write_text("\n".join(lines) + "\n")
    files.append(out / "latents.txt")
    write_run(out, args, files, extra={"levels": flow.config.levels})
    log.info("encoded %d volumes", (len(files) - 1) // flow.config.levels)


def load_latents(path):
    """Parse a latents directory -> {split: {subject: [(age, [z_1..z_L]), ...]}}."""
    path = Path(path)
    man = path / "latents.txt" if path.is_dir() else path
    out, split, levels = {}, None, None
    for lineno, line in enumerate(man.read_text().splitlines(), start=1):
        line = line.strip()
        if line.startswith("# levels"):
            levels = int(line.split()[-1])
            continue
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            split = line.strip("[]")
            out.setdefault(split, {})
            continue
        parts = line.split()
        if split is None or len(parts) != 3:
            raise FormatError(f"{man}:{lineno}: expected 'subject age stem'")
        if levels is None:
            raise FormatError(f"{man}: missing '# levels N' header")
        zs = [np.load(man.parent / f"{parts[2]}_z{l}.npy") for l in range(1, levels + 1)]
        out[split].setdefault(parts[0], []).append((int(parts[1]), zs))
    return out


def consecutive_pairs(subjects, norm):
    """(z_t, z_{t+1}) normalized pyramids for every subject and consecutive age pair."""
    pairs = []
    for sid in sorted(subjects):
        series = sorted(subjects[sid], key=lambda r: r[0])
        normed = [normalize_latent(zs, norm) for _, zs in series]
        pairs += list(zip(normed, normed[1:]))
    return pairs


def pyramid_ratio(model, pairs):
    """Held-out model MSE over identity MSE, pooled over every latent element."""
    num = den = 0.0
    for l in range(model.config.levels):
        size = pairs[0][0][l].size
        num += level_mse(model, pairs, l) * size
        den += identity_mse(pairs, l) * size
    return num / den if den else float("nan")


def cmd_train_temporal(args):
    out = _mkdir(args.out)
    lat = load_latents(args.latents)
    if "train" not in lat:
        raise ContractError("latents have no [train] split")
    if args.norm == "fit":
        norm = NormalizationParams.fit([zs for ser in lat["train"].values() for _, zs in ser],
                                       coverage=args.coverage)
    else:
        norm = NormalizationParams(args.norm_a, args.norm_b)
    pairs = consecutive_pairs(lat["train"], norm)
    if not pairs:
        raise ContractError("no consecutive-age pairs in the train split")
    levels = len(pairs[0][0])
    widths = tuple(z.shape[-1] for z in pairs[0][0])
    cfg = TemporalConfig(widths, tuple(layer_count(l) for l in range(1, levels + 1)),
                         args.final_activation)
    seed = stage_seed(args.seed, "train-temporal")
    init_seed, train_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    model = TemporalModel(cfg, init=args.init, seed=init_seed)
    losses = train_temporal(pairs, model, seed=train_seed, lr=args.lr, epochs=args.epochs,
                            on_epoch=lambda l, e, v: log.info("level %d epoch %d loss %.4e", l, e, v))
    save_temporal(model, out / "temporal.vftp", norm)
    with open(out / "losses.csv", "w") as f:
        f.write("level,epoch,loss\n")
        for l, curve in enumerate(losses, start=1):
            for e, v in enumerate(curve, start=1):
                f.write(f"{l},{e},{v:.10e}\n")
    all_train = [zs for ser in lat["train"].values() for _, zs in ser]
    extra = {"normalization": {"a": norm.a, "b": norm.b,
                               "saturated_fraction": norm.saturated_fraction(all_train)},
             "pairs": len(pairs), "train_ratio": pyramid_ratio(model, pairs)}
    if "test" in lat:
        held = consecutive_pairs(lat["test"], norm)
        if held:
            extra["heldout_pairs"] = len(held)
            extra["heldout_ratio"] = pyramid_ratio(model, held)
            log.info("held-out MSE / identity MSE = %.4f", extra["heldout_ratio"])
    write_run(out, args, [out / "temporal.vftp", out / "losses.csv"], seed, extra)


def _load_models(args):
    flow = load_flow(args.flow)
    temporal, norm = load_temporal(args.temporal)
    return flow, temporal, norm


def cmd_forecast(args):
    out = _mkdir(args.out)
    flow, temporal, norm = _load_models(args)
    src = read_volume(args.input)
    x = midbin(src.data) if src.data.dtype == np.uint8 else np.asarray(src.data, dtype=dc.default_dtype())
    res = forecast_n(x, args.steps, flow, temporal, norm,
                     provenance={"flow": sha256(args.flow), "temporal": sha256(args.temporal)})
    lines = ["# step file telescoped_gap"]
    files = []
    for s in res.steps:
        name = f"step_{s.index:02d}.vvol"
        write_volume(out / name, Volume(to_uint8(s.volume), src.spacing))
        files.append(out / name)
        lines.append(f"{s.index} {name} {s.telescoped_gap:.6e}")
    (out / "forecast.txt").write_text("\n".join(lines) + "\n")
    files.append(out / "forecast.txt")
    write_run(out, args, files, extra={"provenance": res.provenance,
                                       "max_telescoped_gap": max(res.gaps)})


def _thresholds(args):
    return dict(t_air=args.t_air, t_skull=args.t_skull), args.t_ventricle


def measure_series(volumes, args):
    """Ventricle voxel counts per year plus the year-0 brain mask."""
    bkw, tv = _thresholds(args)
    brain = brain_mask(volumes[0], **bkw)
    counts = {}
    masks = {}
    for year, v in volumes.items():
        m = segment_ventricles(v, brain, tv, policy=args.policy)
        counts[year] = m.voxels
        masks[year] = m
    return brain, counts, masks


def cmd_quantify(args):
    out = _mkdir(args.out)
    man = load_manifest(args.data)
    curve = VolumeCurve()
    files = []
    for sid, series in sorted(_series(man, args.split).items()):
        vols = {int(age): read_volume(man.path(rel)).data for age, rel in series}
        if 0 not in vols:
            raise ContractError(f"{sid}: no year-0 scan to normalize by")
        brain, counts, masks = measure_series(vols, args)
        curve.extend(normalized_volume_curve(sid, counts, brain.voxels))
        if args.pgm:
            for year, m in masks.items():
                p = out / f"{sid}_y{year:02d}.pgm"
                write_pgm(p, overlay_slice(vols[year], m))
                files.append(p)
    write_curve_csv(out / "curves.csv", curve)
    files.append(out / "curves.csv")
    write_run(out, args, files)


def cmd_evaluate(args):
    out = _mkdir(args.out)
    man = load_manifest(args.data)
    flow, temporal, norm = _load_models(args)
    pred, gt, frozen = VolumeCurve(), VolumeCurve(), VolumeCurve()
    gaps = []
    grew = grew_soft = 0
    subjects = _series(man, args.split)
    for sid, series in sorted(subjects.items()):
        vols = {int(age): read_volume(man.path(rel)).data for age, rel in series}
        if 0 not in vols:
            raise ContractError(f"{sid}: no year-0 scan to forecast from")
        years = [y for y in sorted(vols) if y <= args.steps]
        brain, gt_counts, _ = measure_series({y: vols[y] for y in years}, args)
        res = forecast_n(midbin(vols[0]), max(years), flow, temporal, norm)
        gaps.append(max(res.gaps))
        tv = _thresholds(args)[1]
        p_counts = {y: segment_ventricles(to_uint8(res.volumes[y]), brain, tv, policy=args.policy).voxels
                    for y in years}
        if len(years) > 1:
            grew += p_counts[years[1]] > gt_counts[0]
            # sub-voxel growth is invisible to a threshold count on coarse grids
            grew_soft += (partial_volume_ventricle(to_uint8(res.volumes[years[1]]), brain)
                          > partial_volume_ventricle(vols[0], brain))
        pred.extend(normalized_volume_curve(sid, p_counts, brain.voxels))
        gt.extend(normalized_volume_curve(sid, gt_counts, brain.voxels))
        frozen.extend(normalized_volume_curve(sid, {y: gt_counts[0] for y in years}, brain.voxels))
    mae = mae_by_year(pred, gt)
    base = mae_by_year(frozen, gt)
    write_curve_csv(out / "curves_pred.csv", pred)
    write_curve_csv(out / "curves_gt.csv", gt)
    write_mae_csv(out / "mae.csv", mae, {"frozen_mae_percent": [m for _, m, _ in base]})
    files = [out / "curves_pred.csv", out / "curves_gt.csv", out / "mae.csv"]
    write_run(out, args, files, extra={
        "mae": {str(y): m for y, m, _ in mae}, "frozen_mae": {str(y): m for y, m, _ in base},
        "max_telescoped_gap": max(gaps) if gaps else 0.0,
        "grew_after_one_step": int(grew), "grew_soft_after_one_step": int(grew_soft),
        "subjects": len(subjects)})
    for (y, m, n), (_, b, _) in zip(mae, base):
        log.info("year %d: forecast MAE %.4f%%, frozen MAE %.4f%% (n=%d)", y, m, b, n)


def cmd_verify(args):
    from .verify import run_suite

    out = _mkdir(args.out) if args.out else None
    trained = load_flow(args.flow) if args.flow else None
    results = run_suite(resolution=args.res, levels=args.levels, depth=args.depth, width=args.width,
                        n_volumes=args.volumes, seed=stage_seed(args.seed, "verify"), trained=trained)
    for r in results:
        print(r.line())
    if out is not None:
        (out / "verify.txt").write_text("\n".join(r.line() for r in results) + "\n")
        write_run(out, args, [], extra={"checks": {r.name: r.passed for r in results}},
                  unhashed=[out / "verify.txt"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"{len(failed)} check(s) failed: {', '.join(failed)}")


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="voxflow", description=__doc__.splitlines()[0])
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--version", action="version", version=f"voxflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def seg_flags(sp):
        sp.add_argument("--t-ventricle", type=float, default=T_VENTRICLE)
        sp.add_argument("--t-air", type=float, default=T_AIR)
        sp.add_argument("--t-skull", type=float, default=T_SKULL)
        sp.add_argument("--policy", choices=("min-fraction", "largest"), default="min-fraction")

    sp = add("phantom-gen", cmd_phantom_gen, "write a synthetic longitudinal phantom dataset")
    sp.add_argument("--subjects", type=int, required=True)
    sp.add_argument("--years", type=int, required=True)
    sp.add_argument("--res", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--test", type=int, default=0, help="last N subjects form the test split")
    sp.add_argument("--texture-sigma", type=float, default=6.0)
    sp.add_argument("--supersample", type=int, default=1,
                    help="sub-samples per axis for partial-volume rendering (1 = centre inclusion)")
    sp.add_argument("--growth", type=float, default=None, help="per-year semi-axis growth factor")
    sp.add_argument("--accel-onset", type=int, default=None)
    sp.add_argument("--accel-growth", type=float, default=1.0)
    sp.add_argument("--scan-noise", type=float, default=0.0)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("ingest", cmd_ingest, "window, crop and downsample a directory of VVOL volumes")
    sp.add_argument("--src", type=Path, required=True)
    sp.add_argument("--dst", type=Path, required=True)
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--downsample", type=int, default=1)

    sp = add("train-spatial", cmd_train_spatial, "train the flow with the bit-depth curriculum")
    sp.add_argument("--data", type=Path, required=True, help="dataset manifest")
    sp.add_argument("--split", default="train")
    sp.add_argument("--schedule", type=Path, default=None, help="'bits epochs lr' lines (default: desk schedule)")
    sp.add_argument("--one-per-subject", action="store_true",
                    help="train on one scan per subject, ages staggered across subjects")
    sp.add_argument("--snapshot", type=int, action="append", default=[], metavar="EPOCH",
                    help="also save the model after this epoch (repeatable)")
    sp.add_argument("--levels", type=int, default=2)
    sp.add_argument("--depth", type=int, default=2)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("encode", cmd_encode, "encode dataset volumes to latent pyramids")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--flow", type=Path, required=True)
    sp.add_argument("--split", default="all")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("train-temporal", cmd_train_temporal, "train the per-level latent predictor")
    sp.add_argument("--latents", type=Path, required=True)
    sp.add_argument("--lr", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--final-activation", choices=FINAL_ACTIVATIONS, default="relu")
    sp.add_argument("--init", choices=("random", "zero"), default="random")
    sp.add_argument("--norm", choices=("fixed", "fit"), default="fixed")
    sp.add_argument("--norm-a", type=float, default=24.0)
    sp.add_argument("--norm-b", type=float, default=48.0)
    sp.add_argument("--coverage", type=float, default=0.999, help="quantile of |z| used by --norm fit")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("forecast", cmd_forecast, "forecast N aging steps from one volume")
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--flow", type=Path, required=True)
    sp.add_argument("--temporal", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("quantify", cmd_quantify, "segment ventricles and write normalized volume curves")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="all")
    sp.add_argument("--pgm", action="store_true", help="also write central-slice overlays")
    seg_flags(sp)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("evaluate", cmd_evaluate, "forecast from year 0 and compare ventricle curves (MAE by year)")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--steps", type=int, default=3)
    sp.add_argument("--flow", type=Path, required=True)
    sp.add_argument("--temporal", type=Path, required=True)
    seg_flags(sp)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("verify", cmd_verify, "run invertibility, log-det and gradient checks")
    sp.add_argument("--res", type=int, default=8)
    sp.add_argument("--levels", type=int, default=2)
    sp.add_argument("--depth", type=int, default=2)
    sp.add_argument("--width", type=int, default=8)
    sp.add_argument("--volumes", type=int, default=100)
    sp.add_argument("--flow", type=Path, default=None, help="also check a trained checkpoint")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, default=None)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("VOXFLOW_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    dc.set_precision(args.precision)
    try:
        args.func(args)
    except VerificationFailed as exc:
        log.error("%s", exc)
        return EXIT_VERIFY
    except (FormatError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ContractError, TrainingDiverged, VoxflowError) as exc:
        log.error("%s", exc)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
