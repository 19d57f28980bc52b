"""Command-line driver: ``ftdiff <subcommand> [--config run.yaml] [--set key=value ...]``.

Artifacts go under the run's output root (``output_root`` in the config,
else ``$FTDIFF_OUTPUT_ROOT``, else ``./runs``)::

    dataset.npz            gen-data
    ftm.npz, ftm_trace.json      train-ftm
    gpsd.npz, gpsd_trace.json    train-gpsd
    samples.npz            sample
    recon/*.npz, *.json    reconstruct
    report.json            evaluate
    plots/*.png, plots/manifest.json   plot
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .data_eval import load_dataset, make_synthetic_dataset, save_dataset, vrmse
from .errors import ContractError, NumericalError, TrainingError
from .ftm import load_ftm, save_ftm
from .gpsd import load_gpsd, save_gpsd, train_gpsd, unconditional_sample

log = logging.getLogger("ftdiff")


class CLIError(Exception):
    pass


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=float) + "\n")


def _check_digest(kind: str, found, cfg: RunConfig) -> None:
    if found and found != cfg.digest():
        log.warning("%s was written under config digest %s; current digest is %s",
                    kind, found, cfg.digest())


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CLIError(f"{what} not found at {path}; run the earlier stage first")
    return path


def _fresh(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CLIError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(cfg: RunConfig):
    header, spec, records, obs = load_dataset(_require(cfg.root() / "dataset.npz", "dataset"))
    _check_digest("dataset", header.get("digest"), cfg)
    return header, spec, records, obs


def _split(cfg: RunConfig, records, obs):
    n_train = len(records) - cfg.data.test_records
    return records[:n_train], obs[:n_train], records[n_train:]


def _load_models(cfg: RunConfig):
    ftm, fh = load_ftm(_require(cfg.root() / "ftm.npz", "FTM checkpoint"))
    _check_digest("FTM checkpoint", fh.get("digest"), cfg)
    gp, sched, gh = load_gpsd(_require(cfg.root() / "gpsd.npz", "GPSD checkpoint"))
    _check_digest("GPSD checkpoint", gh.get("digest"), cfg)
    return ftm, gp, sched


def cmd_gen_data(cfg: RunConfig, args) -> Path:
    path = _fresh(cfg.root() / "dataset.npz", args.force)
    n = args.records or cfg.data.records
    records = make_synthetic_dataset(cfg.spec, n)
    obs = pipeline.training_observations(records, cfg.data.train_rho, seed=cfg.seed)
    save_dataset(path, cfg.spec, records, obs, digest=cfg.digest())
    print(f"wrote {n} records to {path}")
    return path


def cmd_train_ftm(cfg: RunConfig, args) -> Path:
    _, _, records, obs = _load_data(cfg)
    if obs is None:
        raise CLIError("dataset has no training observations")
    train_records, train_obs, _ = _split(cfg, records, obs)
    path = _fresh(cfg.root() / "ftm.npz", args.force)
    t0 = time.perf_counter()
    trained = pipeline.fit_and_encode(
        train_obs, cfg.ftm, min(cfg.data.fit_records, len(train_obs)), seed=cfg.seed,
        callback=lambda r, loss: log.info("ftm round %d loss %.4e", r, loss))
    save_ftm(path, trained, digest=cfg.digest())
    _write_json(cfg.root() / "ftm_trace.json", {
        "digest": cfg.digest(), "loss_trace": trained.loss_trace,
        "val_trace": trained.val_trace, "seconds": time.perf_counter() - t0})
    print(f"FTM final loss {trained.final_loss:.4e}; checkpoint {path}")
    return path


def cmd_train_gpsd(cfg: RunConfig, args) -> Path:
    ftm, fh = load_ftm(_require(cfg.root() / "ftm.npz", "FTM checkpoint"))
    _check_digest("FTM checkpoint", fh.get("digest"), cfg)
    if not ftm.core_batches:
        raise CLIError("FTM checkpoint carries no core sequences")
    path = _fresh(cfg.root() / "gpsd.npz", args.force)
    t0 = time.perf_counter()
    trained = train_gpsd(pipeline.standardized_sequences(ftm), cfg.gpsd,
                         callback=lambda s, l, h: log.info("gpsd step %d loss %.4f held-out %.4f",
                                                           s, l, h))
    save_gpsd(path, trained, cfg.schedule, digest=cfg.digest())
    _write_json(cfg.root() / "gpsd_trace.json", {
        "digest": cfg.digest(), "train_trace": trained.train_trace,
        "heldout_trace": trained.heldout_trace, "seconds": time.perf_counter() - t0})
    last = trained.heldout_trace[-1][1] if trained.heldout_trace else float("nan")
    print(f"GPSD held-out loss {last:.4f}; checkpoint {path}")
    return path


def _eval_axes(record, scale: int):
    if scale == 1:
        return record.axes
    return [np.linspace(0.0, 1.0, scale * (len(a) - 1) + 1) for a in record.axes]


def cmd_sample(cfg: RunConfig, args) -> Path:
    _, spec, records, _ = _load_data(cfg)
    ftm, gp, sched = _load_models(cfg)
    path = _fresh(cfg.root() / "samples.npz", args.force)
    frames = args.frames or spec.M
    times = np.linspace(0.0, 1.0, frames)
    axes = _eval_axes(records[0], args.grid_scale or cfg.eval.grid_scale)
    fields, cores = [], []
    for k in range(args.num):
        seq = unconditional_sample(gp.denoiser, sched, times, gamma=gp.config.gamma,
                                   seed=cfg.seed + k, ranks=ftm.latents.ranks,
                                   noise=gp.config.noise)
        cores.append(seq.cores)
        fields.append(pipeline.decode_sequence(seq, ftm.latents, ftm.normalizer, axes))
    header = {"digest": cfg.digest(), "times": times.tolist(), "num": args.num}
    np.savez(path, header=np.array(json.dumps(header)), fields=np.stack(fields).astype("<f8"),
             cores=np.stack(cores).astype("<f8"))
    print(f"wrote {args.num} unconditional samples to {path}")
    return path


def reconstruct_one(cfg: RunConfig, record, rec_id: int, seed: int, mode: str, ftm, gp, sched,
                    scale: int = 1):
    ev = cfg.eval
    obs = pipeline.evaluation_observations(record, rec_id, seed, cfg.mask, ev.noise_kind,
                                           ev.noise_level, run_seed=cfg.seed)
    gcfg = pipeline.guidance_for(cfg.guidance, mode, obs, ftm.normalizer, gp.config.gamma,
                                 ev.noise_known)
    rec = pipeline.reconstruct_record(record, obs, ftm.latents, ftm.normalizer, gp.denoiser,
                                      sched, gcfg, seed=seed)
    if scale != 1:
        axes = _eval_axes(record, scale)
        field = pipeline.decode_sequence(rec.cores, ftm.latents, ftm.normalizer, axes)
        truth = record.render(axes)
        rec = pipeline.Reconstruction(rec.cores, field, vrmse(field, truth),
                                      pipeline.per_frame_vrmse(field, truth), rec.runtime)
    else:
        axes, truth = record.axes, record.dense
    return obs, rec, axes, truth


def cmd_reconstruct(cfg: RunConfig, args) -> Path:
    _, _, records, obs_all = _load_data(cfg)
    _, _, test = _split(cfg, records, obs_all or [None] * len(records))
    if not 0 <= args.record < len(test):
        raise CLIError(f"record id {args.record} outside the {len(test)} test records")
    ftm, gp, sched = _load_models(cfg)
    scale = args.grid_scale or cfg.eval.grid_scale
    record = test[args.record]
    obs, rec, axes, truth = reconstruct_one(cfg, record, args.record, args.seed, args.mode,
                                            ftm, gp, sched, scale)
    stem = f"rec{args.record}_{args.mode}_s{args.seed}"
    path = _fresh(cfg.root() / "recon" / f"{stem}.npz", args.force)
    rows = [np.column_stack([np.full(v.size, t), c, v])
            for t, c, v in zip(obs.times, obs.coords, obs.values) if v.size]
    report = {"digest": cfg.digest(), "record": args.record, "mode": args.mode,
              "seed": args.seed, "vrmse": rec.vrmse, "per_frame": rec.per_frame.tolist(),
              "observed_frames": (obs.counts > 0).tolist(), "runtime": rec.runtime,
              "grid": [len(a) for a in axes]}
    np.savez(path, header=np.array(json.dumps(report)), field=rec.field.astype("<f8"),
             truth=truth.astype("<f8"), cores=rec.cores.cores.astype("<f8"),
             times=record.times.astype("<f8"),
             obs=np.concatenate(rows).astype("<f8") if rows else np.zeros((0, 2 + len(axes))),
             **{f"axis/{k}": np.asarray(a, dtype="<f8") for k, a in enumerate(axes)})
    _write_json(path.with_suffix(".json"), report)
    print(f"{args.mode} VRMSE {rec.vrmse:.4f} -> {path}")
    return path


def cmd_evaluate(cfg: RunConfig, args) -> Path:
    _, _, records, obs_all = _load_data(cfg)
    _, _, test = _split(cfg, records, obs_all or [None] * len(records))
    ftm, gp, sched = _load_models(cfg)
    path = _fresh(cfg.root() / "report.json", args.force)
    n_rec = min(args.max_records or len(test), len(test))
    seeds = args.seeds or cfg.eval.seeds
    reports = {}
    for mode in cfg.eval.modes:
        recons = []
        for s in range(seeds):
            rec_id = s % n_rec
            _, rec, _, _ = reconstruct_one(cfg, test[rec_id], rec_id, s, mode, ftm, gp, sched,
                                           cfg.eval.grid_scale)
            recons.append(rec)
        reports[mode] = pipeline.summarize(recons, cfg.digest()).to_dict()
    doc = {"digest": cfg.digest(), "mask": {"rho": cfg.mask.rho, "setting": cfg.mask.setting},
           "noise": {"kind": cfg.eval.noise_kind, "level": cfg.eval.noise_level},
           "reports": reports}
    _write_json(path, doc)
    for mode, r in reports.items():
        print(f"{mode:>6}: VRMSE {r['vrmse_mean']:.4f} +/- {r['vrmse_std']:.4f} "
              f"({len(r['per_seed'])} runs, {r['runtime']:.1f}s)")
    return path


def _load_recon(path: Path):
    if not path.exists():
        raise CLIError(f"reconstruction file {path} not found")
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        data = {k: z[k] for k in z.files if k != "header"}
    return header, data


def cmd_plot(cfg: RunConfig, args) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    loaded = [(Path(p), *_load_recon(Path(p))) for p in args.files]
    grids = {tuple(h["grid"]) for _, h, _ in loaded}
    if len(grids) != 1:
        raise CLIError(f"reconstructions use different grids: {sorted(grids)}")
    _, h0, d0 = loaded[0]
    truth = d0["truth"]
    M = truth.shape[0]
    frames = np.unique(np.linspace(0, M - 1, min(args.frames, M)).round().astype(int))
    rows = [("truth", truth)] + [(h["mode"], d["field"]) for _, h, d in loaded]
    vmin, vmax = float(truth.min()), float(truth.max())
    fig, axes = plt.subplots(len(rows) + 1, len(frames), squeeze=False,
                             figsize=(1.8 * len(frames), 1.8 * (len(rows) + 1)))
    obs = d0["obs"]
    times = d0["times"]
    for j, m in enumerate(frames):
        for i, (label, field) in enumerate(rows):
            ax = axes[i if i == 0 else i + 1, j]
            ax.imshow(field[m].T, origin="lower", vmin=vmin, vmax=vmax, cmap="viridis",
                      extent=(0, 1, 0, 1))
            if j == 0:
                ax.set_ylabel(label)
        ax = axes[1, j]
        sel = np.abs(obs[:, 0] - times[m]) < 1e-9
        ax.scatter(obs[sel, 1], obs[sel, 2], c=obs[sel, -1], s=4, vmin=vmin, vmax=vmax,
                   cmap="viridis")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_aspect("equal")
        if j == 0:
            ax.set_ylabel("observed")
        axes[0, j].set_title(f"frame {m}")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out_dir = cfg.root() / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"strip_rec{h0['record']}_s{h0['seed']}.png"
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    manifest = out_dir / "manifest.json"
    entries = json.loads(manifest.read_text())["images"] if manifest.exists() else []
    entries = [e for e in entries if e["image"] != out.name]
    entries.append({"image": out.name, "inputs": [str(p) for p, _, _ in loaded],
                    "frames": frames.tolist()})
    _write_json(manifest, {"digest": cfg.digest(), "images": entries})
    print(f"wrote {out}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML or JSON run document")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a leaf config key, e.g. ftm.rounds=10")
        sp.add_argument("--out", help="output root (overrides config and environment)")
        sp.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic corpus").add_argument(
        "--records", type=int, help="number of records (default from config)")
    add("train-ftm", cmd_train_ftm, "fit latent functions and encode the training cores")
    add("train-gpsd", cmd_train_gpsd, "train the sequence denoiser on standardized cores")
    sp = add("sample", cmd_sample, "unconditional core sequences decoded to fields")
    sp.add_argument("--num", type=int, default=4)
    sp.add_argument("--frames", type=int, help="number of target frames (default: dataset M)")
    sp.add_argument("--grid-scale", type=int)
    sp = add("reconstruct", cmd_reconstruct, "reconstruct one test record from sparse observations")
    sp.add_argument("--record", type=int, default=0, help="test record id")
    sp.add_argument("--mode", choices=["none", "dps", "mpdps"], default="mpdps")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--grid-scale", type=int)
    sp = add("evaluate", cmd_evaluate, "VRMSE report over test records, seeds and modes")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--max-records", type=int)
    sp = add("plot", cmd_plot, "frame strips from reconstruction files")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--frames", type=int, default=6)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out:
            cfg.output_root = args.out
        args.func(cfg, args)
    except (CLIError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
