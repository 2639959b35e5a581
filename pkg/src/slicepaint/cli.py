"""Command-line surface: synthesize data, train, inpaint, evaluate.

Commands
    synth   write phantom cases (gt/mask/baseline volumes plus a manifest)
    train   fit the denoiser on every nonzero-mask slice of a dataset
    sample  inpaint one case with a trained checkpoint
    eval    masked metrics as CSV + table, with summary figures

Configuration precedence is built-in defaults < JSON config file < flags;
every run logs its fully resolved configuration as one JSON line.  All
randomness derives from the run seed; sampling splits one stream per slice
as (seed + slice index).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffusion, figures, metrics, trainer, volumes
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, linear_schedule
from .tensor import ConfigError
from .unet import UNetConfig, build

DEFAULT_SMOOTH_SIGMA = 1.075


@dataclass
class RunConfig:
    """Flat, JSON-serializable settings shared by train/sample runs."""

    image_size: int = 32
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    res_blocks_per_level: int = 1
    attention_resolutions: tuple[int, ...] = (16,)
    heads: int = 1
    time_embed_dim: int = 128
    T: int = DEFAULT_T
    beta_start: float | None = None  # None: canonical endpoints rescaled by 1000/T
    beta_end: float | None = None
    batch_size: int = 8
    lr: float = 1e-4
    ema_rate: float = 0.9999
    steps: int = 3000
    checkpoint_interval: int = 500
    seed: int = 0

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            res_blocks_per_level=self.res_blocks_per_level,
            attention_resolutions=tuple(self.attention_resolutions),
            heads=self.heads,
            time_embed_dim=self.time_embed_dim,
        )

    def noise_schedule(self):
        start = self.beta_start
        end = self.beta_end
        if start is None:
            start = min(DEFAULT_BETA_START * DEFAULT_T / self.T, 0.999)
        if end is None:
            end = min(DEFAULT_BETA_END * DEFAULT_T / self.T, 0.999)
        return linear_schedule(self.T, start, end)

    def trainer_config(self) -> trainer.TrainerConfig:
        return trainer.TrainerConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            ema_rate=self.ema_rate,
            steps=self.steps,
            checkpoint_interval=self.checkpoint_interval,
            seed=self.seed,
        )


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Merge defaults, config file, and CLI overrides; reject unknown keys."""
    known = {f.name for f in fields(RunConfig)}
    merged: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
        unknown = set(file_cfg) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**merged)
    return cfg


def _log_config(command: str, payload: dict) -> None:
    print(f"config={json.dumps({'command': command, **payload}, sort_keys=True)}")


# --------------------------------------------------------------------------
# Case directory layout


def case_paths(case_dir: str) -> dict[str, str]:
    return {
        "gt": os.path.join(case_dir, "gt.vvol"),
        "mask": os.path.join(case_dir, "mask.vvol"),
        "baseline": os.path.join(case_dir, "baseline.vvol"),
    }


def load_case(case_dir: str, need_gt: bool) -> volumes.MaskedCase:
    """Load a case directory; the ground truth file is read only on request."""
    paths = case_paths(case_dir)
    mask = volumes.binarize_mask(volumes.read_volume(paths["mask"]))
    baseline = volumes.read_volume(paths["baseline"])
    gt = None
    if need_gt:
        gt = volumes.read_volume(paths["gt"])
    return volumes.MaskedCase(ground_truth=gt, mask=mask, baseline=baseline)


# --------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 3 or any(d < 4 for d in dims):
        raise ConfigError(f"--dims must be D,H,W with each >= 4, got {args.dims!r}")
    _log_config("synth", {"out": args.out, "count": args.count, "dims": list(dims),
                          "seed": args.seed, "structures": args.structures,
                          "masks": args.masks, "radius": list(args.radius)})
    os.makedirs(args.out, exist_ok=True)
    case_ids = []
    for i in range(args.count):
        spec = volumes.PhantomSpec(
            seed=args.seed + i, dims=dims, structures=args.structures,
            mask_count=args.masks, mask_radius=tuple(args.radius),
        )
        case = volumes.generate_phantom(spec)
        case_id = f"case_{i:04d}"
        case_dir = os.path.join(args.out, case_id)
        os.makedirs(case_dir, exist_ok=True)
        paths = case_paths(case_dir)
        volumes.write_volume(paths["gt"], case.ground_truth)
        volumes.write_volume(paths["mask"], case.mask)
        volumes.write_volume(paths["baseline"], case.baseline)
        case_ids.append(case_id)
    manifest = {"cases": case_ids, "dims": list(dims), "seed": args.seed}
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(case_ids)} cases to {args.out}")
    return 0


# --------------------------------------------------------------------------
# train


def build_slice_dataset(data_dir: str, image_size: int) -> trainer.SliceDataset:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no manifest.json in {data_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    x0s, bs, ms = [], [], []
    for case_id in manifest["cases"]:
        case = load_case(os.path.join(data_dir, case_id), need_gt=True)
        h, w = case.mask.dims[1:]
        if (h, w) != (image_size, image_size):
            raise ConfigError(
                f"{case_id}: slice size {h}x{w} does not match model size "
                f"{image_size}x{image_size}"
            )
        for rec in volumes.select_slices(case):
            x0s.append(rec.ground_truth)
            bs.append(rec.baseline)
            ms.append(rec.mask)
    if not x0s:
        raise ConfigError(f"dataset in {data_dir} has no nonzero-mask slices")
    stack = lambda parts: np.stack(parts)[:, None, :, :].astype(np.float32)
    return trainer.SliceDataset(x0=stack(x0s), b=stack(bs), m=stack(ms))


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
        "T": args.T, "seed": args.seed, "checkpoint_interval": args.checkpoint_interval,
    }
    cfg = load_run_config(args.config, overrides)

    start_step = 0
    adam = ema = None
    if args.resume:
        ckpt = trainer.load_checkpoint(args.resume)
        # the checkpoint owns the model, schedule, and noise-stream seed
        model = trainer.model_from_checkpoint(ckpt, use_ema=False)
        schedule = ckpt.schedule()
        cfg.seed = ckpt.seed
        cfg.T = ckpt.T
        tcfg = cfg.trainer_config()
        adam, ema = trainer.resume_state(ckpt, model, tcfg)
        start_step = ckpt.step_count
    else:
        model = build(cfg.unet_config(), seed=cfg.seed)
        schedule = cfg.noise_schedule()
        tcfg = cfg.trainer_config()

    _log_config("train", {**asdict(cfg), "data": args.data, "out": args.out,
                          "resume": args.resume})
    dataset = build_slice_dataset(args.data, model.config.image_size)
    print(f"dataset: {len(dataset)} slices of {dataset.slice_size}x{dataset.slice_size}")

    for ckpt in trainer.train(dataset, model, schedule, tcfg, start_step=start_step,
                              adam=adam, ema=ema, log=print):
        trainer.save_checkpoint(args.out, ckpt)
        print(f"checkpoint written to {args.out} at step {ckpt.step_count}")
    return 0


# --------------------------------------------------------------------------
# sample


def inpaint_case(model, schedule, case: volumes.MaskedCase, seed: int,
                 smooth_sigma: float | None, composite: bool = False) -> volumes.Volume:
    """Inpaint every nonzero-mask slice and reassemble the volume.

    When nothing is selected the baseline is returned untouched (no
    smoothing, no renormalization).  Per-slice noise streams are seeded as
    seed + slice index.
    """
    records = volumes.select_slices(case)
    if not records:
        return volumes.Volume(case.baseline.data.copy())
    b = np.stack([r.baseline for r in records])[:, None, :, :].astype(np.float32)
    m = np.stack([r.mask for r in records])[:, None, :, :].astype(np.float32)
    seeds = [seed + r.index for r in records]
    sampled = diffusion.sample_slices(model, b, m, schedule, seeds)
    out = volumes.reassemble(case.baseline, [(r.index, x) for r, x in zip(records, sampled[:, 0])])
    if smooth_sigma is not None:
        out = volumes.gaussian_smooth(out, smooth_sigma)
    out = volumes.renormalize_output(out, case.baseline)
    if composite:
        # keep the known region verbatim; only masked voxels carry new content
        blended = case.mask.data * out.data + (1.0 - case.mask.data) * case.baseline.data
        out = volumes.Volume(blended)
    return out


def cmd_sample(args: argparse.Namespace) -> int:
    _log_config("sample", {"ckpt": args.ckpt, "case": args.case, "out": args.out,
                           "sigma": args.sigma, "no_smooth": args.no_smooth,
                           "seed": args.seed, "composite": args.composite})
    ckpt = trainer.load_checkpoint(args.ckpt)
    model = trainer.model_from_checkpoint(ckpt, use_ema=True)
    schedule = ckpt.schedule()

    mask = volumes.binarize_mask(volumes.read_volume(case_paths(args.case)["mask"]))
    baseline = volumes.read_volume(case_paths(args.case)["baseline"])
    case = volumes.MaskedCase(ground_truth=None, mask=mask, baseline=baseline)

    s = model.config.image_size
    h, w = case.mask.dims[1:]
    if (h, w) != (s, s):
        raise ConfigError(f"case slice size {h}x{w} does not match checkpoint size {s}x{s}")

    sigma = None if args.no_smooth else args.sigma
    out = inpaint_case(model, schedule, case, seed=args.seed,
                       smooth_sigma=sigma, composite=args.composite)
    volumes.write_volume(args.out, out)
    print(f"wrote transformed volume to {args.out}")
    return 0


# --------------------------------------------------------------------------
# eval


def _resolve_eval_cases(pred: str, gt: str, mask: str) -> list[tuple[str, str, str, str]]:
    """(case id, pred path, gt path, mask path) for file or directory inputs."""
    if os.path.isfile(pred):
        case_id = os.path.splitext(os.path.basename(pred))[0]
        return [(case_id, pred, gt, mask)]
    out = []
    for name in sorted(os.listdir(pred)):
        if not (name.endswith(".vvol") or name.endswith(".nii")):
            continue
        case_id = os.path.splitext(name)[0]
        gt_path = _resolve_member(gt, case_id, name, "gt.vvol")
        mask_path = _resolve_member(mask, case_id, name, "mask.vvol")
        out.append((case_id, os.path.join(pred, name), gt_path, mask_path))
    return out


def _resolve_member(root: str, case_id: str, flat_name: str, member: str) -> str:
    flat = os.path.join(root, flat_name)
    if os.path.exists(flat):
        return flat
    return os.path.join(root, case_id, member)


def cmd_eval(args: argparse.Namespace) -> int:
    _log_config("eval", {"pred": args.pred, "gt": args.gt, "mask": args.mask,
                         "out": args.out, "data_range": args.data_range,
                         "ssim_region": args.ssim_region, "figures": not args.no_figures})
    pairs = _resolve_eval_cases(args.pred, args.gt, args.mask)
    if not pairs:
        print("no cases found", file=sys.stderr)
        return 1
    results = []
    montage_entries = []
    errors = 0
    for case_id, pred_path, gt_path, mask_path in pairs:
        try:
            pred = volumes.read_volume(pred_path)
            gt = volumes.read_volume(gt_path)
            mask = volumes.binarize_mask(volumes.read_volume(mask_path))
            cm = metrics.evaluate_case(case_id, pred, gt, mask,
                                       data_range=args.data_range,
                                       ssim_region=args.ssim_region)
            results.append(cm)
            montage_entries.append((case_id, pred, gt, mask))
        except Exception as e:
            errors += 1
            print(f"error: {case_id}: {e}", file=sys.stderr)
    if not results:
        print("no case evaluated successfully", file=sys.stderr)
        return 1
    report = metrics.make_report(results)
    with open(args.out, "w") as f:
        f.write(metrics.render_csv(report))
    print(metrics.render_table(report))
    if not args.no_figures:
        stem = os.path.splitext(args.out)[0]
        figures.save_metrics_figure(report, stem + "_summary.png")
        figures.save_case_montage(montage_entries, stem + "_cases.png")
    if errors:
        print(f"{errors} case(s) failed", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# argument parsing


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicepaint",
                                description="slice-wise diffusion inpainting of 3D volumes")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate synthetic phantom cases")
    ps.add_argument("--out", required=True, help="output dataset directory")
    ps.add_argument("--count", type=int, default=4)
    ps.add_argument("--dims", default="16,32,32", help="volume dims D,H,W")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--structures", type=int, default=3)
    ps.add_argument("--masks", type=int, default=2)
    ps.add_argument("--radius", type=float, nargs=2, default=(2.0, 4.0),
                    metavar=("LO", "HI"))
    ps.set_defaults(func=cmd_synth)

    pt = sub.add_parser("train", help="train the denoiser on a dataset")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config", default=None, help="JSON config file")
    pt.add_argument("--out", required=True, help="checkpoint path")
    pt.add_argument("--resume", default=None, help="checkpoint to continue from")
    pt.add_argument("--steps", type=int, default=None)
    pt.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    pt.add_argument("--lr", type=float, default=None)
    pt.add_argument("--T", type=int, default=None)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int, default=None)
    pt.set_defaults(func=cmd_train)

    pp = sub.add_parser("sample", help="inpaint one case with a trained model")
    pp.add_argument("--ckpt", required=True)
    pp.add_argument("--case", required=True, help="case directory (baseline + mask)")
    pp.add_argument("--out", required=True, help="output volume path (.vvol or .nii)")
    pp.add_argument("--sigma", type=float, default=DEFAULT_SMOOTH_SIGMA,
                    help="post-smoothing Gaussian sigma")
    pp.add_argument("--no-smooth", dest="no_smooth", action="store_true")
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--composite", action="store_true",
                    help="keep baseline values outside the mask")
    pp.set_defaults(func=cmd_sample)

    pe = sub.add_parser("eval", help="masked SSIM/PSNR/MSE report")
    pe.add_argument("--pred", required=True, help="volume file or directory")
    pe.add_argument("--gt", required=True)
    pe.add_argument("--mask", required=True)
    pe.add_argument("--out", required=True, help="CSV output path")
    pe.add_argument("--data-range", dest="data_range", type=float, default=1.0)
    pe.add_argument("--ssim-region", dest="ssim_region", choices=("map", "bbox"), default="map")
    pe.add_argument("--no-figures", dest="no_figures", action="store_true")
    pe.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, trainer.CheckpointError, volumes.VolumeIOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
