"""Command line entry point: gen-data, curate, train, sample, eval, check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("structvid")


class UsageError(Exception):
    """Bad flags, missing inputs or contradictory configuration (exit code 2)."""


def _data_dir(value: str | None) -> Path:
    value = value or os.environ.get("SVD_DATA_DIR")
    if not value:
        raise UsageError("no data directory given (use --data/--in or set SVD_DATA_DIR)")
    return Path(value)


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse config file {p}: {exc}") from exc


def _log_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **resolved}
    (out_dir / f"{command}_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True, default=str))
    log.info("resolved %s config: %s", command, json.dumps(payload, sort_keys=True, default=str))


# ---------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    from .dataset import generate_dataset

    out = _data_dir(args.out)
    if args.clips < 0:
        raise UsageError("--clips must be non-negative")
    m = generate_dataset(out, args.clips, seed=args.seed, frames=args.frames, height=args.height,
                         width=args.width, max_entities=args.max_entities)
    _log_config(out, "gen-data", {"clips": args.clips, "seed": args.seed, "frames": args.frames,
                                  "height": args.height, "width": args.width, "max_entities": args.max_entities})
    print(f"wrote {len(m)} clips to {out}")
    return 0


def cmd_curate(args) -> int:
    from .curation import curate_dataset

    src = _data_dir(args.inp)
    if not (src / "clips").is_dir():
        raise UsageError(f"{src} has no clips/ directory")
    report = curate_dataset(src, Path(args.out), Path(args.report) if args.report else None)
    kept = sum(r["keep"] for r in report["clips"])
    print(f"kept {kept} of {len(report['clips'])} clips -> {args.out}")
    return 0


def _train_config(args, file_cfg: dict):
    from .trainer import TrainConfig

    section = dict(file_cfg.get("train", {}))
    section.update({k: v for k, v in file_cfg.items() if k in TrainConfig.__dataclass_fields__})
    flags = {"stage": args.stage, "steps": args.steps, "modalities": args.modalities, "seed": args.seed,
             "learning_rate": args.lr, "batch_size": args.batch_size, "frames": args.frames,
             "checkpoint_every": args.checkpoint_every, "init_from": args.init_from}
    section.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _denoiser_config(file_cfg: dict, codec: str | None):
    from .denoiser import DenoiserConfig

    section = dict(file_cfg.get("denoiser", {}))
    if codec:
        section["codec"] = codec
    if section.get("codec") == "space_to_depth" and "latent_channels" not in section:
        section["latent_channels"] = 3 * section.get("codec_factor", 2) ** 2
    try:
        return DenoiserConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid denoiser config: {exc}") from exc


def cmd_train(args) -> int:
    from .dataset import read_manifest
    from .trainer import run_training

    file_cfg = load_config_file(args.config)
    cfg = _train_config(args, file_cfg)
    dcfg = _denoiser_config(file_cfg, args.codec)
    manifest_path = Path(args.manifest) if args.manifest else _data_dir(args.data) / "manifest.json"
    try:
        manifest = read_manifest(manifest_path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if len(manifest) == 0:
        raise UsageError(f"{manifest_path} lists no clips")
    first = manifest.clip_dir(manifest.ids[0])
    if "normal" in cfg.modalities and not (first / "mask_000000.png").is_file():
        raise UsageError("normal supervision needs identity masks, but the dataset has none")
    if cfg.stage == 2 and min(int(c["frames"]) for c in manifest.clips) < cfg.frames:
        raise UsageError(f"stage 2 uses {cfg.frames}-frame windows but some clips are shorter")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    out = Path(args.out)
    _log_config(out, "train", {"train": cfg.to_json(), "denoiser": dcfg.to_json(),
                               "manifest": str(manifest_path), "resume": args.resume})
    result = run_training(cfg, manifest, out, model_config=None if cfg.init_from else dcfg, resume=args.resume)
    print(f"trained to step {result.state.step}; {len(result.metrics)} metric records in {out / 'metrics.jsonl'}")
    return 0


def _load_ckpt(path: str):
    from .denoiser import load_model

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    model, meta, _ = load_model(p)
    return model


def contact_sheet(videos: dict[str, np.ndarray], pose: np.ndarray | None) -> np.ndarray:
    """Rows are frames, columns are pose | rgb | depth | normal (whichever exist)."""
    cols = []
    if pose is not None:
        cols.append(pose)
    for m in ("rgb", "depth", "normal"):
        if m in videos:
            cols.append(videos[m])
    return np.concatenate([np.concatenate(list(c), axis=0) for c in cols], axis=1)


def cmd_sample(args) -> int:
    from PIL import Image

    from .dataset import _to_u8, read_manifest
    from .evaluation import DiffusionGenerator

    model = _load_ckpt(args.ckpt)
    manifest = read_manifest(_data_dir(args.data))
    if len(manifest) == 0:
        raise UsageError("dataset lists no clips")
    clip_id = args.clip or manifest.ids[0]
    if clip_id not in manifest.ids:
        raise UsageError(f"clip {clip_id} not in the manifest")
    clip = manifest.load(clip_id)
    frames = min(args.frames or clip.frames, clip.frames)
    indices = list(range(frames))
    ref = indices[len(indices) // 2] if args.ref is None else args.ref
    if not 0 <= ref < clip.frames:
        raise UsageError(f"reference frame {ref} outside the clip")
    out = Path(args.out)
    _log_config(out, "sample", {"ckpt": args.ckpt, "clip": clip_id, "frames": frames, "ref": ref,
                                "steps": args.steps, "seed": args.seed, "modalities": list(model.modalities)})
    videos = DiffusionGenerator(model, steps=args.steps, seed=args.seed)(clip, indices, ref)
    for m, video in videos.items():
        d = out / m
        d.mkdir(parents=True, exist_ok=True)
        for f, frame in enumerate(video):
            Image.fromarray(_to_u8(frame)).save(d / f"{m}_{f:06d}.png")
    if not args.no_contact_sheet:
        sheet = contact_sheet(videos, clip.pose[indices])
        Image.fromarray(_to_u8(sheet)).save(out / "contact_sheet.png")
    print(f"wrote {frames} frames of {', '.join(videos)} to {out}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import read_manifest
    from .evaluation import (DiffusionGenerator, OracleGenerator, RepeatReferenceGenerator, evaluate_model,
                             get_protocol, write_report)

    try:
        protocol = get_protocol(args.protocol)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = _data_dir(args.data)
    manifest = read_manifest(Path(args.manifest) if args.manifest else data)
    if args.generator == "model":
        if not args.ckpt:
            raise UsageError("--ckpt is required for the model generator")
        model = _load_ckpt(args.ckpt)
        gen = DiffusionGenerator(model, steps=args.steps, seed=args.seed)
        mods = model.modalities
    else:
        mods = tuple(args.modalities.split(",")) if args.modalities else ("rgb",)
        gen = OracleGenerator(mods) if args.generator == "oracle" else RepeatReferenceGenerator(mods)
    out = Path(args.out)
    _log_config(out.parent, "eval", {"ckpt": args.ckpt, "data": str(data), "protocol": protocol.name,
                                     "generator": args.generator, "steps": args.steps, "seed": args.seed})
    report = evaluate_model(gen, manifest, protocol, mods)
    report["generator"] = args.generator
    write_report(out, report)
    agg = report["aggregate"].get("rgb")
    if agg:
        print(f"rgb PSNR {agg['psnr']:.3f} dB, SSIM {agg['ssim']:.4f} over {report['evaluated']} clips "
              f"({report['skipped_count']} skipped)")
    else:
        print(f"no clip evaluated ({report['skipped_count']} skipped)")
    return 0


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structvid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", help="dataset directory (default: $SVD_DATA_DIR)")
    g.add_argument("--clips", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--max-entities", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("curate", help="filter clips and write a manifest")
    c.add_argument("--in", dest="inp", help="dataset directory (default: $SVD_DATA_DIR)")
    c.add_argument("--out", required=True, help="output manifest.json")
    c.add_argument("--report", help="optional per-clip report")
    c.set_defaults(func=cmd_curate)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--data", help="dataset directory (default: $SVD_DATA_DIR)")
    t.add_argument("--manifest", help="manifest to train on (default: <data>/manifest.json)")
    t.add_argument("--out", default="runs/train", help="checkpoint directory")
    t.add_argument("--config", help="JSON or TOML config; flags win")
    t.add_argument("--modalities", help="comma list, e.g. rgb,depth,normal")
    t.add_argument("--steps", type=int)
    t.add_argument("--stage", type=int, choices=(1, 2))
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--frames", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--codec", choices=("identity", "space_to_depth"))
    t.add_argument("--init-from", help="start from these weights (stage 2 after stage 1)")
    t.add_argument("--resume", help="continue an interrupted run from its checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a clip from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", help="dataset providing conditions (default: $SVD_DATA_DIR)")
    s.add_argument("--clip")
    s.add_argument("--frames", type=int)
    s.add_argument("--ref", type=int, help="reference frame (default: middle)")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="runs/sample")
    s.add_argument("--no-contact-sheet", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint under an evaluation protocol")
    e.add_argument("--ckpt")
    e.add_argument("--data", help="dataset directory (default: $SVD_DATA_DIR)")
    e.add_argument("--manifest", help="manifest listing the test clips (default: <data>/manifest.json)")
    e.add_argument("--protocol", default="default")
    e.add_argument("--out", default="runs/eval/report.json")
    e.add_argument("--generator", choices=("model", "repeat-reference", "oracle"), default="model")
    e.add_argument("--modalities", help="modalities for the non-model generators")
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("check", help="run the built-in invariant suites")
    k.set_defaults(func=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
