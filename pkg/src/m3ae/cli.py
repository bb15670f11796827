"""Command-line entry point: ``m3ae phantom|pretrain|finetune|eval``."""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from .masking import enumerate_subsets

log = logging.getLogger("m3ae")

ABLATIONS = {
    "zero-fill": {"fill": "zero"},
    "mean-fill": {"fill": "mean"},
    "no-distill": {"distill": False},
    "no-patch-mask": {"patch_masking": False},
}


def git_blob_hash(path: Path) -> str:
    raw = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def tree_hash(paths) -> tuple[str, dict]:
    """Hash a set of files the way a git tree would: sorted (name, blob) pairs."""
    entries = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            entries[str(f)] = git_blob_hash(f)
    digest = hashlib.sha1("".join(f"{k}\0{v}\n" for k, v in sorted(entries.items())).encode()).hexdigest()
    return digest, entries


def write_manifest(out_dir: Path, command: str, args, config: dict | None, inputs, artifacts,
                   started: dt.datetime) -> Path:
    """Append-only: every invocation gets its own manifest file."""
    mdir = Path(out_dir) / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    inputs_hash, input_entries = tree_hash([p for p in inputs if p is not None and Path(p).exists()])
    artifacts_hash, artifact_entries = tree_hash([p for p in artifacts if Path(p).exists()])
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs_hash": inputs_hash,
        "inputs": input_entries,
        "artifacts_hash": artifacts_hash,
        "artifacts": artifact_entries,
        "started": started.isoformat(),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    stamp = started.strftime("%Y%m%dT%H%M%S%fZ")
    path = mdir / f"{stamp}-{command}.json"
    n = 1
    while path.exists():
        path = mdir / f"{stamp}-{command}-{n}.json"
        n += 1
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def parse_subsets(spec: str, n_modalities: int = 4):
    if spec == "all":
        return enumerate_subsets(n_modalities)
    names = {name: i for i, name in enumerate(D.MODALITIES)}
    names["t1ce"] = names["t1c"]
    subsets = []
    for token in spec.split(","):
        try:
            subsets.append(tuple(sorted(names[t.strip().lower()] for t in token.split("+"))))
        except KeyError as exc:
            raise SystemExit(f"unknown modality {exc} in --subsets (use {', '.join(D.MODALITIES)})")
    return subsets


def _train_config(args, stage: str):
    from .trainer import load_config

    overrides = {"seed": args.seed}
    for mode in args.ablate or []:
        overrides.update(ABLATIONS[mode])
    return load_config(args.config, **overrides)


def cmd_phantom(args) -> int:
    started = dt.datetime.now(dt.timezone.utc)
    cfg = D.PhantomConfig(subject_count=args.subjects, volume_side=args.side, seed=args.seed,
                          patch_side=args.patch_side, noise_sigma=args.noise)
    try:
        subjects = D.generate_phantom(cfg)
    except D.ConfigError as exc:
        log.error("phantom: %s", exc)
        return 2
    out = Path(args.out)
    written = []
    for i, (vol, lab) in enumerate(subjects):
        written.append(D.save_subject(out, vol, lab, f"case_{i:04d}"))
    config = {k: (list(map(list, v)) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
    manifest = write_manifest(out, "phantom", args, config, [], written, started)
    digest, _ = tree_hash(written)
    print(f"wrote {len(written)} subjects to {out} (content hash {digest}); manifest {manifest}")
    return 0


def _export_substitute(ckpt_path: Path, out: Path) -> list[Path]:
    from .plotting import substitute_montage
    from .trainer import load_checkpoint

    sub = load_checkpoint(ckpt_path)["substitute"]["voxels"].numpy()
    vol_path = out / "substitute.m3v"
    D.write_volume_file(vol_path, sub)
    return [vol_path, substitute_montage(sub, out / "substitute.png")]


def _run_training(args, stage: str) -> int:
    from .plotting import plot_losses
    from .trainer import StageError, dump_config, run_stage

    started = dt.datetime.now(dt.timezone.utc)
    try:
        cfg = _train_config(args, stage)
    except D.ConfigError as exc:
        log.error("%s: %s", stage, exc)
        return 2
    if stage == "finetune":
        if args.pretrained is None and not args.from_scratch:
            log.error("finetune: pass --pretrained CKPT, or --from-scratch for the no-pretraining ablation")
            return 2
        if "no-patch-mask" in (args.ablate or []) and args.pretrained is not None:
            from .trainer import load_checkpoint

            if load_checkpoint(args.pretrained)["config"]["patch_masking"]:
                log.error("finetune: no-patch-mask needs a checkpoint pretrained with --ablate no-patch-mask")
                return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stage}_config.txt").write_text(dump_config(cfg))
    subjects = D.load_dataset(args.data)
    try:
        final = run_stage(cfg, stage, subjects, out, resume=args.resume,
                          pretrained=getattr(args, "pretrained", None),
                          from_scratch=getattr(args, "from_scratch", False), device=args.device)
    except (StageError, D.ConfigError) as exc:
        log.error("%s (data=%s, out=%s): %s", stage, args.data, out, exc)
        return 2
    artifacts = [final, out / f"losses_{stage}.csv", out / f"trace_{stage}.csv", out / f"{stage}_config.txt"]
    artifacts += sorted(out.glob(f"{stage}_epoch*.pt"))
    artifacts.append(plot_losses(out / f"losses_{stage}.csv", out / f"losses_{stage}.png"))
    if stage == "pretrain":
        artifacts += _export_substitute(final, out)
    manifest = write_manifest(out, stage, args, cfg.to_dict(), [args.data, args.config, args.pretrained
                              if stage == "finetune" else None, args.resume], artifacts, started)
    print(f"{stage} finished: {final}; manifest {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, "pretrain")


def cmd_finetune(args) -> int:
    return _run_training(args, "finetune")


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_report
    from .trainer import load_checkpoint, model_from_checkpoint

    started = dt.datetime.now(dt.timezone.utc)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt["stage"] != "finetune" or ckpt["heads"] != "segmentation":
        log.error("eval: %s is not a fine-tuned checkpoint", args.checkpoint)
        return 2
    model = model_from_checkpoint(ckpt).to(args.device)
    fill = ckpt["substitute"]["voxels"].to(args.device)
    subjects = D.load_dataset(args.data)
    subsets = parse_subsets(args.subsets, subjects[0].volume.n_modalities)
    results = evaluate(subjects, model, fill, subsets, device=args.device)
    out = Path(args.out)
    try:
        paths = write_report(results, out, subjects[0].volume.n_modalities,
                             require_complete=args.subsets == "all")
    except Exception as exc:
        log.error("eval: %s", exc)
        return 2
    manifest = write_manifest(out, "eval", args, ckpt["config"], [args.data, args.checkpoint],
                              list(paths.values()), started)
    print(f"eval: {len(results)} subsets x {len(subjects)} cases -> {paths['summary']}; manifest {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3ae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=50)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--patch-side", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--resume", default=None, help="checkpoint of this stage to continue from")
        p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
        p.add_argument("--device", default="cpu")
        if name == "finetune":
            p.add_argument("--pretrained", default=None)
            p.add_argument("--from-scratch", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint over modality subsets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subsets", default="all", help="'all' or e.g. flair+t1,t2")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if os.environ.get("M3AE_DETERMINISTIC") == "1":
        import torch

        torch.use_deterministic_algorithms(True)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
