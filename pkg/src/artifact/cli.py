"""Command-line entry point: ``artifact <subcommand> ...``.

Subcommands mirror the pipeline stages: ``extract`` (indicator CSV), ``build-anchors``,
``gen`` (synthetic dataset directory), ``train``, ``run`` (full desk protocol) and
``eval``. Numbers are printed with six decimals.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import anchors as anc
from . import encoder as enc
from . import harness as hn
from . import indicators as ind
from .errors import ArtifactError, InvalidInput
from .harmonizer import METHODS
from .imgstat import load_image
from .trainer import Heads, TrainConfig

GATES = ("learnable", "0.01", "0.1", "1")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _recipe(text: str) -> tuple[str, str, float]:
    try:
        region, dim, intensity = text.split(":")
        return region, dim, float(intensity)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected region:dimension:intensity, got {text!r}") from None


def _train_config(args) -> TrainConfig:
    base = hn.DESK_TRAIN
    if args.config:
        base = TrainConfig.from_file(args.config, base=base)
    return replace(base, seed=args.seed) if args.seed is not None else base


def _ablations(args) -> hn.Ablations:
    return hn.Ablations(adh=not args.no_adh, apa=not args.no_apa, ind=not args.no_ind, align=args.align)


def _encoder_config(args, image_size: int = 64) -> enc.EncoderConfig:
    return replace(hn.DESK_ENCODER, image_size=image_size, gate_mode=args.gate)


def _print_auc(result: hn.ProtocolResult) -> None:
    for (s, e) in sorted(result.auc):
        print(f"after_task={s} eval_task={e} auc={result.auc[(s, e)]:.6f}")
    for s, v in result.averages().items():
        print(f"avg_auc_after_task{s}={v:.6f}")


# --- subcommands ------------------------------------------------------------------

def cmd_extract(args) -> int:
    masks = ind.read_mask_manifest(args.masks)
    mats = [ind.compute_indicator_matrix(load_image(p), masks, Path(p).stem) for p in args.images]
    calib = mats
    if args.calibration:
        calib = [ind.compute_indicator_matrix(load_image(p), masks, Path(p).stem) for p in args.calibration]
    norm = ind.fit_normalizer(calib)
    scored = [ind.anomaly_scores(m, norm) for m in mats]
    ind.write_indicator_csv(args.out, scored)
    print(f"images={len(scored)} channels={len(ind.CHANNELS)} out={args.out}")
    return 0


def cmd_build_anchors(args) -> int:
    lib = anc.build_library(anc.load_candidates(args.candidates), anc.load_supports(args.supports))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    anc.save_library(lib, out / "library.txt")
    for a in lib.anchors:
        print(f"{a.region}/{a.dimension}: {a.pair.fake_text}")
    print(f"library={out / 'library.txt'} dim={lib.dim}")
    return 0


def cmd_gen(args) -> int:
    spec = hn.SyntheticSpec(recipe=tuple(args.recipe or ()), image_size=args.image_size,
                            patch_size=args.patch_size, n_train=args.n_train, n_test=args.n_test,
                            seed=args.seed if args.seed is not None else 0)
    data = hn.gen_synthetic_task(spec, args.task_index)
    hn.save_dataset(data, args.out)
    print(f"train={len(data.train)} test={len(data.test)} out={args.out}")
    return 0


def _load_tasks(dirs) -> list[hn.TaskData]:
    tasks = [hn.load_dataset(d) for d in dirs]
    sides = {t.train[0].image.shape[0] for t in tasks}
    if len(sides) != 1:
        raise InvalidInput(f"datasets disagree on image size: {sorted(sides)}")
    return tasks


def cmd_train(args) -> int:
    cfg = _train_config(args)
    tasks = _load_tasks(args.data)
    enc_cfg = _encoder_config(args, tasks[0].train[0].image.shape[0])
    result = hn.run_protocol([], cfg, _ablations(args), enc_cfg, tasks=tasks)
    out = Path(args.out)
    hn.report(result, out)
    encoder, heads, lib, archive = result.state
    enc.save_checkpoint(out / "model.ckpt", encoder, heads.as_dict())
    anc.save_library(lib, out / "library.txt")
    archive.save(out / "heads.bin")
    _print_auc(result)
    print(f"checkpoint={out / 'model.ckpt'}")
    return 0


def cmd_run(args) -> int:
    cfg = _train_config(args)
    specs = hn.desk_tasks(cfg.seed)[:args.tasks]
    result = hn.run_protocol(specs, cfg, _ablations(args), _encoder_config(args))
    hn.report(result, args.out)
    _print_auc(result)
    return 0


def cmd_eval(args) -> int:
    encoder, extra = enc.load_checkpoint(args.checkpoint)
    heads = Heads(**{k: extra[k] for k in ("bin_w", "bin_b", "ind_w", "ind_b")})
    lib = anc.load_library(args.library) if args.library else None
    cfg = _train_config(args)
    samples = hn.load_split(args.data, args.split)
    use_apa = not args.no_apa and lib is not None
    print(f"auc={hn.evaluate(samples, encoder, heads, lib, cfg.n_anchors, use_apa):.6f}")
    return 0


# --- parser --------------------------------------------------------------------------

def _common(p, protocol: bool = False) -> None:
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--seed", type=_seed, help="unsigned 64-bit seed")
    if protocol:
        p.add_argument("--align", choices=METHODS, default="slerp")
        p.add_argument("--no-adh", action="store_true", help="skip head harmonization")
        p.add_argument("--no-apa", action="store_true", help="disable anchor injection")
        p.add_argument("--no-ind", action="store_true", help="drop the indicator loss")
        p.add_argument("--gate", choices=GATES, default="learnable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="images and masks to an indicator CSV")
    p.add_argument("images", nargs="+")
    p.add_argument("--masks", required=True, help="mask manifest (region=path lines)")
    p.add_argument("--calibration", nargs="*", help="reference images for the normalizer (default: inputs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-anchors", help="candidates and support sets to a library")
    p.add_argument("--candidates", required=True)
    p.add_argument("--supports", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_anchors)

    p = sub.add_parser("gen", help="write a synthetic task as a dataset directory")
    _common(p)
    p.add_argument("--recipe", type=_recipe, action="append", help="region:dimension:intensity")
    p.add_argument("--task-index", type=int, default=1)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train incrementally over dataset directories, in order")
    _common(p, protocol=True)
    p.add_argument("data", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="full synthetic desk protocol")
    _common(p, protocol=True)
    p.add_argument("--tasks", type=int, default=len(hn.DESK_TASKS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="AUC of a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--library")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--no-apa", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArtifactError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
