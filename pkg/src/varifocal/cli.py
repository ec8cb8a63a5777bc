"""``varifocal`` command line: gen, train, eval, karyotype."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import trainer
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import (PreprocessConfig, load_manifest, prepare, read_image, split_folds, validation_split, write_image,
                   write_manifest)
from .dispatch import CaseProbabilities, DispatchError, dispatch_case, read_probability_csv
from .metrics import evaluate
from .numeric import NumericError
from .synth import generate_cases

logger = logging.getLogger("varifocal")


class CLIError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "fold", None) is not None:
        changes["fold"] = args.fold
    if getattr(args, "th", None) is not None:
        changes["th"] = args.th
    return cfg.replace(**changes) if changes else cfg


def _fold_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / f"fold{cfg.fold}"


def _split(cfg: RunConfig):
    cases = load_manifest(cfg.manifest_path)
    folds = split_folds(cases, cfg.seed, cfg.n_folds)
    by_id = {c.case_id: c for c in cases}
    return [by_id[i] for i in folds.train_cases(cfg.fold)], [by_id[i] for i in folds.test_cases(cfg.fold)]


def _samples(cases) -> list:
    return [s for c in cases for s in c.samples]


def _check_compatible(model, cfg: RunConfig) -> None:
    c = model.consts
    if model.width_scale != cfg.width_scale or c.image_side != cfg.image_side or c.zoom_side != cfg.zoom_side:
        raise CLIError(
            f"checkpoint (width_scale={model.width_scale}, image_side={c.image_side}, zoom_side={c.zoom_side}) "
            f"does not match config (width_scale={cfg.width_scale}, image_side={cfg.image_side}, "
            f"zoom_side={cfg.zoom_side})")


# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    root = Path(cfg.data_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create {root}: {exc}") from exc
    cases = generate_cases(cfg.n_cases, cfg.seed, cfg.synthetic(), cfg.sex_ratio, cfg.trisomy_fraction)
    paths = {}
    for case in cases:
        (root / "images" / case.case_id).mkdir(exist_ok=True)
        for i, smp in enumerate(case.samples):
            rel = Path("images") / case.case_id / f"{i:02d}.png"
            write_image(root / rel, smp.image)
            paths[id(smp)] = rel.as_posix()
    write_manifest(cfg.manifest_path, cases, paths)
    n = sum(len(c.samples) for c in cases)
    print(f"wrote {len(cases)} cases ({n} images) to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.require_dataset()
    train_cases, _ = _split(cfg)
    fit_cases, val_cases = validation_split(train_cases, cfg.val_fraction, cfg.seed)
    consts, pre = cfg.constants(), cfg.preprocess()
    data = trainer.TrainData.from_samples(_samples(fit_cases), pre, consts)
    val = prepare(_samples(val_cases), pre, consts) if val_cases else None
    out = _fold_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dumps(), encoding="utf-8")

    log = trainer.LossLog()
    start = 0
    if args.checkpoint:
        model, stage = trainer.load_model(args.checkpoint)
        _check_compatible(model, cfg)
        start = stage + 1
        if (out / "loss_log.csv").is_file():
            log = trainer.LossLog.read_csv(out / "loss_log.csv")
        logger.info("resuming after stage %d (%s)", stage, trainer.STAGES[stage])
    else:
        model = trainer.VarifocalModel(cfg.width_scale, consts)
    trainer.run_schedule(model, data, cfg.train_config(), val, out_dir=out, log=log, start_stage=start)
    trainer.save_model(out / "final.vfn", model, len(trainer.STAGES) - 1)
    print(f"trained fold {cfg.fold}: checkpoints and loss_log.csv in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    cfg.require_dataset()
    ckpt = Path(args.checkpoint) if args.checkpoint else _fold_dir(cfg) / "final.vfn"
    model, _ = trainer.load_model(ckpt)
    _check_compatible(model, cfg)
    train_cases, test_cases = _split(cfg)
    cases = train_cases if args.split == "train" else test_cases
    ps = prepare(_samples(cases), cfg.preprocess(), cfg.constants())
    res = trainer.predict_batch(model, ps.images)
    report = evaluate(res["type_probs"], ps.types, res["polarity_probs"], ps.polarities, ps.case_ids,
                      dispatch=args.dispatch, th=cfg.th)
    out = Path(args.out) if args.out else _fold_dir(cfg) / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_confusion_csv(out / "confusion.csv")
    components = {
        "g_net_type_acc": float((res["g_type_probs"].argmax(1) == ps.types).mean()),
        "l_net_type_acc": float((res["l_type_probs"].argmax(1) == ps.types).mean()),
        "ensemble_type_acc": report.acc,
        "g_net_polarity_acc": float((res["g_polarity_probs"].argmax(1) == ps.polarities).mean()),
        "l_net_polarity_acc": float((res["l_polarity_probs"].argmax(1) == ps.polarities).mean()),
        "ensemble_polarity_acc": report.polarity_acc,
    }
    (out / "components.json").write_text(json.dumps(components, indent=2) + "\n", encoding="utf-8")
    print(report.text_table())
    return 0


def _case_probabilities(model, image_dir: Path) -> CaseProbabilities:
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in (".png", ".pgm", ".tif", ".tiff", ".bmp"))
    if not files:
        raise CLIError(f"no images in {image_dir}")
    from .data import pad_to_square, resize_and_normalize

    pre = PreprocessConfig.desk(model.consts.image_side)
    images = np.stack([resize_and_normalize(pad_to_square(read_image(f), pre.pad_side), pre.image_side)
                       for f in files]).astype(np.float32)
    probs = trainer.predict_batch(model, images)["type_probs"].astype(np.float64)
    return CaseProbabilities(image_dir.name, probs / probs.sum(axis=1, keepdims=True), [f.stem for f in files])


def cmd_karyotype(args) -> int:
    th = 0.9 if args.th is None else args.th
    if args.probs:
        probs = read_probability_csv(args.probs)
    elif args.images:
        if not args.checkpoint:
            raise CLIError("--images requires --checkpoint")
        model, _ = trainer.load_model(args.checkpoint)
        probs = _case_probabilities(model, Path(args.images))
    else:
        raise CLIError("give --probs CSV or --images DIR")
    result = dispatch_case(probs, th)
    text = json.dumps(result.to_json(probs.chromosome_ids), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varifocal", description="Two-scale chromosome classification pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic karyotype corpus")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the four-step schedule and stage-2 MLPs on one fold")
    t.add_argument("--config")
    t.add_argument("--checkpoint", help="resume after the stage stored in this checkpoint")
    t.add_argument("--fold", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a fold")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--fold", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--dispatch", action="store_true", help="also compute per-case accuracy after dispatch")
    e.add_argument("--th", type=float)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--out", help="report directory")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("karyotype", help="dispatch one case to per-type sets")
    k.add_argument("--checkpoint")
    k.add_argument("--images", help="directory holding one case's chromosome images")
    k.add_argument("--probs", help="precomputed probability CSV (chromosome_id, p_1..p_24)")
    k.add_argument("--th", type=float)
    k.add_argument("--out", help="assignment JSON path (default stdout)")
    k.set_defaults(func=cmd_karyotype)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, CheckpointError, DispatchError, NumericError, trainer.TrainingDivergence,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
