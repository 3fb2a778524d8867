"""Command line: ``svflab {pretrain,train,eval,ablate} --config FILE [section.key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from svflab.config import ConfigError, ExperimentConfig, load_config
from svflab.metrics import read_results, write_results
from svflab.model import (
    FSSModel, SegHead, build_fss_model, load_checkpoint, pretrain_backbone, save_checkpoint,
)
from svflab.strategy import StrategyConfig
from svflab.svf import read_svd_changes, singular_value_report, write_svd_changes
from svflab.training import History, apply_strategy, evaluate, train, validation_episodes

log = logging.getLogger("svflab")

AXES = ("bn", "layers", "convkind", "subspace", "svf-layers")


def ablation_rows(axis: str) -> list[tuple[str, StrategyConfig]]:
    """(row name, strategy) pairs of one ablation table."""
    svf = StrategyConfig.svf
    if axis == "bn":
        return [("baseline", StrategyConfig.freeze()), ("bn-only", StrategyConfig.freeze(bn_trainable=True)),
                ("bn+S", svf(bn_trainable=True)), ("S-only", svf())]
    if axis == "layers":
        return [("baseline", StrategyConfig.freeze()), ("full", StrategyConfig.full()),
                ("part@234", StrategyConfig.layers({2, 3, 4})), ("part@34", StrategyConfig.layers({3, 4})),
                ("part@4", StrategyConfig.layers({4})), ("svf@234", svf())]
    if axis == "convkind":
        return [("baseline", StrategyConfig.freeze()),
                ("both@234", StrategyConfig.convkind("both")),
                ("3x3@234", StrategyConfig.convkind("3x3")),
                ("1x1@234", StrategyConfig.convkind("1x1")), ("svf@234", svf())]
    if axis == "subspace":
        subsets = ["U", "S", "V", "US", "UV", "SV", "USV"]
        return [(s, svf(subspaces=s)) for s in subsets]
    if axis == "svf-layers":
        return [("@" + "".join(map(str, st)), svf(stages=st))
                for st in ({4}, {3, 4}, {2, 3, 4}, {1, 2, 3, 4})]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")


def _load_backbone(cfg: ExperimentConfig):
    path = cfg.backbone_dir
    if not (path / "manifest.txt").is_file():
        raise FileNotFoundError(f"no pretrained checkpoint at {path}; run `svflab pretrain` first")
    backbone, _, strategy, _ = load_checkpoint(path)
    if strategy is not None and strategy.kind != "freeze":
        raise ValueError(f"{path} holds a fine-tuned model ({strategy.label}), not a pretrained backbone")
    return backbone


def _new_head(cfg: ExperimentConfig, backbone) -> SegHead:
    return SegHead.init(cfg.seed, backbone.channels[2] + backbone.channels[3])


def _result_row(cfg, strategy: StrategyConfig, k: int, scores: dict) -> dict:
    return {"fold": cfg.fold, "strategy": strategy.label, "k": k, **scores}


def _run(cfg: ExperimentConfig, strategy: StrategyConfig, backbone, emit):
    model = build_fss_model(backbone, _new_head(cfg, backbone), strategy, cfg.train.dtype)
    before = {d.name: d.snapshot() for d in model.decomposed()}
    val = validation_episodes(cfg.plan, cfg.train)
    model, history = train(model, cfg.plan, strategy, cfg.train, progress=emit, val_set=val)
    scores = evaluate(model, val)
    return model, history, before, scores


def cmd_pretrain(cfg: ExperimentConfig, emit=print) -> Path:
    p = cfg.pretrain
    result = pretrain_backbone(cfg.plan, p.epochs, cfg.pretrain_seed, patch_size=p.patch_size,
                               per_class=p.per_class, eval_per_class=p.eval_per_class,
                               batch_size=p.batch_size, lr=p.lr, momentum=p.momentum)
    acc = "n/a" if math.isnan(result.accuracy) else f"{result.accuracy:.4f}"
    out = save_checkpoint(cfg.checkpoint_dir / "pretrain", result.backbone, seed=cfg.pretrain_seed,
                          epoch=p.epochs, extra={"pretrain_accuracy": acc,
                                                 "base_classes": result.num_classes})
    load_checkpoint(out)
    emit(f"pretrain accuracy: {acc} ({result.num_classes} base classes, chance {1 / result.num_classes:.4f})")
    return out


def cmd_train(cfg: ExperimentConfig, emit=print) -> dict[str, Path]:
    backbone = _load_backbone(cfg)
    strategy = cfg.strategy
    model, history, before, scores = _run(cfg, strategy, backbone, emit)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = {"history": out / "history.csv", "result": out / "result.csv",
             "checkpoint": cfg.checkpoint_dir / "final"}
    history.write_csv(paths["history"])
    write_results(paths["result"], [_result_row(cfg, strategy, cfg.train.k, scores)])
    save_checkpoint(paths["checkpoint"], model.backbone, model.head, strategy=strategy,
                    seed=cfg.seed, epoch=cfg.train.epochs)
    svd_path = out / "svd_changes.csv"
    if strategy.is_svf:
        records = []
        for d in model.decomposed():
            records += singular_value_report(before[d.name], d)
        write_svd_changes(svd_path, records)
        paths["svd_changes"] = svd_path
    elif svd_path.exists():
        svd_path.unlink()  # stale file from an earlier SVF run in the same directory
    # everything written must parse back
    History.read_csv(paths["history"])
    read_results(paths["result"])
    load_checkpoint(paths["checkpoint"])
    if "svd_changes" in paths:
        read_svd_changes(svd_path)
    emit(f"final val miou={scores['miou']:.4f} fb_iou={scores['fb_iou']:.4f}")
    return paths


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, out_path=None, emit=print) -> Path:
    ckpt = Path(checkpoint) if checkpoint else cfg.checkpoint_dir / "final"
    if not (ckpt / "manifest.txt").is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    backbone, head, strategy, _ = load_checkpoint(ckpt)
    strategy = strategy or StrategyConfig.freeze()
    if head is None:
        head = _new_head(cfg, backbone)
    model = apply_strategy(FSSModel(backbone, head, None, cfg.train.dtype), strategy)
    rows = []
    for k in cfg.eval_shots:
        val = validation_episodes(cfg.plan, cfg.train, k=k, count=cfg.eval_episodes)
        scores = evaluate(model, val)
        rows.append(_result_row(cfg, strategy, k, scores))
        emit(f"k={k} miou={scores['miou']:.4f} fb_iou={scores['fb_iou']:.4f}")
    out = Path(out_path) if out_path else cfg.output_dir / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(out, rows)
    read_results(out)
    return out


def cmd_ablate(cfg: ExperimentConfig, axis: str, out_path=None, emit=print) -> Path:
    rows_spec = ablation_rows(axis)
    backbone = _load_backbone(cfg)
    rows = []
    for name, strategy in rows_spec:
        emit(f"== {axis}: {name} ({strategy.label})")
        _, _, _, scores = _run(cfg, strategy, backbone, emit)
        rows.append(_result_row(cfg, strategy, cfg.train.k, scores))
    out = Path(out_path) if out_path else cfg.output_dir / f"ablate_{axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results(out, rows)
    if len(read_results(out)) != len(rows_spec):
        raise RuntimeError(f"{out} did not parse back with {len(rows_spec)} rows")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="svflab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="overrides experiment.seed everywhere")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("overrides_pos", nargs="*", metavar="SECTION.KEY=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("pretrain", help="pretrain the backbone on base-class patches"))
    common(sub.add_parser("train", help="fine-tune with the configured strategy"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint for k in eval.shots"))
    ev.add_argument("--checkpoint", help="checkpoint directory (default: <output_dir>/checkpoints/final)")
    ev.add_argument("--out", help="results CSV (default: <output_dir>/eval.csv)")
    ab = common(sub.add_parser("ablate", help="run one ablation table"))
    ab.add_argument("--axis", required=True, choices=AXES)
    ab.add_argument("--out", help="results CSV (default: <output_dir>/ablate_<axis>.csv)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    def emit(line):
        print(line, flush=True)

    try:
        cfg = load_config(args.config, args.overrides + args.overrides_pos, args.seed)
        if args.command == "pretrain":
            cmd_pretrain(cfg, emit)
        elif args.command == "train":
            cmd_train(cfg, emit)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.out, emit)
        else:
            cmd_ablate(cfg, args.axis, args.out, emit)
    except ConfigError as exc:
        print(f"svflab: config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, OSError, RuntimeError) as exc:
        print(f"svflab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
