"""Command-line entry point: ``framers <command> [--config FILE] [--seed N] [--out-dir DIR]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import clipio, codec, config as cfgmod, framemae, labelgen, plotting, selector

log = logging.getLogger("framers")


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- shared helpers -------------------------------------------------------------


def _out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg, command: str, consumed: dict | None = None) -> None:
    out = _out(cfg)
    cfgmod.dump(cfg, out / f"{command}.config.yaml")
    (out / f"{command}.inputs.json").write_text(json.dumps(consumed or {}, indent=2, sort_keys=True))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: expected {path}")
    return path


def _load_framemae(cfg, path=None):
    ckpt = Path(path) if path else Path(cfg.out_dir) / "framemae"
    _require(ckpt / "manifest.json", "FrameMAE checkpoint (run `framers pretrain` first)")
    return framemae.load_framemae(ckpt)


def _load_selector(cfg, path=None):
    ckpt = Path(path) if path else Path(cfg.out_dir) / "selector"
    _require(ckpt / "manifest.json", "selector checkpoint (run `framers train-selector` first)")
    return selector.load_selector(ckpt)


def _clips(cfg, which: str) -> list[clipio.VideoClip]:
    """Clips for a stage: the configured dataset, or seeded planted clips."""
    m = cfg.model
    if cfg.data.source:
        clips, _ = clipio.read_dataset(cfg.data.source)
        return clips
    n = {"pretrain": cfg.data.pretrain_clips, "label": cfg.data.label_clips, "eval": cfg.data.eval_clips}[which]
    seed = {"pretrain": cfg.data.pretrain_seed, "label": cfg.data.label_seed, "eval": cfg.data.eval_seed}[which]
    planted = clipio.random_planted_clips(
        m.clip_spec, n, seed, k=cfg.codec.k, temporal_patch=m.temporal_patch, prefix=which
    )
    return [p.clip for p in planted]


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- commands ---------------------------------------------------------------------


def cmd_pretrain(cfg, args) -> None:
    out = _out(cfg)
    clips = _clips(cfg, "pretrain")
    state = framemae.pretrain(clips, cfg.model, cfg.train, cfg.seed, checkpoint_dir=out / "checkpoints")
    mhash = framemae.save_framemae(out / "framemae", state.model, step=state.step, seed=cfg.seed)
    _write_csv(
        out / "pretrain_loss.csv",
        [{"step": i + 1, "loss": repr(v)} for i, v in enumerate(state.loss_trace)],
        ("step", "loss"),
    )
    plotting.loss_curve(state.loss_trace, out / "pretrain_loss.png")
    _snapshot(cfg, "pretrain", {"produced": {"framemae": mhash}})
    print(f"pretrained {state.step} steps, final loss {state.loss_trace[-1]:.6f}, checkpoint {mhash}")


def cmd_gen_labels(cfg, args) -> None:
    model, manifest = _load_framemae(cfg, args.checkpoint)
    clips = _clips(cfg, "label")
    result = labelgen.build_label_dataset(clips, model, Path(cfg.out_dir) / "labels", k=cfg.selector.k)
    _snapshot(cfg, "gen-labels", {"framemae": manifest["model_hash"]})
    print(f"labelled {result['evaluated']} new clips ({result['count']} total) with checkpoint {result['model_hash']}")


def _selector_inputs(cfg, args):
    model, manifest = _load_framemae(cfg, args.checkpoint)
    label_dir = _require(Path(cfg.out_dir) / "labels" / "manifest.json", "label dataset (run `framers gen-labels`)").parent
    records, label_manifest = labelgen.read_labels(label_dir)
    if label_manifest["model_hash"] != manifest["model_hash"]:
        raise ValueError(
            f"labels were produced by checkpoint {label_manifest['model_hash']}, "
            f"but the FrameMAE checkpoint is {manifest['model_hash']}"
        )
    clips = {c.clip_id: c for c in _clips(cfg, "label")}
    missing = [r.clip_id for r in records if r.clip_id not in clips]
    if missing:
        raise ValueError(f"label {missing[0]} has no matching clip in the configured data")
    feats = selector.batch_features([clips[r.clip_id] for r in records], model)
    sel = cfg.selector
    sconf = selector.SelectorConfig(
        in_dim=cfg.model.embed_dim,
        t_tok=cfg.model.t_tok,
        k=sel.k,
        proj_dim=sel.proj_dim,
        blocks=sel.blocks,
        hidden=sel.hidden,
        dropout=sel.dropout,
    )
    return feats, records, sconf, manifest["model_hash"]


def cmd_train_selector(cfg, args) -> None:
    out = _out(cfg)
    feats, records, sconf, mhash = _selector_inputs(cfg, args)
    if args.ablation:
        rows = selector.ablation_sweep(
            [tuple(p) for p in cfg.selector.ablation], feats, records, sconf, cfg.selector.train, cfg.seed, mhash
        )
        _write_csv(out / "ablation.csv", rows, ("blocks", "top1", "top5", "dropout", "best_epoch"))
        table = selector.format_table(rows)
        (out / "ablation.md").write_text(table + "\n")
        print(table)
    result = selector.train_selector(feats, records, sconf, cfg.selector.train, cfg.seed, mhash)
    shash = selector.save_selector(out / "selector", result)
    _write_csv(out / "selector_metrics.csv", result.trace, ("epoch", "loss", "val_loss", "top1", "top5"))
    plotting.selector_curves(result.trace, out / "selector_metrics.png")
    _snapshot(cfg, "train-selector", {"framemae": mhash, "produced": {"selector": shash}})
    print(f"best epoch {result.best_epoch}: top-1 {result.best_top1:.3f}, top-5 {result.best_top5:.3f}")


def _policy(cfg, name: str, args):
    model = sel = None
    if name in ("oracle", "learned"):
        model, _ = _load_framemae(cfg, args.checkpoint)
    if name == "learned":
        sel, _ = _load_selector(cfg, getattr(args, "selector", None))
    return codec.select_policy(
        name, cfg.model.t_tok, cfg.codec.k, cfg.codec.random_seed, framemae=model, selector=sel
    )


def cmd_compress(cfg, args) -> None:
    _, manifest = _load_framemae(cfg, args.checkpoint)
    frames = clipio.read_frames(_require(Path(args.input), "input clip directory"))
    clip = clipio.normalize(frames, clip_id=args.clip_id or Path(args.input).name)
    policy = _policy(cfg, args.policy, args)
    cc = codec.compress(clip, policy, manifest["model_hash"], args.policy, temporal_patch=cfg.model.temporal_patch)
    blob = cc.to_bytes()
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Path(args.output).write_bytes(blob)
    _snapshot(cfg, "compress", {"framemae": manifest["model_hash"]})
    print(f"kept slots {list(cc.kept_slots)}; retained {cc.retained_fraction:.2%}; {len(blob)} bytes")


def cmd_decompress(cfg, args) -> None:
    model, manifest = _load_framemae(cfg, args.checkpoint)
    cc = codec.CompressedClip.from_bytes(_require(Path(args.input), "container").read_bytes())
    clip = codec.decompress(cc, model)
    clipio.write_frames(clipio.denormalize(clip), args.output, fmt=args.format)
    _snapshot(cfg, "decompress", {"framemae": manifest["model_hash"]})
    print(f"wrote {clip.shape[0]} frames to {args.output}")


def cmd_eval(cfg, args) -> None:
    out = _out(cfg) / "eval"
    out.mkdir(exist_ok=True)
    model, manifest = _load_framemae(cfg, args.checkpoint)
    names = [p.strip() for p in (args.policies or ",".join(cfg.codec.policies)).split(",") if p.strip()]
    policies = {n: _policy(cfg, n, args) for n in names}
    corpus = _clips(cfg, "eval")
    report = codec.compare_policies(corpus, policies, model)
    _write_csv(out / "report.csv", report.summary, ("policy", "clips", "mean_mse", "mean_psnr", "retained_fraction"))
    _write_csv(out / "clips.csv", report.rows, ("policy", "clip_id", "kept_slots", "mse", "psnr", "retained_fraction"))
    (out / "report.json").write_text(report.to_json())
    plotting.policy_bars(report.summary, out / "policy_mse.png")
    consumed = {"framemae": manifest["model_hash"]}
    if "learned" in names:
        consumed["selector"] = _load_selector(cfg, getattr(args, "selector", None))[1]["model_hash"]
    _snapshot(cfg, "eval", consumed)
    for row in report.summary:
        print(f"{row['policy']:>8}  mean MSE {row['mean_mse']:.6f}  PSNR {row['mean_psnr']}")


def cmd_visualize(cfg, args) -> None:
    model, manifest = _load_framemae(cfg, args.checkpoint)
    policy = _policy(cfg, args.policy, args)
    corpus = _clips(cfg, "eval")[: args.clips]
    examples = []
    for clip in corpus:
        cc = codec.compress(clip, policy, manifest["model_hash"], args.policy, temporal_patch=cfg.model.temporal_patch)
        recon = codec.decompress(cc, model)
        examples.append((clip.clip_id, clip.pixels, recon.pixels, cc.kept_slots))
    path, (rows, cols) = plotting.reconstruction_grid(examples, Path(cfg.out_dir) / args.output, cfg.model.temporal_patch)
    _snapshot(cfg, "visualize", {"framemae": manifest["model_hash"]})
    print(f"wrote {path} ({rows} rows x {cols} frames)")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "gen-labels": cmd_gen_labels,
    "train-selector": cmd_train_selector,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = ArgParser(prog="framers", description=__doc__.splitlines()[0])
    common = ArgParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", default="toy", choices=sorted(cfgmod.PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--checkpoint", help="FrameMAE checkpoint dir (default OUT/framemae)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    sub.add_parser("pretrain", parents=[common], help="pretrain FrameMAE")
    sub.add_parser("gen-labels", parents=[common], help="label clips with the exhaustive oracle")
    p = sub.add_parser("train-selector", parents=[common], help="train the key-frame selector")
    p.add_argument("--ablation", action="store_true", help="also run the blocks x dropout sweep")

    for name in ("compress", "visualize"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--policy", default="learned" if name == "compress" else "oracle",
                       choices=["uniform", "random", "oracle", "learned"])
        p.add_argument("--selector", help="selector checkpoint dir (default OUT/selector)")
    comp = sub.choices["compress"]
    comp.add_argument("--input", required=True, help="clip directory (numbered images or raw blob)")
    comp.add_argument("--output", required=True, help="container file to write")
    comp.add_argument("--clip-id")
    vis = sub.choices["visualize"]
    vis.add_argument("--clips", type=int, default=2)
    vis.add_argument("--output", default="reconstructions.png")

    p = sub.add_parser("decompress", parents=[common])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--format", default="png", choices=["png", "raw"])

    p = sub.add_parser("eval", parents=[common], help="compare key-frame policies")
    p.add_argument("--policies", help="comma-separated subset of uniform,random,oracle,learned")
    p.add_argument("--selector")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.preset, {"seed": args.seed, "out_dir": args.out_dir})
    except (cfgmod.ConfigError, FileNotFoundError) as exc:
        print(f"framers: config error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"framers {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
