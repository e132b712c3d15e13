"""Command line: gen, train, eval, reconstruct, ablate, repro."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ABLATIONS, ConfigError, RunConfig, load_config, preset


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else preset(args.preset)
    changes = {}
    if getattr(args, "ablation", None):
        changes["ablation"] = args.ablation
    if getattr(args, "seed", None) is not None:
        changes["optim.seed"] = args.seed
    if getattr(args, "mc_res", None):
        changes["metrics.mc_res"] = args.mc_res
    if getattr(args, "boxes", None):
        changes["boxes"] = args.boxes
    if getattr(args, "jobs", None):
        changes["jobs"] = args.jobs
    if getattr(args, "data", None):
        changes["dataset_root"] = args.data
    if getattr(args, "out", None):
        changes["output_root"] = args.out
    return cfg.replace(**changes).validate() if changes else cfg.validate()


def _persist(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def cmd_gen(args):
    from .dataset import generate_corpus
    from .pipeline import corpus_spec
    cfg = _config(args)
    root = Path(args.out or cfg.dataset_root)
    corpus = generate_corpus(root, cfg.data.n_scenes, seed=args.seed or 0, spec=corpus_spec(cfg), jobs=cfg.jobs)
    print(f"wrote {len(corpus)} scenes to {root} (checksum {corpus.checksum[:16]})")


def cmd_train(args):
    from .dataset import read_dataset
    from .train import train, train_background
    cfg = _config(args)
    out = _persist(cfg, cfg.output_root)
    corpus = read_dataset(cfg.dataset_root)
    fn = train_background if args.kind == "background" else train
    res = fn(cfg, corpus, out, init=args.init)
    print(f"final loss {res.epoch_losses[-1]:.6f}; checkpoints: {', '.join(res.checkpoints)}")


def cmd_eval(args):
    from .dataset import read_dataset
    from .pipeline import evaluate, evaluate_background, format_table, write_report
    from .train import load_checkpoint, read_checkpoint_header
    cfg = _config(args)
    out = _persist(cfg, cfg.output_root)
    corpus = read_dataset(cfg.dataset_root)
    if not args.checkpoint:
        raise SystemExit("eval needs --checkpoint")
    kind = read_checkpoint_header(args.checkpoint)["kind"]
    if args.ablation is None and kind != "background":
        # evaluate the checkpoint's own lattice row unless one is requested
        cfg = cfg.replace(ablation=read_checkpoint_header(args.checkpoint)["ablation"])
    model, _ = load_checkpoint(args.checkpoint, cfg)
    if kind == "background":
        rep = evaluate_background(corpus, model, cfg, log=print)
        write_report(rep, out, "background_metrics")
        print(json.dumps(rep["background_summary"], indent=1))
    else:
        rep = evaluate(corpus, model, cfg, jobs=cfg.jobs)
        write_report(rep, out)
        print(format_table(rep), end="")


def cmd_reconstruct(args):
    from .dataset import read_dataset
    from .pipeline import load_models, reconstruct
    cfg = _config(args)
    corpus = read_dataset(cfg.dataset_root)
    model, bg = load_models(args.checkpoint)
    rec = corpus[args.scene]
    recon = reconstruct(rec, cfg, model, bg, provenance={"checkpoints": args.checkpoint or [],
                                                         "scene_seed": rec.seed, "dataset": corpus.provenance})
    out = Path(cfg.output_root) / f"scene_{args.scene:05d}"
    _persist(cfg, out)
    manifest = recon.export(out)
    print(f"wrote {len(manifest['parts'])} parts to {out}")


def cmd_ablate(args):
    from .dataset import read_dataset
    from .pipeline import ablate, format_ablation
    cfg = _config(args)
    out = _persist(cfg, cfg.output_root)
    seeds = args.seeds or [cfg.optim.seed]
    table = ablate(read_dataset(cfg.dataset_root), cfg, seeds, out)
    print(format_ablation(table), end="")


def cmd_repro(args):
    from .pipeline import repro
    cfg = _config(args)
    report = repro(cfg, args.seed if args.seed is not None else 0, Path(cfg.output_root))
    print(json.dumps(report["summary"], indent=1, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instpifu", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, ablation=True):
        sp.add_argument("--config", type=str, help="run configuration (JSON)")
        sp.add_argument("--preset", default="desk", choices=["desk", "paper", "smoke"],
                        help="named configuration used when --config is absent")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--out", type=str, help="output directory")
        sp.add_argument("--data", type=str, help="corpus root (overrides dataset_root)")
        sp.add_argument("--mc-res", dest="mc_res", type=int, help="marching-cubes resolution (desk 64, paper 256)")
        sp.add_argument("--boxes", type=str, help="gt | perturbed | file:PATH")
        if ablation:
            sp.add_argument("--ablation", choices=ABLATIONS)

    sp = sub.add_parser("gen", help="generate a synthetic corpus")
    common(sp, ablation=False)
    sp.set_defaults(fn=cmd_gen)
    sp = sub.add_parser("train", help="train the instance or background network")
    common(sp)
    sp.add_argument("--kind", choices=["instance", "background"], default="instance")
    sp.add_argument("--init", type=str, help="start from this checkpoint (fine-tuning)")
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(sp)
    sp.add_argument("--checkpoint", type=str)
    sp.set_defaults(fn=cmd_eval)
    sp = sub.add_parser("reconstruct", help="compose background and objects for one scene")
    common(sp)
    sp.add_argument("--checkpoint", action="append", help="instance and/or background checkpoint")
    sp.add_argument("--scene", type=int, default=0, help="scene index in the corpus")
    sp.set_defaults(fn=cmd_reconstruct)
    sp = sub.add_parser("ablate", help="train and evaluate the five ablation rows")
    common(sp, ablation=False)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.set_defaults(fn=cmd_ablate)
    sp = sub.add_parser("repro", help="generate, train, evaluate and ablate in one go")
    common(sp, ablation=False)
    sp.set_defaults(fn=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
