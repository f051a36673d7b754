"""Command-line entry point.

Subcommands cover the whole workflow:

    gen        synthesize a multi-domain CSI dataset (JSONL)
    prepare    condition packets and build a fingerprint store
    train      fit the multi-source model against an unlabeled target
    eval       score a checkpoint (and optionally the KNN baseline)
    selfcheck  run gradient / MMD / filter verification

Every command takes `--config PATH` plus repeatable `--set section.key=
value` overrides and `--seed N` (which retargets all seeded stages).
Exit codes: 0 success, 1 validation/config error, 2 numerical failure.

Only the standard library is imported at module scope: MUDALOC_THREADS
must cap the BLAS thread pools before numpy first loads, so the heavy
imports happen inside main() after the environment is set.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _cap_threads() -> None:
    cap = os.environ.get("MUDALOC_THREADS")
    if not cap:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


def _add_common(sub) -> None:
    sub.add_argument("--config", default=None, help="YAML experiment config")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE", help="override one config key")
    sub.add_argument("--seed", type=int, default=None,
                     help="root seed for scene, training, and split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mudaloc",
        description="CSI-fingerprint localization with multi-source "
                    "unsupervised domain adaptation",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen", help="synthesize a multi-domain CSI dataset")
    _add_common(p)
    p.add_argument("--out", default=None, help="output JSONL path")

    p = subs.add_parser("prepare", help="condition packets into a fingerprint store")
    _add_common(p)
    p.add_argument("--in", dest="in_path", required=True, help="input JSONL")
    p.add_argument("--out", default=None, help="output store directory")
    p.add_argument("--target-domain", default="target",
                   help="domain treated as unlabeled target")

    p = subs.add_parser("train", help="train the adaptation model")
    _add_common(p)
    p.add_argument("--store", action="append", required=True,
                   help="fingerprint store directory (repeatable)")
    p.add_argument("--out", default=None, help="output directory")

    p = subs.add_parser("eval", help="evaluate a checkpoint on the target test split")
    _add_common(p)
    p.add_argument("--store", action="append", required=True,
                   help="fingerprint store directory (repeatable)")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--knn", action="store_true",
                   help="also score the KNN baseline on pooled source fingerprints")
    p.add_argument("--out", default=None, help="output directory")

    p = subs.add_parser("selfcheck", help="run numerical self-checks")
    p.add_argument("--mutate", default=None, metavar="CASE",
                   help="corrupt one named gradient case to prove detection")

    return parser


def _load_config(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.from_file(args.config)
    if args.overrides:
        cfg = cfg.with_overrides(args.overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_path(args, cfg, default_leaf: str) -> str:
    if args.out is not None:
        return args.out
    return os.path.join(cfg.section("io")["out_dir"], default_leaf)


def _split_domains(datasets):
    from .data import ROLE_TARGET
    from .errors import ValidationError

    sources = [d for d in datasets if d.role != ROLE_TARGET]
    targets = [d for d in datasets if d.role == ROLE_TARGET]
    if not sources or len(targets) != 1:
        raise ValidationError(
            f"need >= 1 source domain and exactly 1 target domain, got "
            f"{len(sources)} sources / {len(targets)} targets"
        )
    return sources, targets[0]


def _load_stores(paths):
    from .fingerprints import load_store

    datasets = []
    for p in paths:
        datasets.extend(load_store(p))
    return datasets


def _train_test(cfg, datasets):
    from .data import SplitSpec, split_by_rp

    ev = cfg.section("eval")
    spec = SplitSpec(test_rp_ratio=ev["split_ratio"], seed=ev["split_seed"])
    return split_by_rp(datasets, spec)


def cmd_gen(args) -> int:
    from .data import save_recordings
    from .synth import generate

    cfg = _load_config(args)
    scene = cfg.scene()
    out = _out_path(args, cfg, "dataset.jsonl")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    recordings = []
    for d in range(scene.n_domains):
        recordings.extend(generate(scene, d))
    save_recordings(recordings, out)
    print(f"wrote {out}")
    for effect in scene.domain_effects:
        n = sum(1 for r in recordings if r.domain_id == effect.name)
        print(f"  domain {effect.name}: {n} RPs x {scene.n_packets} packets")
    return 0


def cmd_prepare(args) -> int:
    from .data import ROLE_TARGET, load_recordings
    from .fingerprints import save_store
    from .pipeline import prepare_recordings

    cfg = _load_config(args)
    out = _out_path(args, cfg, "store")
    recordings = load_recordings(args.in_path)
    datasets = prepare_recordings(
        recordings, cfg.pipeline(), roles={args.target_domain: ROLE_TARGET}
    )
    save_store(out, datasets)
    print(f"wrote store {out}")
    for ds in datasets:
        k = len(ds) // len(ds.rp_ids)
        print(f"  domain {ds.domain_id} ({ds.role}): {len(ds)} fingerprints, "
              f"{k} windows per RP")
    return 0


def cmd_train(args) -> int:
    import json

    from .network import save_model
    from .training import build_model, train

    cfg = _load_config(args)
    out = _out_path(args, cfg, "train")
    os.makedirs(out, exist_ok=True)
    sources, target = _split_domains(_load_stores(args.store))
    splits = _train_test(cfg, sources + [target])
    source_train = [tr for tr, _ in splits[:-1]]
    target_train = splits[-1][0]

    train_cfg = cfg.train()
    model = build_model(cfg.net(), len(source_train), train_cfg.seed)
    report = train(model, source_train, target_train, train_cfg)

    ckpt = os.path.join(out, "model.ckpt")
    save_model(ckpt, model)
    report_path = os.path.join(out, "train_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.section("io")["plots"]:
        from .plots import plot_losses

        plot_losses(report, os.path.join(out, "losses.png"))
    print(f"wrote {ckpt} and {report_path}")
    print(f"trained {report.stopped_epoch} epochs "
          f"(best {report.best_epoch}, L_total {min(report.l_total):.6f}, "
          f"{report.wall_time_s:.1f} s)")
    return 0


def cmd_eval(args) -> int:
    import json

    from .evaluate import evaluate_knn, evaluate_model, write_report
    from .network import load_model

    cfg = _load_config(args)
    out = _out_path(args, cfg, "eval")
    os.makedirs(out, exist_ok=True)
    model = load_model(args.model)
    sources, target = _split_domains(_load_stores(args.store))
    splits = _train_test(cfg, sources + [target])
    target_test = splits[-1][1]

    report = evaluate_model(model, target_test)
    write_report(report, os.path.join(out, "eval_report.json"),
                 os.path.join(out, "cdf_model.csv"))
    reports = {"model": report}
    print(f"model: MED {report.med:.3f} m, sigma1 {report.sigma1:.3f} m, "
          f"sigma2 {report.sigma2:.3f} m on {len(target_test)} target samples")

    if args.knn:
        ev = cfg.section("eval")
        db = [s for tr, _ in splits[:-1] for s in tr.samples]
        knn_report = evaluate_knn(target_test, db, ev["knn_k"], ev["knn_feature"])
        write_report(knn_report, os.path.join(out, "knn_report.json"),
                     os.path.join(out, "cdf_knn.csv"))
        side = {"model": report.to_dict(), "knn": knn_report.to_dict()}
        with open(os.path.join(out, "comparison.json"), "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")
        reports["knn"] = knn_report
        print(f"knn (k={ev['knn_k']}): MED {knn_report.med:.3f} m")

    if cfg.section("io")["plots"]:
        import numpy as np

        from .plots import plot_cdf, plot_scatter

        plot_cdf(reports, os.path.join(out, "cdf.png"))
        amp = np.stack([s.image_amp for s in target_test.samples])
        phase = np.stack([s.image_phase for s in target_test.samples])
        preds = model.predict(amp, phase)
        truths = [s.pos for s in target_test.samples]
        plot_scatter(preds, truths, os.path.join(out, "scatter.png"))
    print(f"wrote reports to {out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    ok = run_all(mutate=args.mutate)
    return 0 if ok else 1


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    from .errors import NumericalError, ValidationError

    handlers = {
        "gen": cmd_gen,
        "prepare": cmd_prepare,
        "train": cmd_train,
        "eval": cmd_eval,
        "selfcheck": cmd_selfcheck,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
