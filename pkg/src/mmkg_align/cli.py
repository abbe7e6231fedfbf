"""Command line interface.

Subcommands: train, eval, synth, gradcheck, print-config. Exit codes:
0 success, 2 configuration or usage errors, 3 data/checkpoint errors,
4 numeric failures (non-finite loss or a failed gradient audit).

MMKG_ALIGN_THREADS (default 1) pins the BLAS thread pools before numpy
loads so repeated runs reduce in the same order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _pin_threads() -> None:
    want = os.environ.get("MMKG_ALIGN_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, want)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmkg-align",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="fit a model on a dataset directory")
    train_p.add_argument("--data", required=True, help="dataset directory")
    train_p.add_argument("--out", required=True, help="output directory")
    train_p.add_argument("--config", help="JSON config file")
    train_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config field (repeatable)")
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="score a saved checkpoint")
    eval_p.add_argument("--data", required=True)
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--out", help="also write the report to this file")
    eval_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    eval_p.set_defaults(func=cmd_eval)

    synth_p = sub.add_parser("synth", help="generate a paired synthetic dataset")
    synth_p.add_argument("--out", required=True)
    synth_p.add_argument("--entities", type=int, default=200)
    synth_p.add_argument("--relations", type=int, default=10)
    synth_p.add_argument("--attributes", type=int, default=20)
    synth_p.add_argument("--edge-factor", type=float, default=5.0)
    synth_p.add_argument("--attr-factor", type=float, default=3.0)
    synth_p.add_argument("--p-drop", type=float, default=0.0)
    synth_p.add_argument("--noise", type=float, default=0.0)
    synth_p.add_argument("--latent-dim", type=int, default=16)
    synth_p.add_argument("--img-dim", type=int, default=16)
    synth_p.add_argument("--img-coverage", type=float, default=1.0)
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.set_defaults(func=cmd_synth)

    grad_p = sub.add_parser("gradcheck",
                            help="finite-difference audit of every block")
    grad_p.add_argument("--tol", type=float, default=None,
                        help="override the per-block tolerances")
    grad_p.add_argument("--seed", type=int, default=0)
    grad_p.add_argument("--modalities", default=None,
                        help="comma-separated subset for the encoder blocks")
    grad_p.add_argument("--corrupt", action="store_true",
                        help="inject a backward fault to prove the audit bites")
    grad_p.set_defaults(func=cmd_gradcheck)

    print_p = sub.add_parser("print-config", help="show the effective config")
    print_p.add_argument("--config", help="JSON config file")
    print_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    print_p.set_defaults(func=cmd_print_config)
    return parser


def _load_config(args):
    from mmkg_align.config import (ConfigError, RunConfig, apply_overrides,
                                   config_from_dict)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = config_from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{args.config}: not valid JSON: {exc}") from None
    else:
        cfg = RunConfig()
    return apply_overrides(cfg, args.set or [])


def _test_candidates(pair, bundle, cfg):
    import numpy as np
    if cfg.candidates == "all":
        return np.arange(bundle.n1), np.arange(bundle.n2)
    return np.unique(pair.test_pairs[:, 0]), np.unique(pair.test_pairs[:, 1])


def _final_report(params, bundle, pair, cfg) -> dict:
    from mmkg_align import evaluate, train as tr
    modal, joint = tr.encode_all(params, bundle)
    cand_l, cand_r = _test_candidates(pair, bundle, cfg)
    report = evaluate.evaluation_report(joint, bundle.n1, pair.test_pairs,
                                        cand_l, cand_r, cfg.direction)
    report["similarity_profile"] = evaluate.similarity_profile(
        dict(modal, joint=joint), bundle.n1, pair.test_pairs, cand_r)
    return report


def cmd_train(args) -> int:
    import numpy as np
    from mmkg_align import kgdata, train as tr
    from mmkg_align.kernels import BACKEND

    cfg = _load_config(args)
    pair = kgdata.load_kg_pair(args.data, cfg.train_ratio, cfg.dev_fraction,
                               cfg.seed)
    bundle = kgdata.build_feature_bundle(pair, args.data, cfg.bigram_dim,
                                         cfg.img_dim, cfg.seed)
    os.makedirs(args.out, exist_ok=True)

    if cfg.unsupervised_mode != "off":
        train_pairs = tr.unsupervised_seeds(bundle, cfg.unsupervised_mode,
                                            cfg.max_seeds)
        dev_pairs, cand = None, None
        pool_l = np.setdiff1d(np.arange(bundle.n1), train_pairs[:, 0])
        pool_r = np.setdiff1d(np.arange(bundle.n2), train_pairs[:, 1])
    else:
        train_pairs, dev_pairs = pair.train_pairs, pair.dev_pairs
        if cfg.candidates == "all":
            cand = (np.arange(bundle.n1), np.arange(bundle.n2))
            used_l = np.concatenate([train_pairs[:, 0], dev_pairs[:, 0]])
            used_r = np.concatenate([train_pairs[:, 1], dev_pairs[:, 1]])
            pool_l = np.setdiff1d(np.arange(bundle.n1), used_l)
            pool_r = np.setdiff1d(np.arange(bundle.n2), used_r)
        else:
            cand = (np.concatenate([dev_pairs[:, 0], pair.test_pairs[:, 0]]),
                    np.concatenate([dev_pairs[:, 1], pair.test_pairs[:, 1]]))
            pool_l, pool_r = pair.test_pairs[:, 0], pair.test_pairs[:, 1]

    log_path = os.path.join(args.out, "trainlog.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")

        result = tr.train(bundle, cfg, train_pairs, dev_pairs,
                          eval_candidates=cand,
                          pseudo_pools=(pool_l, pool_r), log_fn=emit)

    ckpt_path = os.path.join(args.out, "model.ckpt")
    tr.save_checkpoint(ckpt_path, result.params, cfg.to_dict(), {
        "best_epoch": result.best_epoch,
        "admitted": int(len(result.admitted)),
        "n_train_seed": int(len(train_pairs)),
    })

    report = _final_report(result.params, bundle, pair, cfg)
    report.update({
        "best_epoch": result.best_epoch,
        "best_dev": result.best_dev,
        "epochs_run": len(result.records),
        "admitted": int(len(result.admitted)),
        "backend": BACKEND,
        "config": cfg.to_dict(),
    })
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({
        "checkpoint": ckpt_path,
        "epochs_run": len(result.records),
        "best_epoch": result.best_epoch,
        "metrics": report["metrics"],
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from mmkg_align import kgdata, train as tr
    from mmkg_align.config import apply_overrides, config_from_dict
    from mmkg_align.train import CheckpointError

    params, cfg_dict, extra = tr.load_checkpoint(args.checkpoint)
    cfg = apply_overrides(config_from_dict(cfg_dict), args.set or [])
    pair = kgdata.load_kg_pair(args.data, cfg.train_ratio, cfg.dev_fraction,
                               cfg.seed)
    bundle = kgdata.build_feature_bundle(pair, args.data, cfg.bigram_dim,
                                         cfg.img_dim, cfg.seed)
    if params.n_entities != bundle.n_total:
        raise CheckpointError(
            f"checkpoint holds {params.n_entities} entities but the dataset "
            f"has {bundle.n_total}")
    report = _final_report(params, bundle, pair, cfg)
    report["checkpoint_extra"] = extra
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_synth(args) -> int:
    from mmkg_align import kgdata

    spec = kgdata.SynthSpec(
        n_entities=args.entities, n_relations=args.relations,
        n_attributes=args.attributes, edge_factor=args.edge_factor,
        attr_factor=args.attr_factor, p_drop=args.p_drop,
        feature_noise=args.noise, latent_dim=args.latent_dim,
        img_dim=args.img_dim, img_coverage=args.img_coverage)
    kgdata.generate_synthetic(spec, args.seed, args.out)
    print(json.dumps({"out": args.out, "entities": args.entities,
                      "seed": args.seed}, sort_keys=True))
    return 0


def _gradcheck_cases(seed: int, modalities=None):
    """Micro instances covering every differentiable block; objectives
    contract non-scalar outputs with a fixed random probe so no checked
    coordinate has an exactly-zero gradient."""
    import numpy as np
    from mmkg_align import encoders, losses, tensor as T
    from mmkg_align.kgdata import FeatureBundle
    from mmkg_align.tensor import Tensor

    if modalities is None:
        modalities = encoders.MODALITIES
    rng = np.random.default_rng(seed)

    def probe_for(shape):
        return Tensor(rng.normal(size=shape))

    cases = []

    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    probe = probe_for((3, 5))

    def ops(ps):
        prod = T.matmul(ps[0], ps[1])
        z = T.row_softmax(prod, 0.7) + T.relu(prod) * 0.3 + T.l2_normalize_rows(prod)
        return (z * probe).sum()

    cases.append(("core_ops", 1e-5, ops, [a, b]))

    n, d = 4, 3
    dst = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    src = np.array([0, 1, 1, 2, 2, 3, 3, 0])
    h = Tensor(rng.normal(size=(n, d)), requires_grad=True)
    head = encoders.GatHead(
        w_diag=Tensor(rng.normal(size=d) + 1.0, requires_grad=True),
        attn=Tensor(rng.normal(size=2 * d), requires_grad=True))
    gat_probe = probe_for((n, d))

    def gat(ps):
        out = encoders.gat_head(ps[0], dst, src, encoders.GatHead(ps[1], ps[2]))
        return (out * gat_probe).sum()

    cases.append(("gat_head", 1e-5, gat, [h, head.w_diag, head.attn]))

    n1 = n2 = 3
    total = n1 + n2
    loops = np.arange(total)
    extra_dst = np.array([0, 1, 3, 4])
    extra_src = np.array([1, 0, 4, 3])
    order = np.lexsort((np.concatenate([loops, extra_src]),
                        np.concatenate([loops, extra_dst])))
    bundle = FeatureBundle(
        n1=n1, n2=n2,
        u_rel=rng.normal(size=(total, 4)),
        u_attr=rng.normal(size=(total, 3)),
        u_name=rng.normal(size=(total, 5)),
        image_rows=rng.normal(size=(total, 4)),
        image_mask=np.ones(total, dtype=bool),
        edges_dst=np.concatenate([loops, extra_dst])[order],
        edges_src=np.concatenate([loops, extra_src])[order],
    )
    params = encoders.init_params(bundle, modalities, 3, 3, 2, rng)

    if "structure" in modalities:
        struct_probe = probe_for((total, 6))

        def structure(ps):
            return (encoders.structure_encode(params, bundle) * struct_probe).sum()

        cases.append(("structure_encoder", 1e-4, structure,
                      [t for name, t in params.named_tensors()
                       if name.startswith(("gat.", "entity"))]))

    joint_probe = probe_for((total, encoders.forward_all(params, bundle).joint.shape[1]))

    def fused(ps):
        out = encoders.forward_all(params, bundle)
        return (out.joint * joint_probe).sum()

    cases.append(("affine_and_fusion", 1e-5, fused,
                  [t for name, t in params.named_tensors()
                   if name.startswith("affine.") or name == "fusion_logits"]))

    cl, cr = Tensor(rng.normal(size=(4, 5)), requires_grad=True), \
        Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    cases.append(("contrastive_loss", 1e-5,
                  lambda ps: losses.contrastive_loss(ps[0], ps[1], 0.5),
                  [cl, cr]))

    tl, tr_ = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5)))
    dl, dr = Tensor(rng.normal(size=(4, 5)), requires_grad=True), \
        Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    cases.append(("distill_loss", 1e-5,
                  lambda ps: losses.distill_loss(tl, tr_, ps[0], ps[1], 2.0),
                  [dl, dr]))

    batch_l = np.array([0, 1, 2])
    batch_r = np.array([0, 2, 1])

    def combined(ps):
        out = encoders.forward_all(params, bundle)
        ml = {m: T.gather_rows(out.modal[m], batch_l) for m in params.modalities}
        mr = {m: T.gather_rows(out.modal[m], batch_r + n1) for m in params.modalities}
        full = losses.combined_loss(
            ml, mr, T.gather_rows(out.joint, batch_l),
            T.gather_rows(out.joint, batch_r + n1), params.modalities,
            params.uncert_contrastive, params.uncert_distill, 0.5, 2.0)
        return full.total

    # the combined objective sits near 14, putting the central-difference
    # noise floor around 1.4e-10; gradients under ~3e-6 cannot be certified
    # to 1e-4 relative and are skipped as jointly zero
    cases.append(("combined_objective", 1e-4, combined, params.trainable(), 3e-6))
    return cases


def cmd_gradcheck(args) -> int:
    from mmkg_align import tensor as T

    modalities = None
    if args.modalities:
        from mmkg_align.config import ConfigError
        from mmkg_align.encoders import MODALITIES

        modalities = tuple(args.modalities.split(","))
        bad = [m for m in modalities if m not in MODALITIES]
        if bad:
            raise ConfigError(f"unknown modalities: {bad}")
    if args.corrupt:
        T.set_backward_fault("matmul")
        print("fault injection active: matmul gradients scaled by 1.001")
    try:
        failures = 0
        for name, tol, fn, ps, *rest in _gradcheck_cases(args.seed, modalities):
            tol = args.tol if args.tol is not None else tol
            err = T.grad_check(fn, ps, atol=rest[0] if rest else 1e-7)
            ok = err < tol
            failures += 0 if ok else 1
            print(f"gradcheck {name}: max_rel_err={err:.3e} tol={tol:.1e} "
                  f"{'PASS' if ok else 'FAIL'}")
        if failures:
            print(f"{failures} block(s) failed the gradient audit")
            return 4
        return 0
    finally:
        if args.corrupt:
            T.set_backward_fault(None)


def cmd_print_config(args) -> int:
    cfg = _load_config(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


def run(argv=None) -> int:
    _pin_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    from mmkg_align.config import ConfigError
    from mmkg_align.kgdata import DataError
    from mmkg_align.tensor import NumericError
    from mmkg_align.train import BootstrapError, CheckpointError, TrainingError
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, BootstrapError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, TrainingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(run())
