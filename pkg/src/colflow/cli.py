"""Operator entry points.

    colflow dataset-gen  --config c.json [--set k=v ...] [--out DIR]
    colflow tok-train    ...
    colflow gen-train    ...
    colflow sample       --checkpoint DIR ...
    colflow analyze {zero-shot|transfer|flops|stationarity|dist} ...
    colflow serve        --checkpoint DIR ...

Every command resolves its config (defaults <- file <- --set overrides),
echoes the fully resolved document into the run directory for provenance,
and writes its artifacts (checkpoints, CSV logs, JSON reports, PNG figures)
there. Exit codes: 0 success, 2 config schema violation (the failing JSON
pointer is printed), 3 missing checkpoint/artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from colflow import analysis as ana
from colflow import figures
from colflow.config import ConfigError, config_hash, parse_mask, resolve
from colflow.dataio import (
    SyntheticSpec,
    augment_images,
    build_corpus,
    load_checkpoint,
    load_tokenizer_checkpoint,
    save_checkpoint,
    save_tokenizer_checkpoint,
    write_etb,
)
from colflow.generator import FlowHeadConfig, Generator, GeneratorConfig
from colflow.numerics import Tensor
from colflow.sampler import SamplerConfig, extrapolate_long, generate_sequence
from colflow.tokenizer import ConvTokenizer, LinearTokenizer, LinearTokenizerConfig, TokenizerConfig
from colflow.training import LossLog, TokTrainConfig, TrainConfig, train_generator, train_tokenizer

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_MISSING = 3


class MissingArtifact(FileNotFoundError):
    pass


def _fail(code: int, payload: dict) -> int:
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _run_dir(cfg: dict, out: str | None, command: str) -> str:
    if out:
        path = out
    else:
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        path = f"run-{stamp}-{config_hash(cfg)}-{command}"
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return path


def _spec_from(cfg: dict) -> SyntheticSpec:
    d = cfg["data"]
    return SyntheticSpec(kind=d["kind"], image_h=d["image_h"], image_w=d["image_w"],
                         n_classes=d["n_classes"], seed=d["seed"])


def _build_tokenizer(cfg: dict):
    t = cfg["tokenizer"]
    d = cfg["data"]
    if t["kind"] == "linear":
        return LinearTokenizer(LinearTokenizerConfig(
            image_h=d["image_h"], image_w=d["image_w"], n_tokens=t["n_tokens"],
            token_channels=t["token_channels"], seed=t["seed"], exact=t["exact"]))
    if t["checkpoint"]:
        if not os.path.isdir(t["checkpoint"]):
            raise MissingArtifact(t["checkpoint"])
        tok, _ = load_tokenizer_checkpoint(t["checkpoint"])
        return tok
    return ConvTokenizer(TokenizerConfig(
        image_h=d["image_h"], image_w=d["image_w"], downsample_f=t["downsample_f"],
        token_channels=t["token_channels"], latent_channels=t["latent_channels"],
        base_channels=t["base_channels"], lambda_rec=t["lambda_rec"],
        lambda_reg=t["lambda_reg"], seed=t["seed"]))


def _encode(tokenizer, images: np.ndarray) -> np.ndarray:
    if isinstance(tokenizer, LinearTokenizer):
        return tokenizer.encode(images).astype(np.float32)
    return tokenizer.encode_tokens(Tensor(images)).data


def _generator_config(cfg: dict, n_tokens: int) -> GeneratorConfig:
    g = dict(cfg["generator"])
    g["flow_head"] = FlowHeadConfig(**g["flow_head"])
    g["token_channels"] = cfg["tokenizer"]["token_channels"]
    g["n_classes"] = cfg["data"]["n_classes"]
    g.setdefault("max_seq_len", n_tokens + 1)
    return GeneratorConfig(**g)


def _load_generator(path: str, ema: bool = False):
    if not os.path.isdir(path):
        base = os.environ.get("COLFLOW_CHECKPOINT_DIR")
        if base and os.path.isdir(os.path.join(base, path)):
            path = os.path.join(base, path)
        else:
            raise MissingArtifact(path)
    return load_checkpoint(path, ema=ema)


def _decode_images(tokenizer, tokens: np.ndarray) -> np.ndarray:
    if isinstance(tokenizer, LinearTokenizer):
        return tokenizer.decode(tokens)
    return tokenizer.decode_tokens(Tensor(tokens)).data


# -- commands ----------------------------------------------------------------


def cmd_dataset_gen(cfg: dict, out: str | None) -> int:
    run = _run_dir(cfg, out, "dataset")
    spec = _spec_from(cfg)
    images, labels = build_corpus(spec, cfg["data"]["train_size"])
    write_etb(os.path.join(run, "images.etb"), images)
    write_etb(os.path.join(run, "labels.etb"), labels.astype(np.float32))
    figures.fig_image_grid(images[:16], os.path.join(run, "corpus_preview.png"))
    with open(os.path.join(run, "spec.json"), "w") as fh:
        json.dump(dataclasses.asdict(spec), fh, indent=2, sort_keys=True)
    print(f"dataset: {len(images)} images -> {run}")
    return EXIT_OK


def cmd_tok_train(cfg: dict, out: str | None) -> int:
    run = _run_dir(cfg, out, "tok")
    spec = _spec_from(cfg)
    images, _ = build_corpus(spec, cfg["data"]["train_size"])
    t = cfg["tokenizer"]
    tok = ConvTokenizer(TokenizerConfig(
        image_h=spec.image_h, image_w=spec.image_w, downsample_f=t["downsample_f"],
        token_channels=t["token_channels"], latent_channels=t["latent_channels"],
        base_channels=t["base_channels"], lambda_rec=t["lambda_rec"],
        lambda_reg=t["lambda_reg"], seed=t["seed"]))
    history = train_tokenizer(tok, images, TokTrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=t["seed"]))
    ckpt = os.path.join(run, "tokenizer")
    save_tokenizer_checkpoint(ckpt, tok, provenance={
        "final_rec_mse": history["rec"][-1],
        "recon_threshold": 1.5 * history["rec"][-1],
        "epochs": t["epochs"],
        "seed": t["seed"],
    })
    with open(os.path.join(run, "history.json"), "w") as fh:
        json.dump(history, fh, indent=2)
    print(f"tokenizer: rec {history['rec'][0]:.4f} -> {history['rec'][-1]:.4f}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_gen_train(cfg: dict, out: str | None) -> int:
    run = _run_dir(cfg, out, "gen")
    spec = _spec_from(cfg)
    d = cfg["data"]
    images, labels = build_corpus(spec, d["train_size"])
    tokenizer = _build_tokenizer(cfg)
    base_tokens = _encode(tokenizer, images)
    n_tokens = base_tokens.shape[1]
    model = Generator(_generator_config(cfg, n_tokens))
    tr = cfg["train"]
    mask = parse_mask(tr["task_mask"], n_tokens)
    tcfg = TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"],
                       base_lr=tr["base_lr"], warmup_epochs=tr["warmup_epochs"],
                       weight_decay=tr["weight_decay"], grad_clip=tr["grad_clip"],
                       seed=tr["seed"], task_mask=mask, ema_decay=tr["ema_decay"])

    encode_epoch = None
    if d["augment"]:
        def encode_epoch(rng):
            return _encode(tokenizer, augment_images(images, spec.kind, rng)), labels

    log, ema = train_generator(model, base_tokens, labels, tcfg, encode_epoch=encode_epoch)
    log.to_csv(os.path.join(run, "loss_log.csv"))
    ckpt = os.path.join(run, "checkpoint")
    save_checkpoint(ckpt, model, tokenizer, ema_arrays=ema.shadow_arrays(),
                    cfg_end=cfg["sampler"]["cfg_end"], provenance={
                        "seed": tr["seed"],
                        "epochs": tr["epochs"],
                        "task_mask": mask,
                        "variant": model.cfg.variant,
                        "train_len": n_tokens,
                        "data_kind": spec.kind,
                        "data_seed": spec.seed,
                        "steps": log.step_count,
                    })
    final = log.per_position(tr["epochs"] - 1)
    figures.fig_loss_profile({"final epoch": final}, os.path.join(run, "loss_profile.png"))
    print(f"gen-train [{model.cfg.variant}] mask={mask}: mean final loss "
          f"{final.mean():.4f}, checkpoint {ckpt}")
    return EXIT_OK


def cmd_sample(cfg: dict, out: str | None, checkpoint: str, ema: bool) -> int:
    run = _run_dir(cfg, out, "sample")
    model, tokenizer, manifest = _load_generator(checkpoint, ema=ema)
    s = cfg["sampler"]
    scfg = SamplerConfig(n_steps=s["n_steps"], cfg_start=s["cfg_start"],
                         cfg_end=s["cfg_end"], target_len=s["target_len"],
                         seed=s["seed"], temperature=s["temperature"])
    n = s["n_samples"]
    class_ids = np.arange(n) % model.cfg.n_classes
    tokens, _ = generate_sequence(model, class_ids, scfg)
    imgs = _decode_images(tokenizer, tokens)
    write_etb(os.path.join(run, "samples.etb"), tokens)
    figures.fig_image_grid(imgs, os.path.join(run, "samples.png"))
    print(f"sample: {n} sequences of {s['target_len']} tokens -> {run}")
    return EXIT_OK


def cmd_analyze_zero_shot(cfg: dict, out: str | None, checkpoint: str) -> int:
    run = _run_dir(cfg, out, "zeroshot")
    model, tokenizer, manifest = _load_generator(checkpoint)
    spec = _spec_from(cfg)
    d = cfg["data"]
    images, labels = build_corpus(spec, d["train_size"] + d["eval_size"])
    eval_imgs = images[d["train_size"]:]
    eval_labels = labels[d["train_size"]:]
    tokens = _encode(tokenizer, eval_imgs)
    mask = manifest["provenance"].get("task_mask") or list(range(tokens.shape[1]))
    report = ana.zero_shot_eval(model, tokens, eval_labels, mask,
                                seed=cfg["analysis"]["eval_seed"])
    report.to_json(os.path.join(run, "zero_shot.json"))
    report.to_csv(os.path.join(run, "zero_shot.csv"))
    figures.fig_zero_shot(report, os.path.join(run, "zero_shot.png"))
    print(f"zero-shot [{report.variant}] trained={report.trained_positions} "
          f"ratio r={report.transfer_ratio:.4f} -> {run}")
    return EXIT_OK


def cmd_analyze_transfer(cfg: dict, out: str | None) -> int:
    run = _run_dir(cfg, out, "transfer")
    t = cfg["analysis"]["transfer"]
    if not t["baseline_log"]:
        raise MissingArtifact("analysis.transfer.baseline_log not set")
    if not os.path.exists(t["baseline_log"]):
        raise MissingArtifact(t["baseline_log"])
    baseline = LossLog.from_csv(t["baseline_log"])
    early = baseline.per_position(t["early_epoch"])
    singles = {}
    for pos, path in t["single_logs"].items():
        if not os.path.exists(path):
            raise MissingArtifact(path)
        log = LossLog.from_csv(path)
        singles[int(pos)] = log.per_position(log.epochs()[-1])
    grid, rows = ana.transfer_matrix(singles, early)
    np.savetxt(os.path.join(run, "transfer_grid.csv"), grid, delimiter=",",
               header=",".join(str(p) for p in range(grid.shape[1])), comments="")
    with open(os.path.join(run, "transfer.json"), "w") as fh:
        json.dump({"rows": rows, "grid": grid.tolist(),
                   "early_epoch": t["early_epoch"]}, fh, indent=2)
    figures.fig_transfer_grid(grid, rows, os.path.join(run, "transfer.png"))
    print(f"transfer: {grid.shape[0]} single-task runs x {grid.shape[1]} positions -> {run}")
    return EXIT_OK


def cmd_analyze_flops(cfg: dict, out: str | None) -> int:
    run = _run_dir(cfg, out, "flops")
    g = cfg["generator"]
    report = ana.flop_report(cfg["sampler"]["target_len"], g["window_w"],
                             g["n_layers"], g["hidden_dim"])
    report.to_json(os.path.join(run, "flops.json"))
    report.to_csv(os.path.join(run, "flops.csv"))
    figures.fig_flops(report, os.path.join(run, "flops.png"))
    ratio = report.ratio_vs_full["windowed"]
    print(f"flops: windowed/full pairs {report.pairs['windowed']}/{report.pairs['full']}"
          f" = {ratio:.4f} -> {run}")
    return EXIT_OK


def cmd_analyze_stationarity(cfg: dict, out: str | None, checkpoint: str) -> int:
    run = _run_dir(cfg, out, "stationarity")
    model, tokenizer, manifest = _load_generator(checkpoint)
    a = cfg["analysis"]
    s = cfg["sampler"]
    train_len = manifest["provenance"].get("train_len", cfg["tokenizer"]["n_tokens"])
    scfg = SamplerConfig(n_steps=s["n_steps"], cfg_start=s["cfg_start"],
                         cfg_end=manifest.get("cfg_end", s["cfg_end"]),
                         target_len=a["stationarity_target_len"], seed=s["seed"],
                         temperature=s["temperature"])
    batch = a["stationarity_batch"]
    class_ids = np.arange(batch) % model.cfg.n_classes
    tokens, _ = extrapolate_long(model, class_ids, scfg)
    result = ana.column_stationarity(tokens, train_len, model.cfg.window_w)
    with open(os.path.join(run, "stationarity.json"), "w") as fh:
        json.dump({"max_abs_beyond_train": result["max_abs_beyond_train"],
                   "train_len": train_len,
                   "target_len": scfg.target_len}, fh, indent=2)
    rows = np.stack([result["positions"], result["z_mean"], result["z_std"]], axis=1)
    np.savetxt(os.path.join(run, "stationarity.csv"), rows, delimiter=",",
               header="position,z_mean,z_std", comments="")
    figures.fig_stationarity(result["z_mean"], result["z_std"], train_len,
                             os.path.join(run, "stationarity.png"))
    print(f"stationarity: max |z| beyond train = "
          f"{result['max_abs_beyond_train']:.3f} -> {run}")
    return EXIT_OK


def cmd_analyze_dist(cfg: dict, out: str | None, checkpoint: str) -> int:
    run = _run_dir(cfg, out, "dist")
    model, tokenizer, manifest = _load_generator(checkpoint)
    a = cfg["analysis"]
    s = cfg["sampler"]
    n = a["dist_samples"]
    spec = _spec_from(cfg)
    real, _ = build_corpus(spec, n)
    scfg = SamplerConfig(n_steps=s["n_steps"], cfg_start=s["cfg_start"],
                         cfg_end=manifest.get("cfg_end", s["cfg_end"]),
                         target_len=manifest["provenance"].get("train_len", 16),
                         seed=s["seed"], temperature=s["temperature"])
    class_ids = np.arange(n) % model.cfg.n_classes
    tokens, _ = generate_sequence(model, class_ids, scfg)
    fake = _decode_images(tokenizer, tokens)
    da = ana.DistStats.from_samples(real, dim=a["feature_dim"])
    db = ana.DistStats.from_samples(fake, dim=a["feature_dim"])
    dist = ana.frechet_distance(da, db)
    with open(os.path.join(run, "dist.json"), "w") as fh:
        json.dump({
            "frechet_random_projection": dist,
            "feature_dim": a["feature_dim"],
            "n_samples": n,
            "note": "desk-scale random-projection Frechet distance; "
                    "NOT comparable to Inception-feature gFID numbers",
        }, fh, indent=2)
    figures.fig_image_grid(fake[:16], os.path.join(run, "generated_preview.png"))
    print(f"dist: random-projection Frechet = {dist:.4f} (desk yardstick, "
          f"not gFID-comparable) -> {run}")
    return EXIT_OK


def cmd_serve(cfg: dict, checkpoint: str, ema: bool) -> int:
    import uvicorn

    from colflow.service import GenerationEngine, ServiceSettings, create_app

    model, tokenizer, manifest = _load_generator(checkpoint, ema=ema)
    engine = GenerationEngine(model, tokenizer,
                              train_len=manifest["provenance"].get("train_len", 16),
                              cfg_end=manifest.get("cfg_end", 1.0),
                              n_steps=cfg["sampler"]["n_steps"])
    sv = cfg["service"]
    settings = ServiceSettings(max_sessions=sv["max_sessions"],
                               session_ttl_s=sv["session_ttl_s"],
                               max_len_multiplier=sv["max_len_multiplier"])
    host = os.environ.get("COLFLOW_BIND_HOST", sv["host"])
    port = int(os.environ.get("COLFLOW_BIND_PORT", sv["port"]))
    uvicorn.run(create_app(engine, settings), host=host, port=port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colflow", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="PATH=VALUE", help="dotted-path override")
        p.add_argument("--out", default=None, help="run directory (default: run-<utc>-<hash>)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
            p.add_argument("--ema", action="store_true", help="load EMA weights")

    common(sub.add_parser("dataset-gen", help="write a synthetic corpus"))
    common(sub.add_parser("tok-train", help="train the convolutional tokenizer"))
    common(sub.add_parser("gen-train", help="train a generator variant"))
    common(sub.add_parser("sample", help="generate and decode samples"), checkpoint=True)

    pa = sub.add_parser("analyze", help="equivariance analysis reports")
    pa.add_argument("what", choices=["zero-shot", "transfer", "flops", "stationarity", "dist"])
    common(pa)
    pa.add_argument("--checkpoint", default=None, help="checkpoint directory")

    ps = sub.add_parser("serve", help="run the interactive generation service")
    common(ps, checkpoint=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.config, args.overrides)
    except ConfigError as err:
        return _fail(EXIT_SCHEMA, {"error": str(err), "pointer": err.pointer})
    except (OSError, json.JSONDecodeError) as err:
        return _fail(EXIT_SCHEMA, {"error": f"cannot read config: {err}", "pointer": "/"})

    try:
        if args.command == "dataset-gen":
            return cmd_dataset_gen(cfg, args.out)
        if args.command == "tok-train":
            return cmd_tok_train(cfg, args.out)
        if args.command == "gen-train":
            return cmd_gen_train(cfg, args.out)
        if args.command == "sample":
            return cmd_sample(cfg, args.out, args.checkpoint, args.ema)
        if args.command == "analyze":
            needs_ckpt = args.what in ("zero-shot", "stationarity", "dist")
            if needs_ckpt and not args.checkpoint:
                raise MissingArtifact(f"analyze {args.what} requires --checkpoint")
            if args.what == "zero-shot":
                return cmd_analyze_zero_shot(cfg, args.out, args.checkpoint)
            if args.what == "transfer":
                return cmd_analyze_transfer(cfg, args.out)
            if args.what == "flops":
                return cmd_analyze_flops(cfg, args.out)
            if args.what == "stationarity":
                return cmd_analyze_stationarity(cfg, args.out, args.checkpoint)
            return cmd_analyze_dist(cfg, args.out, args.checkpoint)
        if args.command == "serve":
            return cmd_serve(cfg, args.checkpoint, args.ema)
    except ConfigError as err:
        return _fail(EXIT_SCHEMA, {"error": str(err), "pointer": err.pointer})
    except (MissingArtifact, FileNotFoundError) as err:
        return _fail(EXIT_MISSING, {"error": f"missing artifact: {err}"})
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
