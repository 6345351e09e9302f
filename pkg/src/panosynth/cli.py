"""Command-line pipeline orchestration.

Stages write checkpoints and data products into a work directory; every
command records a plain-text manifest sidecar (prompt, seeds, config hash)
so runs are reproducible.  Exit codes: 0 ok, 2 config error, 3 missing
stage dependency, 4 data error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import autodiff as ad
from .config import ConfigError, PipelineConfig
from .datapipe import (
    DataError,
    build_corpus,
    build_pairs,
    load_corpus_pano,
    load_pairs,
    read_manifest,
    save_pairs,
)
from .embedding import (
    EmbeddingError,
    StoreFormatError,
    content_key,
    knn_condition,
    load_store,
    save_store,
    toy_image_embed,
    toy_text_embed,
    ConditionBundle,
)
from .metrics import mae, rmse
from .raster import LdrImage, expose, load_png, reinhard_tonemap, resample_area, save_png
from .rgbe import RgbeError, load_hdr, save_hdr
from .samplers import (
    GlobalSampler,
    LocalSampler,
    SamplerError,
    generate_panorama,
    train_global_sampler,
    train_local_sampler,
)
from .sphere import patch_spe
from .sritmo import PatchExtent, SrItmoModel, train_sritmo
from .vq import Tokenizer, VqError, train_tokenizer


class MissingDependencyError(RuntimeError):
    pass


CKPT = {
    "tokenizer_global": "tokenizer_global.ckpt",
    "tokenizer_local": "tokenizer_local.ckpt",
    "sampler_global": "sampler_global.ckpt",
    "sampler_local": "sampler_local.ckpt",
    "sritmo": "sritmo.ckpt",
}


def _load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for item in args.set or []:
        try:
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"--set expects section.key=value, got {item!r}") from None
        cfg.set(section, key, value)
    return cfg


def _write_manifest(path, command, cfg, extra=None):
    lines = {
        "command": command,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    }
    lines.update(extra or {})
    with open(path, "w") as fh:
        for k, v in lines.items():
            fh.write(f"{k}={v}\n")


def _ckpt_path(workdir, name, must_exist=False, stage=None):
    path = Path(workdir) / "checkpoints" / CKPT[name]
    if must_exist and not path.exists():
        raise MissingDependencyError(
            f"missing checkpoint {path}; run `panosynth {stage}` first"
        )
    return path


def _corpus_entries(workdir, split=None):
    manifest = Path(workdir) / "corpus" / "manifest.txt"
    if not manifest.exists():
        raise MissingDependencyError(
            f"missing corpus manifest {manifest}; run `panosynth prepare-data` first"
        )
    entries = read_manifest(manifest)
    if split:
        entries = [e for e in entries if e.split == split]
    return entries


def _tonemap(cfg, hdr):
    return reinhard_tonemap(hdr, per_channel=cfg.get("raster", "tonemap") == "per_channel")


def _global_input(cfg, pano):
    v = cfg["vq"]
    return resample_area(_tonemap(cfg, pano), v["global_input_h"], v["global_input_w"])


def _load_tokenizer(cfg, workdir, which):
    path = _ckpt_path(workdir, f"tokenizer_{which}", must_exist=True,
                      stage="train-codebooks")
    tok = Tokenizer(cfg.tokenizer_config(which))
    tok.load_state_dict(ad.load_checkpoint(path))
    return tok


def _load_global_sampler(cfg, workdir):
    path = _ckpt_path(workdir, "sampler_global", must_exist=True, stage="train-global")
    sampler = GlobalSampler(cfg.global_sampler_config())
    sampler.load_state_dict(ad.load_checkpoint(path))
    sampler.trained = True
    return sampler


def _load_local_sampler(cfg, workdir):
    path = _ckpt_path(workdir, "sampler_local", must_exist=True, stage="train-local")
    sampler = LocalSampler(cfg.local_sampler_config())
    sampler.load_state_dict(ad.load_checkpoint(path))
    sampler.trained = True
    return sampler


def _load_sritmo(cfg, workdir):
    path = _ckpt_path(workdir, "sritmo", must_exist=True, stage="train-sritmo")
    model = SrItmoModel(cfg.sritmo_config())
    model.load_state_dict(ad.load_checkpoint(path))
    model.trained = True
    return model


def _store_path(workdir):
    path = Path(workdir) / "store.emb"
    if not path.exists():
        raise MissingDependencyError(
            f"missing embedding store {path}; run `panosynth prepare-data` first"
        )
    return path


def _text_embedding(cfg, text, workdir):
    provider = cfg.get("embedding", "provider")
    dim = cfg.get("embedding", "dim")
    if provider == "toy":
        return toy_text_embed(text, dim)
    if provider.startswith("store:"):
        store = load_store(provider[len("store:"):])
        key = content_key(text.encode("utf-8"))
        if key not in store:
            raise DataError(f"text {text!r} (key {key[:12]}...) not in embedding store")
        return store.get(key)
    raise ConfigError(f"unknown embedding provider {provider!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    d = cfg["data"]
    pano_hw = (cfg.get("pipeline", "pano_h"), cfg.get("pipeline", "pano_w"))
    entries = build_corpus(
        workdir / "corpus",
        n_scenes=d["scenes"],
        pano_hw=pano_hw,
        seed=cfg.seed,
        rotations=d["rotations"],
        train_frac=d["train_frac"],
    )
    rng = np.random.default_rng(cfg.seed + 1)
    store = None
    from .embedding import EmbeddingStore

    store = EmbeddingStore(dim=cfg.get("embedding", "dim"))
    split_pairs = {"train": [], "test": []}
    for entry in entries:
        pano = load_corpus_pano(workdir / "corpus", entry)
        pairs = build_pairs(
            pano,
            d["pairs_per_pano"],
            rng,
            base=d["pair_base"],
            sigma=d["sigma"],
            source_id=f"{entry.scene_id}:{entry.shift}",
            calib_policy=d["calib_policy"],
        )
        split_pairs[entry.split].extend(pairs)
        if entry.split == "train":
            emb = toy_image_embed(_global_input(cfg, pano), cfg.get("embedding", "dim"))
            store.add(f"{entry.scene_id}:{entry.shift}", emb)
    save_pairs(split_pairs["train"], workdir / "pairs_train.bin")
    save_pairs(split_pairs["test"], workdir / "pairs_test.bin")
    save_store(store, workdir / "store.emb")
    _write_manifest(
        workdir / "prepare-data.manifest.txt", "prepare-data", cfg,
        {"scenes": d["scenes"], "train_pairs": len(split_pairs["train"]),
         "test_pairs": len(split_pairs["test"]), "store_entries": len(store)},
    )
    print(f"corpus: {len(entries)} panoramas, {len(split_pairs['train'])} train pairs, "
          f"{len(split_pairs['test'])} test pairs")
    return 0


def cmd_train_codebooks(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    (workdir / "checkpoints").mkdir(parents=True, exist_ok=True)
    entries = _corpus_entries(workdir, "train")
    panos = [load_corpus_pano(workdir / "corpus", e) for e in entries]
    global_inputs = [_global_input(cfg, p) for p in panos]
    gtok = train_tokenizer(global_inputs, cfg.tokenizer_config("global"))
    ad.save_checkpoint(gtok.state_dict(), _ckpt_path(workdir, "tokenizer_global"))

    patch = cfg.get("vq", "local_patch")
    rng = np.random.default_rng(cfg.seed + 2)
    crops = []
    for p in panos:
        ldr = _tonemap(cfg, p)
        for _ in range(4):
            oi = int(rng.integers(0, ldr.height - patch + 1))
            oj = int(rng.integers(0, ldr.width - patch + 1))
            crops.append(LdrImage(ldr.pixels[oi : oi + patch, oj : oj + patch]))
    ltok = train_tokenizer(crops, cfg.tokenizer_config("local"))
    ad.save_checkpoint(ltok.state_dict(), _ckpt_path(workdir, "tokenizer_local"))
    _write_manifest(
        workdir / "train-codebooks.manifest.txt", "train-codebooks", cfg,
        {"global_final_loss": gtok.train_log[-1][1], "local_final_loss": ltok.train_log[-1][1]},
    )
    print(f"trained tokenizers: global loss {gtok.train_log[-1][1]:.4f}, "
          f"local loss {ltok.train_log[-1][1]:.4f}")
    return 0


def cmd_train_global(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    gtok = _load_tokenizer(cfg, workdir, "global")
    store = load_store(_store_path(workdir))
    entries = _corpus_entries(workdir, "train")
    grids, embs = [], []
    for e in entries:
        pano = load_corpus_pano(workdir / "corpus", e)
        img = _global_input(cfg, pano)
        grids.append(gtok.encode(img))
        embs.append(store.get(f"{e.scene_id}:{e.shift}"))
    log = []
    sampler = train_global_sampler(grids, np.stack(embs), store,
                                   cfg.global_sampler_config(), log=log)
    ad.save_checkpoint(sampler.state_dict(), _ckpt_path(workdir, "sampler_global"))
    _write_manifest(
        workdir / "train-global.manifest.txt", "train-global", cfg,
        {"final_nll": log[-1][1], "final_lcon": log[-1][2]},
    )
    print(f"trained global sampler: nll {log[-1][1]:.4f} nats/token")
    return 0


def _local_examples(cfg, workdir, gtok, ltok, entries):
    patch = cfg.get("vq", "local_patch")
    comp = cfg.get("vq", "local_compression")
    grid = patch // comp
    per = cfg.get("sampler", "local_patches_per_pano")
    verbatim = cfg.get("sphere", "eq1_verbatim_axes")
    rng = np.random.default_rng(cfg.seed + 3)
    examples = []
    for e in entries:
        pano = load_corpus_pano(workdir / "corpus", e)
        ldr = _tonemap(cfg, pano)
        zg = gtok.encode(_global_input(cfg, pano))
        lat_h = ldr.height // comp
        lat_w = ldr.width // comp
        for _ in range(per):
            r0 = int(rng.integers(0, lat_h - grid + 1)) * comp
            c0 = int(rng.integers(0, lat_w)) * comp
            cols = (np.arange(c0, c0 + patch)) % ldr.width
            crop = LdrImage(ldr.pixels[r0 : r0 + patch][:, cols])
            spe = patch_spe((r0, c0), patch, patch, ldr.height, ldr.width,
                            grid, grid, verbatim_axes=verbatim)
            examples.append((ltok.encode(crop), spe, zg))
    return examples


def cmd_train_local(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    gtok = _load_tokenizer(cfg, workdir, "global")
    ltok = _load_tokenizer(cfg, workdir, "local")
    entries = _corpus_entries(workdir, "train")
    examples = _local_examples(cfg, workdir, gtok, ltok, entries)
    log = []
    sampler = train_local_sampler(examples, cfg.local_sampler_config(), log=log)
    ad.save_checkpoint(sampler.state_dict(), _ckpt_path(workdir, "sampler_local"))
    _write_manifest(
        workdir / "train-local.manifest.txt", "train-local", cfg,
        {"final_nll": log[-1][1], "examples": len(examples)},
    )
    print(f"trained local sampler: nll {log[-1][1]:.4f} nats/token on {len(examples)} patches")
    return 0


def cmd_train_sritmo(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    archive = Path(workdir) / "pairs_train.bin"
    if not archive.exists():
        raise MissingDependencyError(
            f"missing pair archive {archive}; run `panosynth prepare-data` first"
        )
    pairs = load_pairs(archive)
    log = []
    model = train_sritmo(pairs, cfg.sritmo_config(), log=log)
    (workdir / "checkpoints").mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(model.state_dict(), _ckpt_path(workdir, "sritmo"))
    _write_manifest(
        workdir / "train-sritmo.manifest.txt", "train-sritmo", cfg,
        {"pairs": len(pairs), "final_loss": log[-1][1]},
    )
    print(f"trained SR-iTMO on {len(pairs)} pairs: loss {log[-1][1]:.4f}")
    return 0


def cmd_generate(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    if not args.text.strip():
        raise ConfigError("prompt must not be empty")
    seed = args.seed if args.seed is not None else cfg.seed
    gtok = _load_tokenizer(cfg, workdir, "global")
    ltok = _load_tokenizer(cfg, workdir, "local")
    gsampler = _load_global_sampler(cfg, workdir)
    lsampler = _load_local_sampler(cfg, workdir)
    store = load_store(_store_path(workdir))
    emb = _text_embedding(cfg, args.text, workdir)
    if cfg.get("ablations", "no_knn"):
        bundle = ConditionBundle(knn=(), text=emb)
    else:
        k = min(cfg.get("embedding", "knn_k"), len(store))
        bundle = knn_condition(emb, store, k)
    s = cfg["sampler"]
    out_global = gsampler.sample(
        bundle, temperature=s["temperature"], top_k=s["top_k"], seed=seed
    )
    pano_hw = (cfg.get("pipeline", "pano_h"), cfg.get("pipeline", "pano_w"))
    image, lattice = generate_panorama(
        out_global.grid, lsampler, ltok, pano_hw,
        window=s["window"], stride=s["stride"],
        temperature=s["temperature"], top_k=s["top_k"], seed=seed + 1,
        verbatim_axes=cfg.get("sphere", "eq1_verbatim_axes"),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(image, out)
    np.savez(str(out) + ".tokens.npz", zg=out_global.grid.indices,
             lattice=lattice.indices)
    _write_manifest(
        str(out) + ".manifest.txt", "generate", cfg,
        {"text": args.text, "gen_seed": seed, "output": out.name},
    )
    print(f"wrote {out}")
    return 0


def cmd_upscale(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    model = _load_sritmo(cfg, workdir)
    ldr = load_png(args.input)
    extent = PatchExtent((ldr.height, ldr.width))
    ldr_hr, hdr_hr = model.upscale(
        ldr, args.factor, extent,
        verbatim_axes=cfg.get("sphere", "eq1_verbatim_axes"),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_hdr(hdr_hr, out)
    save_png(expose(hdr_hr, 0.0), str(out) + ".preview.png")
    save_png(ldr_hr, str(out) + ".ldr.png")
    _write_manifest(
        str(out) + ".manifest.txt", "upscale", cfg,
        {"input": args.input, "factor": args.factor,
         "hdr_max": float(hdr_hr.pixels.max())},
    )
    print(f"wrote {out} (max radiance {hdr_hr.pixels.max():.2f})")
    return 0


def cmd_edit(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    seed = args.seed if args.seed is not None else cfg.seed
    base = np.load(args.base)
    from .vq import TokenGrid

    zg = TokenGrid(base["zg"], cfg.get("vq", "codebook_size"))
    try:
        c0, c1 = (int(x) for x in args.region.split(":"))
    except ValueError:
        raise ConfigError(f"--region expects c0:c1, got {args.region!r}") from None
    gtok = _load_tokenizer(cfg, workdir, "global")
    ltok = _load_tokenizer(cfg, workdir, "local")
    gsampler = _load_global_sampler(cfg, workdir)
    lsampler = _load_local_sampler(cfg, workdir)
    store = load_store(_store_path(workdir))
    emb = _text_embedding(cfg, args.text, workdir)
    k = min(cfg.get("embedding", "knn_k"), len(store))
    bundle = knn_condition(emb, store, k)
    s = cfg["sampler"]
    new_zg = gsampler.resample_region(
        zg, bundle, (c0, c1),
        temperature=s["temperature"], top_k=s["top_k"], seed=seed,
    )
    pano_hw = (cfg.get("pipeline", "pano_h"), cfg.get("pipeline", "pano_w"))
    image, lattice = generate_panorama(
        new_zg, lsampler, ltok, pano_hw,
        window=s["window"], stride=s["stride"],
        temperature=s["temperature"], top_k=s["top_k"], seed=seed + 1,
        verbatim_axes=cfg.get("sphere", "eq1_verbatim_axes"),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(image, out)
    np.savez(str(out) + ".tokens.npz", zg=new_zg.indices, lattice=lattice.indices)
    _write_manifest(
        str(out) + ".manifest.txt", "edit", cfg,
        {"text": args.text, "region": args.region, "gen_seed": seed,
         "base": args.base},
    )
    print(f"wrote {out}")
    return 0


def cmd_eval_itmo(args):
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    if args.pairs:
        preds, gts = [], []
        with open(args.pairs) as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DataError(f"{args.pairs}:{line_no}: expected `pred gt`")
                preds.append(load_hdr(parts[0]).pixels)
                gts.append(load_hdr(parts[1]).pixels)
        if not preds:
            raise DataError(f"{args.pairs}: no records")
        m = float(np.mean([mae(p, g) for p, g in zip(preds, gts)]))
        r = float(np.mean([rmse(p, g) for p, g in zip(preds, gts)]))
    else:
        archive = Path(workdir) / "pairs_test.bin"
        if not archive.exists():
            raise MissingDependencyError(
                f"missing {archive}; run `panosynth prepare-data` first"
            )
        model = _load_sritmo(cfg, workdir)
        pairs = load_pairs(archive)
        maes, rmses = [], []
        for p in pairs:
            latents = model.encode_latents(p.ldr_lr, p.extent)
            _, hdr = model.query(latents, p.theta, p.phi)
            maes.append(mae(hdr, p.hdr))
            rmses.append(rmse(hdr, p.hdr))
        m, r = float(np.mean(maes)), float(np.mean(rmses))
    report = f"mae={m:.6f} rmse={r:.6f}"
    print(report)
    report_path = Path(args.report) if args.report else workdir / "eval-itmo.txt"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report + "\n")
    _write_manifest(
        str(report_path) + ".manifest.txt", "eval-itmo", cfg,
        {"mae": m, "rmse": r, "source": args.pairs or "pairs_test.bin"},
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panosynth",
        description="Text-driven HDR panorama synthesis pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("--workdir", default="work", help="pipeline work directory")

    common(sub.add_parser("prepare-data", help="build the procedural corpus"))
    common(sub.add_parser("train-codebooks", help="train both tokenizers"))
    common(sub.add_parser("train-global", help="train the text-conditioned sampler"))
    common(sub.add_parser("train-local", help="train the structure-aware sampler"))
    common(sub.add_parser("train-sritmo", help="train the SR-iTMO"))

    g = sub.add_parser("generate", help="text to LDR panorama")
    common(g)
    g.add_argument("--text", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)

    u = sub.add_parser("upscale", help="LDR image to high-res HDR")
    common(u)
    u.add_argument("--input", required=True, help="LDR PNG to upscale")
    u.add_argument("--factor", type=float, required=True)
    u.add_argument("--out", required=True, help="output .hdr path")

    e = sub.add_parser("edit", help="regenerate a token-column region")
    common(e)
    e.add_argument("--text", required=True)
    e.add_argument("--region", required=True, metavar="C0:C1")
    e.add_argument("--base", required=True, help=".tokens.npz from a previous run")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)

    ev = sub.add_parser("eval-itmo", help="MAE/RMSE of HDR reconstruction")
    common(ev)
    ev.add_argument("--pairs", help="text file of `pred.hdr gt.hdr` lines")
    ev.add_argument("--report", help="report output path")
    return parser


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-codebooks": cmd_train_codebooks,
    "train-global": cmd_train_global,
    "train-local": cmd_train_local,
    "train-sritmo": cmd_train_sritmo,
    "generate": cmd_generate,
    "upscale": cmd_upscale,
    "edit": cmd_edit,
    "eval-itmo": cmd_eval_itmo,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 3
    except (StoreFormatError, DataError, RgbeError, VqError, SamplerError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, EmbeddingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
