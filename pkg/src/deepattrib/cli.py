"""``deepattrib`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 an experiment check failed, 3 I/O error.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from deepattrib import experiments as ex
from deepattrib.attribution import ReconstructionConfig, attribute
from deepattrib.generators import build_generator, generate, load_model, sample_noise, save_model
from deepattrib.ledger import (
    Chain,
    ImageIndex,
    KeyPair,
    LedgerError,
    ModelDatabase,
    NoiseRecipe,
    append_block,
    register_generation,
    verify_chain,
    verify_entry,
)
from deepattrib.perturbations import (
    ATTACKS,
    AUGMENTATIONS,
    AugmentationSpec,
    augment,
    cw_image,
    fgsm_image,
    jpeg_like_compress,
)
from deepattrib.distance import FeatureExtractor
from deepattrib.training import (
    ToyDatasetSpec,
    TrainConfig,
    build_discriminator,
    make_toy_dataset,
    train_gan,
)

OUT_ENV = "DEEPATTRIB_OUT"
EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3


class CheckFailed(click.ClickException):
    exit_code = EXIT_CHECK


def _default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "deepattrib-out"))


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _seed_vector(model, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(model.arch.seed_dim, dtype=np.float32)


# --- image files ------------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary 8-bit PGM (first channel of a (C, H, W) image in [0, 1])."""
    x = np.asarray(image)
    plane = x[0] if x.ndim == 3 else x
    q = np.round(np.clip(plane, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise click.BadParameter(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    plane = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return (plane.astype(np.float32) / 255)[None]


def load_image(path: str) -> np.ndarray:
    if path.endswith(".pgm"):
        return read_pgm(path)
    x = np.load(path)
    return x.astype(np.float32)


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".pgm":
        write_pgm(path, image)
    else:
        np.save(path, np.asarray(image, dtype=np.float32))


# --- commands ---------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Attribute generated images to the generator that made them."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--arch", type=click.Choice(sorted(ex.ARCHS)), default="plain", show_default=True)
@click.option("--dataset", type=click.Choice(["blob-faces", "two-class-digits"]), default="blob-faces", show_default=True)
@click.option("--count", default=2000, show_default=True, help="Training images.")
@click.option("--steps", default=2000, show_default=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="TrainConfig overrides as JSON.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Model file to write.")
@click.option("--trace", type=click.Path(dir_okay=False), help="Optional loss trace CSV.")
def train(arch, dataset, count, steps, config, seed, out, trace):
    """Train a toy generator adversarially."""
    a = ex.ARCHS[arch]
    data, _ = make_toy_dataset(ToyDatasetSpec(kind=dataset, count=count, image_shape=a.image_shape, seed=seed))
    cfg = TrainConfig(**{"steps": steps, "seed": seed, **_load_json(config)})
    g = build_generator(a, seed)
    d = build_discriminator(a.image_shape, seed=seed + 1)
    res = train_gan(g, d, data, cfg)
    save_model(res.generator, out)
    if trace:
        res.write_trace(trace)
    click.echo(f"{out} {res.generator.digest}")


@cli.command("generate")
@click.argument("model", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True, help="First seed; image i uses seed + i.")
@click.option("--count", default=1, show_default=True)
@click.option("--psi", default=0.7, show_default=True, help="Truncation for style models.")
@click.option("--format", "fmt", type=click.Choice(["npy", "pgm"]), default="pgm", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def generate_cmd(model, seed, count, psi, fmt, out):
    """Generate images from a saved model."""
    g = load_model(model)
    out = Path(out) if out else _default_out()
    for i in range(count):
        k = seed + i
        img = generate(g, _seed_vector(g, k), sample_noise(g, k, psi=psi)).data
        path = out / f"image_{k:06d}.{fmt}"
        save_image(path, img)
        click.echo(str(path))


@cli.command("attribute")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "models", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False), help="Candidate model (repeat).")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="ReconstructionConfig as JSON.")
@click.option("--seed", type=int, help="Overrides the config seed.")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Report file (default: stdout).")
def attribute_cmd(image, models, config, seed, workers, out):
    """Attribute IMAGE to one of the candidate models."""
    cfg = ReconstructionConfig(**_load_json(config))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    pool = {Path(m).stem: load_model(m) for m in models}
    if len(pool) != len(models):
        raise click.UsageError("model file names must be distinct")
    report = attribute(load_image(image), pool, cfg, workers)
    text = report.to_json()
    if out:
        Path(out).write_text(text + "\n")
    else:
        click.echo(text)


@cli.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", type=click.Choice([*AUGMENTATIONS, "jpeg"]), required=True)
@click.option("--quality", default=90, show_default=True, help="Quality for jpeg.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def perturb(image, kind, quality, seed, out):
    """Apply a benign augmentation or lossy compression."""
    x = load_image(image)
    y = jpeg_like_compress(x, quality) if kind == "jpeg" else augment(x, AugmentationSpec(kind, seed))
    save_image(out, y)


@cli.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--attack", type=click.Choice([a for a in ATTACKS if a != "fgsm-seed"]), required=True)
@click.option("--epsilon", default=0.0588, show_default=True)
@click.option("--c", "c", default=1.0, show_default=True, help="CW trade-off constant.")
@click.option("--steps", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def attack(image, attack, epsilon, c, steps, seed, out):
    """Perturb an image against the feature distance."""
    x = load_image(image)
    fx = FeatureExtractor.default()
    if attack == "cw-image":
        y = cw_image(fx, x, c, steps, seed=seed).images
    else:
        y = fgsm_image(fx, x, epsilon, "linf" if attack == "fgsm-image" else "l2", seed)
    save_image(out, y)


@cli.group()
def ledger() -> None:
    """Registry of signed generation records."""


_chain_opt = click.option("--chain", "chain_dir", type=click.Path(file_okay=False), required=True, help="Block directory.")
_db_opt = click.option("--db", "db_dir", type=click.Path(file_okay=False), required=True, help="Model database directory.")


@ledger.command("keygen")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Private key file (32 raw bytes).")
def ledger_keygen(out):
    """Create an Ed25519 signing key."""
    secret = os.urandom(32)
    Path(out).write_bytes(secret)
    click.echo(KeyPair.generate(secret).public_bytes.hex())


@ledger.command("register")
@_chain_opt
@_db_opt
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--key", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seed", default=0, show_default=True, help="Seed-vector stream and noise seed.")
@click.option("--count", default=1, show_default=True)
@click.option("--psi", default=0.7, show_default=True)
@click.option("--no-noise", is_flag=True)
@click.option("--out", type=click.Path(file_okay=False), help="Also write the generated images here.")
def ledger_register(chain_dir, db_dir, model, key, seed, count, psi, no_noise, out):
    """Generate images, sign the records, and seal them into a new block."""
    chain, db = _open(chain_dir, db_dir)
    g = load_model(model)
    keys = KeyPair.generate(Path(key).read_bytes())
    for i in range(count):
        k = seed + i
        entry = register_generation(chain, db, g, _seed_vector(g, k), NoiseRecipe(k, psi, not no_noise), keys)
        if out:
            save_image(Path(out) / f"record_{entry.record_id:08d}.pgm", generate(g, _seed_vector(g, k), entry.recipe.build(g)).data)
    block = append_block(chain, db=db)
    click.echo(f"block {block.index} {block.block_hash.hex()} records {[e.record_id for e in block.entries]}")


@ledger.command("verify")
@_chain_opt
@_db_opt
@click.option("--record", type=int, help="Verify one record instead of the whole chain.")
def ledger_verify(chain_dir, db_dir, record):
    """Check links, block hashes, and every record by regeneration."""
    chain, db = _open(chain_dir, db_dir)
    if record is not None:
        match = [e for e in chain.entries() if e.record_id == record]
        if not match:
            raise click.UsageError(f"no record {record}")
        v = verify_entry(match[0], db)
    else:
        v = verify_chain(chain, db)
    click.echo(json.dumps({"ok": v.ok, "diagnostic": v.diagnostic, "index": v.index}, sort_keys=True))
    if not v.ok:
        raise CheckFailed(f"verification failed: {v.diagnostic}")


@ledger.command("query")
@_chain_opt
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
def ledger_query(chain_dir, image):
    """List the records whose image hash matches IMAGE (empty if none)."""
    chain = _open_chain(chain_dir)
    hits = ImageIndex(chain).query(load_image(image))
    click.echo(json.dumps([e.to_json() for e in hits], sort_keys=True))


@ledger.command("audit")
@_chain_opt
@_db_opt
def ledger_audit(chain_dir, db_dir):
    """Full verification plus a per-model record count."""
    chain, db = _open(chain_dir, db_dir)
    v = verify_chain(chain, db)
    counts: dict[str, int] = {}
    for e in chain.entries():
        counts[e.model_hash.hex()] = counts.get(e.model_hash.hex(), 0) + 1
    summary = {"ok": v.ok, "diagnostic": v.diagnostic, "index": v.index, "blocks": len(chain.blocks), "records_per_model": counts}
    click.echo(json.dumps(summary, sort_keys=True))
    if not v.ok:
        raise CheckFailed(f"audit failed: {v.diagnostic}")


def _open_chain(chain_dir):
    return Chain.open(chain_dir)


def _open(chain_dir, db_dir):
    return _open_chain(chain_dir), ModelDatabase(db_dir)


@cli.command()
@click.option("--kind", type=click.Choice(ex.EXPERIMENTS), help="Experiment (or set it in --config).")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="ExperimentConfig as JSON.")
@click.option("--seed", type=int, help="Overrides the master seed.")
@click.option("--workers", default=1, show_default=True)
@click.option("--cache", type=click.Path(file_okay=False), help=f"Pool cache (default ${ex.CACHE_ENV} or ~/.cache/deepattrib).")
@click.option("--out", type=click.Path(file_okay=False), help=f"Report directory (default ${OUT_ENV}).")
def experiment(kind, config, seed, workers, cache, out):
    """Run one experiment and write its JSON/CSV reports."""
    d = _load_json(config)
    if kind:
        d["kind"] = kind
    if "kind" not in d:
        raise click.UsageError("give --kind or a config with a kind")
    if seed is not None:
        d["seed"] = seed
    try:
        cfg = ex.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise click.UsageError(f"bad config: {e}") from e
    ctx = ex.RunContext(workers=workers, cache_dir=Path(cache) if cache else ex.default_cache_dir())
    result = ex.run_experiment(cfg, ctx)
    for p in result.write(Path(out) if out else _default_out()):
        click.echo(str(p))
    failed = [c.name for c in result.checks if not c.passed]
    if failed:
        raise CheckFailed(f"checks failed: {', '.join(failed)}")


@cli.command()
@click.argument("reports", nargs=-1, type=click.Path(exists=True))
def report(reports):
    """Summarize report files (or every report in the given directories)."""
    paths = []
    for r in reports or [str(_default_out())]:
        p = Path(r)
        paths += sorted(p.glob("*.json")) if p.is_dir() else [p]
    failed = False
    for p in paths:
        d = json.loads(p.read_text())
        if d.get("schema") != ex.REPORT_SCHEMA:
            continue
        checks = d.get("checks", [])
        bad = [c["name"] for c in checks if not c["passed"]]
        failed |= bool(bad)
        status = "FAIL " + ",".join(bad) if bad else "ok"
        headline = {k: v for k, v in d["results"].items() if isinstance(v, (int, float, str)) and k != "interpretation"}
        click.echo(f"{d['experiment']:<18} {status:<6} {json.dumps(headline, sort_keys=True)}")
    if failed:
        raise CheckFailed("some reports have failed checks")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="deepattrib", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except CheckFailed as e:
        e.show()
        return EXIT_CHECK
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_IO if isinstance(e, click.FileError) else EXIT_USAGE
    except LedgerError as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_CHECK
    except OSError as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
