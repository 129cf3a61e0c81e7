"""octcodec command line: train, encode, decode, eval, flops, ablate.

Exit codes: 0 success, 2 usage, 3 data error, 4 model/stream mismatch.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .coder import Bitstream, DigestMismatch, StreamError, decode_image, encode_image
from .imageio import ImageError, ImageFile, list_images, read_image, write_image
from .metrics import msssim, msssim_db, psnr
from .network import VARIANTS, ArchConfig, CodecModel, count_flops, load_checkpoint
from .report import mean_row, render_table
from .toydata import toy_dataset
from .train import TrainConfig, train_loop

log = logging.getLogger("octcodec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 2, 3, 4
EVAL_COLUMNS = ("image", "width", "height", "bits", "bpp", "bpp_hf", "bpp_lf", "psnr", "msssim", "msssim_db")
ABLATE_COLUMNS = ("variant", "alpha", "bits", "bits_hf", "bits_lf", "pixels", "bpp", "bpp_hf", "bpp_lf",
                  "psnr", "msssim_db", "gflops")
DEFAULT_GRID = "0.25,0.5,0.75,actout,orgoct"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- run manifest -------------------------------------------------------------------
def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: list[str]
    config_digest: str
    seed: int | None = None
    build: str = field(default_factory=_build_id)
    started: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    finished: str | None = None

    @property
    def run_id(self) -> str:
        key = json.dumps([self.command, self.config_digest, self.seed, self.build, self.started])
        return hashlib.sha256(key.encode()).hexdigest()[:12]

    def write(self, path: Path) -> None:
        self.finished = _dt.datetime.now(_dt.timezone.utc).isoformat()
        body = asdict(self) | {"run_id": self.run_id}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# -- argument helpers -----------------------------------------------------------------
def _channels(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--channels expects M or M,N integers, got {text!r}") from None
    if len(parts) not in (1, 2) or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"--channels expects M or M,N positive integers, got {text!r}")
    return parts[0], parts[-1]


def _arch(alpha: float, channels: tuple[int, int], variant: str = "goconv") -> ArchConfig:
    m, n = channels
    try:
        return ArchConfig(M=m, N=n, alpha=alpha, variant=variant)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_model(path: str) -> tuple[CodecModel, dict]:
    try:
        model, info, _ = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load model {path}: {e}") from None
    return model, info


def _load_dir(directory: str) -> list[tuple[Path, ImageFile]]:
    try:
        paths = list_images(directory)
    except ImageError as e:
        raise DataError(str(e)) from None
    out = []
    for p in paths:
        try:
            out.append((p, read_image(p)))
        except ImageError as e:
            log.warning("skipping %s", e)
    return out


# -- commands -------------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg_arch = _arch(args.alpha, args.channels, args.variant)
    images = [im.to_float() for _, im in _load_dir(args.data)]
    if not images:
        raise DataError(f"{args.data}: no readable PNG or PPM images")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = TrainConfig(lam=args.lam, distortion=args.distortion, epochs=args.epochs, batch=args.batch,
                          lr=args.lr, crop=args.crop, seed=args.seed, steps=args.steps,
                          checkpoint_every=args.checkpoint_every, out_dir=str(out))
    except ValueError as e:
        raise UsageError(str(e)) from None
    manifest = RunManifest(args.argv or sys.argv[:],
                           hashlib.sha256((cfg_arch.to_json() + json.dumps(asdict(cfg), sort_keys=True))
                                          .encode()).hexdigest()[:16], args.seed)
    model = CodecModel(cfg_arch, seed=args.seed)
    try:
        res = train_loop(images, cfg, model, meta={"manifest": manifest.run_id})
    except ValueError as e:
        raise DataError(str(e)) from None
    manifest.write(out / "manifest.json")
    last = res.records[-1] if res.records else {}
    print(f"trained {res.step} steps; final loss {last.get('loss', float('nan')):.6f}; "
          f"checkpoint {out / 'final.octc'}")
    return EXIT_OK


def cmd_encode(args) -> int:
    model, info = _load_model(args.model)
    try:
        im = read_image(args.inp)
    except ImageError as e:
        raise DataError(str(e)) from None
    res = encode_image(im.to_float(), model, lambda_id=args.lambda_id)
    data = res.bitstream.to_bytes()
    out = Path(args.out)
    out.write_bytes(data)
    RunManifest(args.argv or sys.argv[:], model.digest(), info.get("seed")).write(_sidecar(out))
    bpp = 8 * len(data) / (im.width * im.height)
    print(f"{out}: {len(data)} bytes, {im.width}x{im.height}, bpp {bpp:.6f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model, info = _load_model(args.model)
    try:
        data = Path(args.inp).read_bytes()
    except OSError as e:
        raise DataError(f"{args.inp}: {e.strerror}") from None
    bs = Bitstream.from_bytes(data)
    x = decode_image(bs, model)
    out = Path(args.out)
    try:
        write_image(out, x)
    except ImageError as e:
        raise UsageError(str(e)) from None
    RunManifest(args.argv or sys.argv[:], model.digest(), info.get("seed")).write(_sidecar(out))
    line = f"{out}: {bs.width}x{bs.height}, bpp {bs.bpp:.6f}"
    if args.ref:
        try:
            ref = read_image(args.ref).to_float()
        except ImageError as e:
            raise DataError(str(e)) from None
        rec = read_image(out).to_float()
        if ref.shape != rec.shape:
            raise DataError(f"reference is {ref.shape[2]}x{ref.shape[1]}, decoded image is {bs.width}x{bs.height}")
        v = msssim(ref, rec)
        line += f", PSNR {psnr(ref, rec):.4f} dB, MS-SSIM {v:.6f}, MS-SSIM_dB {msssim_db(v):.4f}"
    print(line)
    return EXIT_OK


def evaluate_image(model: CodecModel, image: np.ndarray) -> dict:
    """Encode, decode and score one (3, h, w) image; bpp counts the whole file over original pixels."""
    res = encode_image(image, model)
    bs = res.bitstream
    rec = decode_image(bs.to_bytes(), model)
    # score the 8-bit image a decoder would write out
    rec = ImageFile.from_float(rec).to_float()
    _, h, w = image.shape
    hf, lf = bs.band_bits()
    v = msssim(image, rec)
    return {"width": w, "height": h, "bits": 8 * bs.num_bytes, "bits_hf": hf, "bits_lf": lf,
            "bpp": bs.bpp, "bpp_hf": hf / (w * h), "bpp_lf": lf / (w * h),
            "psnr": psnr(image, rec), "msssim": v, "msssim_db": msssim_db(v)}


def cmd_eval(args) -> int:
    model, info = _load_model(args.model)
    items = _load_dir(args.dir)
    if not items:
        raise DataError(f"{args.dir}: no readable PNG or PPM images")

    def run(item):
        path, im = item
        r = evaluate_image(model, im.to_float())
        return {"image": path.name} | {k: r[k] for k in EVAL_COLUMNS[1:]}

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            rows = list(pool.map(run, items))
    else:
        rows = [run(it) for it in items]
    rows.append(mean_row(rows, "image"))
    table = render_table(rows, "csv", EVAL_COLUMNS)
    out = Path(args.csv)
    out.write_bytes(table)
    RunManifest(args.argv or sys.argv[:], model.digest(), info.get("seed")).write(_sidecar(out))
    sys.stdout.write(render_table(rows, "text", EVAL_COLUMNS).decode())
    return EXIT_OK


def _variant_flag(args) -> str:
    chosen = [v for v in ("orgoct", "coreoct", "actout") if getattr(args, v)]
    if len(chosen) > 1:
        raise UsageError("choose at most one of --orgoct, --coreoct, --actout")
    return chosen[0] if chosen else "goconv"


def cmd_flops(args) -> int:
    cfg = _arch(args.alpha, args.channels, _variant_flag(args))
    try:
        res = count_flops(cfg, args.height, args.width)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = [{"module": k, "gflops": v / 1e9} for k, v in sorted(res["per_module"].items())]
    rows += [{"module": f"[{k}]", "gflops": v / 1e9} for k, v in sorted(res["per_category"].items())]
    rows.append({"module": "total", "gflops": res["total"] / 1e9})
    sys.stdout.write(render_table(rows, "text", ("module", "gflops")).decode())
    return EXIT_OK


def parse_grid(spec: str) -> list[tuple[str, float]]:
    """Grid tokens: an alpha value (GoConv model), a variant name (alpha 0.5), or VARIANT:ALPHA."""
    out = []
    for token in (t.strip() for t in spec.split(",")):
        if not token:
            raise UsageError(f"empty entry in grid {spec!r}")
        name, _, a = token.partition(":")
        try:
            if name in VARIANTS:
                alpha = float(a) if a else 0.5
            else:
                if a:
                    raise ValueError
                name, alpha = "goconv", float(name)
        except ValueError:
            raise UsageError(f"bad grid entry {token!r}; use an alpha, one of {VARIANTS}, or VARIANT:ALPHA") from None
        if not 0 < alpha < 1:
            raise UsageError(f"grid entry {token!r}: alpha must lie strictly between 0 and 1")
        out.append((name, alpha))
    return out


def run_ablation(grid: list[tuple[str, float]], train_images: list[np.ndarray], test_images: list[np.ndarray],
                 channels: tuple[int, int], cfg: TrainConfig, flops_hw: tuple[int, int] = (512, 768)) -> list[dict]:
    """Train one toy model per grid entry from a shared seed, then code the held-out images."""
    rows = []
    for variant, alpha in grid:
        arch = ArchConfig(M=channels[0], N=channels[1], alpha=alpha, variant=variant)
        model = train_loop(train_images, cfg, CodecModel(arch, seed=cfg.seed)).model
        results = [evaluate_image(model, im) for im in test_images]
        bits = sum(r["bits"] for r in results)
        hf = sum(r["bits_hf"] for r in results)
        pixels = sum(r["width"] * r["height"] for r in results)
        # mean bpp over images, kept exact so the HF/LF parts sum to the total
        per = lambda key: sum(Fraction(r[key], r["width"] * r["height"]) for r in results) / len(results)  # noqa: E731
        rows.append({"variant": variant, "alpha": alpha, "bits": bits, "bits_hf": hf, "bits_lf": bits - hf,
                     "pixels": pixels, "bpp": float(per("bits")), "bpp_hf": float(per("bits_hf")),
                     "bpp_lf": float(per("bits_lf")),
                     "psnr": float(np.mean([r["psnr"] for r in results])),
                     "msssim_db": float(np.mean([r["msssim_db"] for r in results])),
                     "gflops": count_flops(arch, *flops_hw)["total"] / 1e9})
    return rows


def cmd_ablate(args) -> int:
    grid = parse_grid(args.grid)
    if args.data:
        images = [im.to_float() for _, im in _load_dir(args.data)]
        if len(images) < 2:
            raise DataError(f"{args.data}: need at least two images (training and held-out)")
        n_test = max(1, len(images) // 4)
        train_images, test_images = images[:-n_test], images[-n_test:]
    else:
        train_images = toy_dataset(args.train_images, seed=args.seed, height=args.crop, width=args.crop)
        test_images = toy_dataset(args.test_images, seed=args.seed + 1, height=args.crop, width=args.crop)
    try:
        cfg = TrainConfig(lam=args.lam, distortion=args.distortion, batch=args.batch, lr=args.lr,
                          crop=args.crop, seed=args.seed, steps=args.steps)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = run_ablation(grid, train_images, test_images, args.channels, cfg)
    rows.append(mean_row(rows, "variant"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    table.write_bytes(render_table(rows, "csv", ABLATE_COLUMNS))
    digest = hashlib.sha256(json.dumps([grid, asdict(cfg), list(args.channels)]).encode()).hexdigest()[:16]
    RunManifest(args.argv or sys.argv[:], digest, args.seed).write(_sidecar(table))
    sys.stdout.write(render_table(rows, "text", ABLATE_COLUMNS).decode())
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octcodec", description="Learned multi-frequency image codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a directory of images")
    t.add_argument("--data", required=True)
    t.add_argument("--lambda", dest="lam", type=float, required=True)
    t.add_argument("--distortion", choices=("mse", "msssim"), default="mse")
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--channels", type=_channels, default=(192, 192), help="M or M,N")
    t.add_argument("--variant", choices=VARIANTS, default="goconv")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--steps", type=int, default=None, help="total steps; overrides --epochs")
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=5e-5)
    t.add_argument("--crop", type=int, default=256)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress one image")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--lambda-id", type=int, default=0)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress one bitstream")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--ref", default=None, help="reference image for PSNR / MS-SSIM")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="per-image and mean rate / quality over a directory")
    v.add_argument("--model", required=True)
    v.add_argument("--dir", required=True)
    v.add_argument("--csv", required=True)
    v.add_argument("--workers", type=int, default=1)
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="count FLOPs of a configuration")
    f.add_argument("--alpha", type=float, default=0.5)
    f.add_argument("--channels", type=_channels, default=(192, 192))
    f.add_argument("--width", type=int, default=768)
    f.add_argument("--height", type=int, default=512)
    for flag in ("orgoct", "coreoct", "actout"):
        f.add_argument(f"--{flag}", action="store_true")
    f.set_defaults(func=cmd_flops)

    a = sub.add_parser("ablate", help="train and code the alpha / ActOut / CoreOct / OrgOct grid at toy scale")
    a.add_argument("--grid", default=DEFAULT_GRID)
    a.add_argument("--steps", type=int, default=300)
    a.add_argument("--out", required=True)
    a.add_argument("--data", default=None, help="image directory; synthetic toy images when omitted")
    a.add_argument("--channels", type=_channels, default=(16, 16))
    a.add_argument("--lambda", dest="lam", type=float, default=100.0)
    a.add_argument("--distortion", choices=("mse", "msssim"), default="mse")
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--batch", type=int, default=1)
    a.add_argument("--crop", type=int, default=128)
    a.add_argument("--train-images", type=int, default=4)
    a.add_argument("--test-images", type=int, default=2)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = ["octcodec"] + list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"octcodec {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DigestMismatch as e:
        print(f"octcodec {args.command}: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DataError, StreamError, ImageError) as e:
        print(f"octcodec {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
