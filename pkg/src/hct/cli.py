"""``hct`` command line: synth, train, eval, ablate, gradcheck.

Settings come from built-in defaults, then an optional JSON file given with
``--config`` (flat keys, same names as the flags with underscores), then
explicit flags.  Exit codes: 0 success, 1 verification failure, 2 usage or
configuration error, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import autograd
from .data import generate_phantom, payload_checksum, read_dataset, write_dataset
from .errors import ConfigError, DimensionError, FormatError, NumericalError
from .evaluation import AGGREGATION_NOTE, ablation_run, evaluate, write_metrics_csv, write_pr_csv
from .gradcheck import CASES, run_case
from .model import VARIANTS, ModelConfig, build_variant, load_model
from .training import TrainConfig, train

log = logging.getLogger("hct")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = ("d_embed", "depth", "n_heads", "backbone_widths", "variant")


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    # synth
    patients: int = 20
    slices: int = 4
    size: int = 64
    # model
    d_embed: int = 256
    depth: int = 4
    n_heads: int = 4
    backbone_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    variant: str = "HCT"
    # training
    lr0: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 100
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    augment: bool = True
    checkpoint_every: int = 0
    resume: str | None = None
    # evaluation
    checkpoint: str | None = None
    threshold: float = 0.5
    variants: list[str] = field(default_factory=lambda: ["EF-TN", "LF-TN", "HCT"])
    folds: int = 5
    # gradcheck
    seeds: int = 5

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, h: int, w: int, variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            h=h, w=w, d_embed=self.d_embed, depth=self.depth, n_heads=self.n_heads,
            backbone_widths=tuple(self.backbone_widths), variant=variant or self.variant,
        ).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, poly_power=self.poly_power, epochs=self.epochs, batch_size=self.batch_size,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            weight_decay=self.weight_decay, decoupled_weight_decay=self.decoupled_weight_decay,
            augment=self.augment, seed=self.seed,
        ).validate()

    def validate(self) -> "RunConfig":
        bad = [v for v in [self.variant, *self.variants] if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {', '.join(bad)}; valid variants: {', '.join(VARIANTS)}")
        if self.size % 16 or self.size < 16:
            raise ConfigError(f"--size {self.size} must be a positive multiple of 16")
        if self.patients < 1 or self.slices < 1:
            raise ConfigError("--patients and --slices must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.seeds < 1 or self.folds < 2:
            raise ConfigError("--seeds must be >= 1 and --folds >= 2")
        self.train_config()
        ModelConfig(d_embed=self.d_embed, depth=self.depth, n_heads=self.n_heads,
                    backbone_widths=tuple(self.backbone_widths), variant=self.variant).validate()
        return self


def _variant_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings (flags override it)")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--out", default=S, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", default=S, help=f"one of {', '.join(VARIANTS)}")
    model.add_argument("--d-embed", dest="d_embed", type=int, default=S)
    model.add_argument("--depth", type=int, default=S)
    model.add_argument("--heads", dest="n_heads", type=int, default=S)
    model.add_argument("--widths", dest="backbone_widths", type=_int_list, default=S,
                       help="four comma-separated backbone widths")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int, default=S)
    training.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    training.add_argument("--lr", dest="lr0", type=float, default=S)
    training.add_argument("--poly-power", dest="poly_power", type=float, default=S)
    training.add_argument("--weight-decay", dest="weight_decay", type=float, default=S)
    training.add_argument("--decoupled-weight-decay", dest="decoupled_weight_decay", type=_bool, default=S)
    training.add_argument("--augment", type=_bool, default=S)

    parser = argparse.ArgumentParser(prog="hct", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset")
    p.add_argument("--patients", type=int, default=S)
    p.add_argument("--slices", type=int, default=S)
    p.add_argument("--size", type=int, default=S)

    p = sub.add_parser("train", parents=[common, model, training], help="train one model")
    p.add_argument("--dataset", default=S)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=S)
    p.add_argument("--resume", default=S, help="epoch checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common, model], help="evaluate a checkpoint on a dataset")
    p.add_argument("--dataset", default=S)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--threshold", type=float, default=S)

    p = sub.add_parser("ablate", parents=[common, model, training], help="k-fold fusion ablation")
    p.add_argument("--dataset", default=S)
    p.add_argument("--variants", type=_variant_list, default=S)
    p.add_argument("--folds", type=int, default=S)
    p.add_argument("--threshold", type=float, default=S)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=S, help="number of seeds, starting at --seed")
    p.add_argument("--ops", type=_variant_list, default=None, help=f"subset of: {', '.join(CASES)}")
    p.add_argument("--inject-fault", dest="inject_fault", default=None, help=S)
    return parser


def load_run_config(args: argparse.Namespace) -> tuple[RunConfig, set[str]]:
    """Merge defaults, the JSON file and flags; returns the config and the keys set explicitly."""
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{args.config} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    flags = {k: v for k, v in vars(args).items() if k in known}
    values.update(flags)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate(), set(values)


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _load_dataset(path: str):
    if not Path(path).is_dir():
        raise ConfigError(f"dataset directory {path} does not exist")
    return read_dataset(path)


def cmd_synth(cfg: RunConfig, explicit: set[str]) -> int:
    out = Path(_require(cfg.out, "--out"))
    dataset = generate_phantom(cfg.seed, cfg.patients, cfg.slices, cfg.size, cfg.size)
    try:
        write_dataset(dataset, out)
    except OSError as exc:
        print(f"error: cannot write dataset to {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(dataset)} samples to {out} (sha256 {payload_checksum(out)})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, explicit: set[str]) -> int:
    dataset = _load_dataset(_require(cfg.dataset, "--dataset"))
    out = Path(_require(cfg.out, "--out"))
    h, w = dataset.samples[0].shape
    model = build_variant(cfg.model_config(h, w), seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(model, dataset, cfg.train_config(), out_dir=out,
                   checkpoint_every=cfg.checkpoint_every, resume_from=cfg.resume)
    first, last = result.log[0], result.log[-1]
    print(f"trained {model.variant} ({model.n_params()} parameters): "
          f"loss {first.mean_loss:.4f} -> {last.mean_loss:.4f}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, explicit: set[str]) -> int:
    dataset = _load_dataset(_require(cfg.dataset, "--dataset"))
    ckpt = Path(_require(cfg.checkpoint, "--checkpoint"))
    out = Path(_require(cfg.out, "--out"))
    from .model import load_checkpoint

    stored, _, _ = load_checkpoint(ckpt)
    merged = ModelConfig.from_dict(stored).to_dict()
    merged.update({k: getattr(cfg, k) for k in MODEL_KEYS if k in explicit})
    h, w = dataset.samples[0].shape
    merged.update(h=h, w=w)
    try:
        model, _, _ = load_model(ckpt, ModelConfig.from_dict(merged).validate())
    except DimensionError as exc:
        raise ConfigError(f"checkpoint {ckpt} does not match the requested model: {exc}") from exc
    report = evaluate(model, dataset.samples, cfg.threshold)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", [{"variant": model.variant, "fold": 0, **report.scalars()}])
    write_pr_csv(out / f"pr_{model.variant}.csv", report.pr)
    summary = {
        "aggregation": AGGREGATION_NOTE,
        "variants": {model.variant: {**report.scalars(), "n_params": model.n_params()}},
        "checkpoint": str(ckpt),
        "config": cfg.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{model.variant}: DSC {report.dsc:.2f} Pre {report.precision:.2f} "
          f"Sen {report.sensitivity:.2f} Spe {report.specificity:.2f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, explicit: set[str]) -> int:
    dataset = _load_dataset(_require(cfg.dataset, "--dataset"))
    out = Path(_require(cfg.out, "--out"))
    h, w = dataset.samples[0].shape
    result = ablation_run(dataset, cfg.variants, cfg.train_config(), cfg.model_config(h, w),
                          out_dir=out, k=cfg.folds, threshold=cfg.threshold, run_config=cfg.to_dict())
    print(f"{'variant':8s} {'DSC':>7s} {'Pre':>7s} {'Sen':>7s} {'Spe':>7s}")
    for v, m in result.means.items():
        print(f"{v:8s} {m['dsc']:7.2f} {m['precision']:7.2f} {m['sensitivity']:7.2f} {m['specificity']:7.2f}")
    print(f"fusion ordering HF > EF > LF: {result.ordering['status']}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, explicit: set[str], ops=None, inject_fault=None) -> int:
    names = list(CASES) if not ops else ops
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown op(s) {', '.join(unknown)}; choose from {', '.join(CASES)}")
    if inject_fault:
        op, _, factor = inject_fault.partition("=")
        autograd.FAULTS[op] = float(factor or 1.01)
    failures = []
    try:
        for name in names:
            results = [run_case(name, seed) for seed in range(cfg.seed, cfg.seed + cfg.seeds)]
            worst = max(results, key=lambda r: r.max_error)
            status = "ok" if all(r.passed for r in results) else "FAIL"
            print(f"{name:26s} max rel err {worst.max_error:.3e} (seed {worst.seed})  "
                  f"{sum(r.n_checked for r in results):5d} entries  {status}")
            failures += [r for r in results if not r.passed]
    finally:
        if inject_fault:
            autograd.FAULTS.clear()
    for r in failures:
        print(f"FAILED: {r.op} seed {r.seed} relative error {r.max_error:.3e}", file=sys.stderr)
    return EXIT_VERIFY if failures else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg, explicit = load_run_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, explicit, args.ops, args.inject_fault)
        return COMMANDS[args.command](cfg, explicit)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
