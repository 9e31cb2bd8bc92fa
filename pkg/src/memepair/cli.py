"""Command-line entry point: ``memepair <command> [--config FILE] [--key value ...]``.

Commands: gen-data, train, eval, ensemble, gradcheck, roc. Configuration is
one flat TOML table; flags override file values, which override defaults.
Every command writes its fully resolved config to ``<out_dir>/config.toml``.
Exit status: 0 success, 1 input error, 2 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from . import data as D
from . import evaluate as E
from . import model as M
from . import train as TR
from .errors import InputError, MemePairError
from .gradcheck import finite_diff_check

log = logging.getLogger("memepair")

COMMANDS = ("gen-data", "train", "eval", "ensemble", "gradcheck", "roc")


@dataclass
class RunConfig:
    # paths
    out_dir: str = "runs/out"
    train_path: str = ""
    val_path: str = ""
    data_path: str = ""
    vocab_path: str = ""
    checkpoint: str = ""
    predictions: list[str] = field(default_factory=list)
    # synthetic data
    data_seed: int = 1
    num_concepts: int = 8
    num_samples: int = 3000
    num_regions: int = 4
    feat_dim: int = 16
    noise_sigma: float = 0.1
    confounder_fraction: float = 0.5
    text_noise_rate: float = 0.0
    split: list[float] = field(default_factory=lambda: [2 / 3, 1 / 6, 1 / 6])
    min_count: int = 1
    # model
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 0
    pool_hidden: int = 0
    max_text_len: int = 16
    max_regions: int = 4
    head_kind: str = "paired"
    ablation: str = "none"
    dropout_rate: float = 0.0
    share_pool: bool = True
    allow_empty_caption: bool = False
    init_std: float = 0.02
    # training
    seed: int = 1
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    eval_every: int = 0
    # gradcheck
    gc_eps: float = 1e-5
    gc_tol: float = 1e-4
    gc_coords: int = 32

    def model_config(self, vocab_size: int, region_feat_dim: int) -> M.ModelConfig:
        return M.ModelConfig(
            vocab_size=vocab_size, max_text_len=self.max_text_len, max_regions=self.max_regions,
            region_feat_dim=region_feat_dim, hidden_dim=self.hidden_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_dim=self.ffn_dim, pool_hidden=self.pool_hidden,
            head_kind=self.head_kind, ablation=self.ablation, dropout_rate=self.dropout_rate,
            share_pool=self.share_pool, allow_empty_caption=self.allow_empty_caption, init_std=self.init_std)

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig(
            seed=self.seed, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2), adam_eps=self.adam_eps,
            grad_clip_norm=self.grad_clip_norm, eval_every=self.eval_every)

    def synthetic_spec(self) -> D.SyntheticSpec:
        return D.SyntheticSpec(
            num_concepts=self.num_concepts, num_samples=self.num_samples, num_regions=self.num_regions,
            feat_dim=self.feat_dim, noise_sigma=self.noise_sigma,
            confounder_fraction=self.confounder_fraction, text_noise_rate=self.text_noise_rate,
            seed=self.data_seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _kind(name: str) -> type:
    return type(getattr(_DEFAULTS, name))


def _check_type(key: str, value: Any) -> Any:
    kind = _kind(key)
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        list: lambda v: isinstance(v, list),
    }[kind](value)
    if not ok:
        raise InputError(f"config key {key}: expected {kind.__name__}, got {type(value).__name__} ({value!r})")
    if kind is float:
        return float(value)
    if kind is list:
        item = float if key == "split" else str
        try:
            return [item(v) for v in value]
        except (TypeError, ValueError):
            raise InputError(f"config key {key}: expected a list of {item.__name__}") from None
    return value


def _parse_flag(key: str, raw: Any) -> Any:
    """Convert a command-line string (or list of strings) to the key's type."""
    kind = _kind(key)
    try:
        if kind is bool:
            low = str(raw).lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is list:
            return [float(v) for v in raw] if key == "split" else [str(v) for v in raw]
        return kind(raw)
    except (TypeError, ValueError):
        raise InputError(f"flag --{key.replace('_', '-')}: expected {kind.__name__}, got {raw!r}") from None


def parse_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig` with precedence flags > file > defaults.

    ``overrides`` values may be raw strings (from the command line) or typed values.
    """
    values: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"config {path}: {exc}") from None
        for key, value in doc.items():
            if key not in _FIELDS:
                raise InputError(f"unknown key {key}")
            values[key] = _check_type(key, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise InputError(f"unknown key {key}")
        from_cli = isinstance(value, str) or (isinstance(value, list) and all(isinstance(v, str) for v in value))
        values[key] = _parse_flag(key, value) if from_cli else _check_type(key, value)
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(asdict(cfg))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _need(cfg: RunConfig, *keys: str) -> None:
    for k in keys:
        if not getattr(cfg, k):
            raise InputError(f"command needs --{k.replace('_', '-')}")


def _region_dim(records: Sequence[D.MemeRecord]) -> int:
    dims = {r.features.shape[1] for r in records}
    if len(dims) != 1:
        raise InputError(f"records disagree on region feature dimension: {sorted(dims)}")
    return dims.pop()


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    records, _, meta = D.generate_synthetic(cfg.synthetic_spec())
    parts = D.split_dataset(records, cfg.split, seed=cfg.data_seed)
    for name, part in zip(("train", "val", "test"), parts):
        D.save_dataset(part, out / f"{name}.jsonl", meta={**meta, "split": name})
    vocab = D.build_vocab(parts[0], cfg.min_count)
    vocab.save(out / "vocab.txt")
    print(f"wrote {len(parts[0])}/{len(parts[1])}/{len(parts[2])} train/val/test records "
          f"(balance {D.label_balance(records):.3f}) and {len(vocab)} vocab tokens to {out}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "train_path", "vocab_path")
    train_set = D.load_dataset(cfg.train_path)
    val_set = D.load_dataset(cfg.val_path) if cfg.val_path else None
    vocab = D.Vocab.load(cfg.vocab_path)
    mcfg = cfg.model_config(len(vocab), _region_dim(train_set))
    res = TR.train_run(mcfg, cfg.train_config(), train_set, val_set, vocab)
    TR.save_checkpoint(res.checkpoint, out / "checkpoint.hmpa")
    D.atomic_write_text(out / "metrics.jsonl", "".join(json.dumps(e) + "\n" for e in res.log))
    if res.val_predictions is not None:
        E.save_predictions(res.val_predictions, out / "val_predictions.jsonl")
    best = "n/a" if res.best_val_auroc is None else f"{res.best_val_auroc:.4f}"
    print(f"trained seed {cfg.seed}: best val AUROC {best} at step {res.checkpoint.step}; "
          f"checkpoint -> {out / 'checkpoint.hmpa'}")


def _report(preds: E.Predictions, out: Path, stem: str) -> None:
    if preds.labels is None:
        print(f"{len(preds)} unlabeled predictions written")
        return
    rep = E.evaluate(preds)
    D.atomic_write_text(out / f"{stem}.json", json.dumps(rep.to_dict(), indent=2) + "\n")
    print(rep.summary())


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "checkpoint", "data_path")
    ckpt = TR.load_checkpoint(cfg.checkpoint)
    if cfg.vocab_path:
        vocab = D.Vocab.load(cfg.vocab_path)
    elif "vocab" in ckpt.extra:
        vocab = D.Vocab(ckpt.extra["vocab"])
    else:
        raise InputError("checkpoint carries no vocab; pass --vocab-path")
    records = D.load_dataset(cfg.data_path)
    items = M.encode_records(ckpt.model_config, vocab, records)
    proba = M.predict_proba_items(ckpt.model_config, ckpt.params, items)
    labels = None if any(r.label is None for r in records) else [r.label for r in records]
    preds = E.Predictions([r.id for r in records], proba, labels)
    E.save_predictions(preds, out / "predictions.jsonl")
    _report(preds, out, "report")


def cmd_ensemble(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "predictions")
    runs = [E.load_predictions(p) for p in cfg.predictions]
    avg = E.ensemble_average(runs)
    E.save_predictions(avg, out / "ensemble_predictions.jsonl")
    if avg.labels is not None:
        members = [E.evaluate(r) for r in runs]
        rep = E.evaluate(avg)
        summary = {
            "ensemble": rep.to_dict(),
            "members": [m.to_dict() for m in members],
            "mean_member_auroc": float(np.mean([m.auroc for m in members])),
            "mean_member_nll": float(np.mean([m.nll for m in members])),
        }
        D.atomic_write_text(out / "ensemble_report.json", json.dumps(summary, indent=2) + "\n")
        print(f"ensemble of {len(runs)}: {rep.summary()}  "
              f"(mean member AUROC {summary['mean_member_auroc']:.4f}, NLL {summary['mean_member_nll']:.4f})")
    else:
        print(f"ensemble of {len(runs)} written ({len(avg)} ids, unlabeled)")


def gradcheck_setup(cfg: RunConfig, num_records: int = 4):
    """Toy paired/cls model (d=16, L=2, H=4, K=4) with a non-zero head and a fixed mini-batch."""
    spec = D.SyntheticSpec(num_samples=max(4, num_records), num_regions=4, feat_dim=8, seed=cfg.data_seed)
    records, vocab, _ = D.generate_synthetic(spec)
    records = records[:num_records]
    mcfg = M.ModelConfig(vocab_size=len(vocab), max_text_len=cfg.max_text_len, max_regions=4,
                         region_feat_dim=8, hidden_dim=16, num_layers=2, num_heads=4,
                         head_kind=cfg.head_kind, share_pool=cfg.share_pool, init_std=0.2)
    params = M.init_params(mcfg, cfg.seed, zero_head=False)
    items = M.encode_records(mcfg, vocab, records)
    labels = np.array([r.label for r in records])

    def loss_fn():
        return TR.cross_entropy(M.forward_items(mcfg, params, items), labels)

    return mcfg, params, loss_fn


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    _, params, loss_fn = gradcheck_setup(cfg)
    rep = finite_diff_check(loss_fn, params, eps=cfg.gc_eps, tol=cfg.gc_tol, coords_per_array=cfg.gc_coords,
                            seed=cfg.seed)
    D.atomic_write_text(out / "gradcheck.json", json.dumps({
        "passed": rep.passed, "max_rel_error": rep.max_error, "tol": rep.tol, "eps": rep.eps,
        "per_array": rep.max_rel_error, "coords": rep.num_coords}, indent=2) + "\n")
    print(rep.summary())
    return 0 if rep.passed else 2


def cmd_roc(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "predictions")
    if len(cfg.predictions) != 1:
        raise InputError("roc takes exactly one predictions file")
    preds = E.load_predictions(cfg.predictions[0])
    curve = E.roc_curve(preds)
    E.save_roc_csv(curve, out / "roc.csv")
    print(f"{len(curve.thresholds)} ROC points, AUROC {E.auroc(preds):.4f} -> {out / 'roc.csv'}")


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "gradcheck": cmd_gradcheck,
    "roc": cmd_roc,
}


def run(command: str, cfg: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    try:
        if command not in _HANDLERS:
            raise InputError(f"unknown command {command!r}; expected one of {COMMANDS}")
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        D.atomic_write_text(out / "config.toml", dump_config(cfg))
        status = _HANDLERS[command](cfg, out)
        return 0 if status is None else int(status)
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MemePairError as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memepair", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="TOML file with flat key = value pairs")
    parser.add_argument("-v", "--verbose", action="store_true")
    for name in _FIELDS:
        flag = "--" + name.replace("_", "-")
        if _kind(name) is list:
            parser.add_argument(flag, dest=name, nargs="+", default=None)
        else:
            parser.add_argument(flag, dest=name, default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = {k: v for k, v in vars(ns).items() if k in _FIELDS and v is not None}
        cfg = parse_config(ns.config, overrides)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(ns.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
