"""Command-line front end: corpus synthesis, mixing, training, separation,
evaluation, and the analytic diagnostics.

Every tunable is addressable as a dotted config key (see DEFAULTS); values
merge as defaults < config file < --set overrides < dedicated flags. The
merged configuration is echoed next to each command's artifacts so any run
can be reproduced from its output directory.
"""

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS: dict[str, object] = {
    "synth.speakers": 12,
    "synth.utts": 20,
    "synth.dur": 3.0,
    "synth.seed": 0,
    "mix.train_min": 6.0,
    "mix.valid_min": 2.0,
    "mix.test_min": 2.0,
    "mix.snr_lo": -3.0,
    "mix.snr_hi": 3.0,
    "mix.seed": 0,
    "stft.win_len": 256,
    "stft.hop": 64,
    "stft.fft_size": 256,
    "arch.input_dim": 129,
    "arch.layers": 4,
    "arch.hidden": 300,
    "arch.embed_dim": 20,
    "arch.cell": "gru",
    "train.lr0": 1e-3,
    "train.patience": 3,
    "train.lr_min": 1e-6,
    "train.epochs": 50,
    "train.batch_size": 8,
    "train.grad_clip": 200.0,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.seed": 0,
    "separate.n_speakers": 2,
    "separate.cluster": "gmm",
    "separate.seed": 0,
    "eval.algo": "gmm",
    "eval.split": "test",
    "eval.proj_len": 512,
    "eval.sdr_cap": 100.0,
    "eval.seed": 0,
    "gradcheck.seed": 0,
    "gradcheck.step": 1e-5,
}


class ConfigError(Exception):
    """Bad key, value, or missing input; maps to exit code 2."""


@dataclass
class CommandOutcome:
    exit_code: int = 0
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    """Merge defaults, a key=value file, and --set overrides; reject unknowns."""
    cfg = dict(DEFAULTS)
    entries: list[tuple[str, str]] = []
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries.append((key.strip(), value.strip()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        entries.append((key.strip(), value.strip()))
    for key, value in entries:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        cfg[key] = _coerce(key, value)
    return cfg


def echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key}={cfg[key]}\n")


def _apply_flags(cfg: dict, args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _arch_from(cfg: dict):
    from .network import ArchSpec

    try:
        return ArchSpec(input_dim=cfg["arch.input_dim"], num_layers=cfg["arch.layers"],
                        hidden_per_direction=cfg["arch.hidden"],
                        embed_dim=cfg["arch.embed_dim"], cell_kind=cfg["arch.cell"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _stft_from(cfg: dict):
    from .dsp import StftConfig

    try:
        return StftConfig(win_len=cfg["stft.win_len"], hop=cfg["stft.hop"],
                          fft_size=cfg["stft.fft_size"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(cfg: dict, args) -> CommandOutcome:
    from .corpus import synth_corpus

    out_dir = Path(args.out)
    table = synth_corpus(out_dir, n_speakers=cfg["synth.speakers"],
                         utts_per_speaker=cfg["synth.utts"],
                         dur=cfg["synth.dur"], seed=cfg["synth.seed"])
    echo_config(cfg, out_dir / "effective_config.txt")
    return CommandOutcome(
        artifacts=[str(out_dir)],
        summary=(f"synthesized {len(table.speakers)} speakers, "
                 f"{table.total_duration:.0f} s of audio in {out_dir}"))


def cmd_mix(cfg: dict, args) -> CommandOutcome:
    from .corpus import DatasetRecipe, build_dataset, scan_corpus

    corpus_dir = Path(args.corpus)
    if not corpus_dir.is_dir():
        raise ConfigError(f"mix.corpus: directory not found: {corpus_dir}")
    table = scan_corpus(corpus_dir)
    recipe = DatasetRecipe(train_s=60.0 * cfg["mix.train_min"],
                           valid_s=60.0 * cfg["mix.valid_min"],
                           test_s=60.0 * cfg["mix.test_min"],
                           snr_range=(cfg["mix.snr_lo"], cfg["mix.snr_hi"]),
                           seed=cfg["mix.seed"])
    out_dir = Path(args.out)
    manifest = build_dataset(table, recipe, out_dir)
    echo_config(cfg, out_dir / "effective_config.txt")
    counts = {s: len(manifest.split(s)) for s in ("train", "valid", "test")}
    return CommandOutcome(
        artifacts=[str(out_dir / "manifest.jsonl")],
        summary=f"built {counts} mixtures under {out_dir}")


def cmd_train(cfg: dict, args) -> CommandOutcome:
    from .pipeline import HyperParams, load_checkpoint, save_checkpoint, train

    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise ConfigError(f"train.manifest: file not found: {manifest}")
    try:
        hyper = HyperParams(lr0=cfg["train.lr0"], lr_halve_patience=cfg["train.patience"],
                            lr_min=cfg["train.lr_min"], epochs=cfg["train.epochs"],
                            batch_size=cfg["train.batch_size"],
                            grad_clip=cfg["train.grad_clip"], beta1=cfg["train.beta1"],
                            beta2=cfg["train.beta2"], eps=cfg["train.eps"],
                            seed=cfg["train.seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    arch = _arch_from(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    resume_from = None
    if args.resume:
        last_path = out_dir / "last.danc"
        if not last_path.is_file():
            raise ConfigError(f"--resume: no checkpoint at {last_path}")
        resume_from = load_checkpoint(last_path)

    def progress(row):
        print(f"epoch {row.epoch}: train {row.train_loss:.4f} "
              f"val {row.val_loss:.4f} lr {row.lr:.2e} ({row.seconds:.1f}s)")

    result = train(manifest, hyper, arch, stft_cfg=_stft_from(cfg),
                   resume_from=resume_from, progress=progress)
    save_checkpoint(result.best, out_dir / "checkpoint.danc")
    save_checkpoint(result.last, out_dir / "last.danc")
    result.log.to_csv(out_dir / "trainlog.csv")
    echo_config(cfg, out_dir / "effective_config.txt")
    best = result.best
    return CommandOutcome(
        artifacts=[str(out_dir / "checkpoint.danc"), str(out_dir / "trainlog.csv")],
        summary=(f"trained to epoch {result.last.epoch}; best validation loss "
                 f"{best.best_val_loss:.4f} at epoch {best.epoch}"))


def cmd_separate(cfg: dict, args) -> CommandOutcome:
    from .dsp import read_wav, write_wav
    from .pipeline import load_checkpoint, separate

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ConfigError(f"separate.checkpoint: file not found: {ckpt_path}")
    in_path = Path(args.input)
    if not in_path.is_file():
        raise ConfigError(f"separate.input: file not found: {in_path}")
    ckpt = load_checkpoint(ckpt_path)
    mixture = read_wav(in_path)
    outs = separate(mixture, ckpt, n_speakers=cfg["separate.n_speakers"],
                    algo=cfg["separate.cluster"], seed=cfg["separate.seed"])
    out_dir = Path(args.out_dir) if args.out_dir else in_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, wave in enumerate(outs, start=1):
        path = out_dir / f"{in_path.stem}_spk{i}.wav"
        write_wav(path, wave)
        paths.append(str(path))
    # Sigmoid masks need not partition the mixture; report the gap.
    import numpy as np

    total = np.sum([w.samples for w in outs], axis=0)
    residual = float(np.linalg.norm(total - mixture.samples)
                     / max(np.linalg.norm(mixture.samples), 1e-300))
    return CommandOutcome(
        artifacts=paths,
        summary=(f"wrote {len(paths)} sources to {out_dir} "
                 f"(sum-vs-mixture residual {residual:.3f})"))


def cmd_eval(cfg: dict, args) -> CommandOutcome:
    from .bsseval import EvalConfig, evaluate_set
    from .pipeline import load_checkpoint

    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise ConfigError(f"eval.manifest: file not found: {manifest}")
    algo = cfg["eval.algo"]
    ckpt = None
    if algo in ("kmeans", "gmm"):
        if not args.checkpoint:
            raise ConfigError(f"eval.algo={algo} requires --checkpoint")
        ckpt_path = Path(args.checkpoint)
        if not ckpt_path.is_file():
            raise ConfigError(f"eval.checkpoint: file not found: {ckpt_path}")
        ckpt = load_checkpoint(ckpt_path)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    summary = evaluate_set(manifest, ckpt, algo,
                           EvalConfig(proj_len=cfg["eval.proj_len"],
                                      sdr_cap=cfg["eval.sdr_cap"]),
                           out_csv, split=cfg["eval.split"], seed=cfg["eval.seed"])
    echo_config(cfg, out_csv.with_suffix(".config.txt"))
    if summary["count"] == 0:
        return CommandOutcome(artifacts=[str(out_csv)],
                              summary=f"no utterances in split {cfg['eval.split']!r}")
    line = (f"{algo} on {summary['count']} mixtures: mean SDR {summary['sdr']:.2f} dB, "
            f"SIR {summary['sir']:.2f} dB, SAR {summary['sar']:.2f} dB")
    return CommandOutcome(artifacts=[str(out_csv)], summary=line)


def cmd_count_params(cfg: dict, args) -> CommandOutcome:
    from .network import count_params

    total = count_params(_arch_from(cfg))
    return CommandOutcome(summary=str(total))


def cmd_gradcheck(cfg: dict, args) -> CommandOutcome:
    from .network import finite_difference_check

    max_err, per_tensor = finite_difference_check(seed=cfg["gradcheck.seed"],
                                                  step=cfg["gradcheck.step"])
    worst = max(per_tensor, key=per_tensor.get)
    ok = max_err < 1e-4
    return CommandOutcome(
        exit_code=0 if ok else 1,
        summary=(f"max relative gradient error {max_err:.3e} (worst tensor {worst}); "
                 f"{'PASS' if ok else 'FAIL'} at 1e-4"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="danet",
        description="Two-speaker separation with BGRU attractor embeddings "
                    "and GMM clustering.")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, dest="speakers")
    p.add_argument("--utts", type=int)
    p.add_argument("--dur", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("mix", help="build a two-speaker mixture dataset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-min", type=float, dest="train_min")
    p.add_argument("--valid-min", type=float, dest="valid_min")
    p.add_argument("--test-min", type=float, dest="test_min")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a separation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr0", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("separate", help="separate one mixture WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--speakers", type=int, dest="speakers")
    p.add_argument("--cluster", choices=["kmeans", "gmm"])
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="score a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--algo", choices=["kmeans", "gmm", "oracle_wfm",
                                      "oracle_ibm", "mixture"])
    p.add_argument("--split")
    p.add_argument("--proj-len", type=int, dest="proj_len")

    p = sub.add_parser("count-params", help="closed-form parameter count")
    p.add_argument("--cell", choices=["gru", "lstm"])
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--input-dim", type=int, dest="input_dim")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float)
    return parser


FLAG_MAPS = {
    "synth": {"speakers": "synth.speakers", "utts": "synth.utts",
              "dur": "synth.dur", "seed": "synth.seed"},
    "mix": {"train_min": "mix.train_min", "valid_min": "mix.valid_min",
            "test_min": "mix.test_min", "seed": "mix.seed"},
    "train": {"epochs": "train.epochs", "batch_size": "train.batch_size",
              "lr0": "train.lr0", "layers": "arch.layers", "hidden": "arch.hidden",
              "embed_dim": "arch.embed_dim", "seed": "train.seed"},
    "separate": {"speakers": "separate.n_speakers", "cluster": "separate.cluster",
                 "seed": "separate.seed"},
    "eval": {"algo": "eval.algo", "split": "eval.split", "proj_len": "eval.proj_len"},
    "count-params": {"cell": "arch.cell", "layers": "arch.layers",
                     "hidden": "arch.hidden", "embed_dim": "arch.embed_dim",
                     "input_dim": "arch.input_dim"},
    "gradcheck": {"seed": "gradcheck.seed", "step": "gradcheck.step"},
}

HANDLERS = {
    "synth": cmd_synth,
    "mix": cmd_mix,
    "train": cmd_train,
    "separate": cmd_separate,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        cfg = _apply_flags(cfg, args, FLAG_MAPS[args.command])
        outcome = HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if outcome.summary:
        print(outcome.summary)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
