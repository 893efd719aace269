"""Command-line entry point tying the library into experiment workflows.

Exit codes: 0 success, 2 config/input error, 3 I/O error, 4 numeric abort.
All randomness flows from explicit --seed flags; no wall-clock entropy.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import eval as eval_mod
from . import stats as stats_mod
from . import synthdata, training

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"invalid JSON in {path}: {exc}") from exc


def cmd_gen_data(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    try:
        spec = synthdata.CorpusSpec.from_dict(cfg)
        corpus = synthdata.generate_corpus(spec, args.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    try:
        synthdata.save_corpus(corpus, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    print(f"train utterances: {len(corpus.train)}")
    print(f"one-shot utterances: {len(corpus.one_shot)}")
    print(f"eval prompts: {len(corpus.prompts)}")
    return 0


def _train_config(config_path, corpus_dir, seed=None) -> training.TrainConfig:
    cfg = _load_json(config_path) if config_path else {}
    cfg["corpus"] = str(corpus_dir)
    if seed is not None:
        cfg["seed"] = seed
    try:
        return training.TrainConfig.from_dict(cfg)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def cmd_train(args) -> int:
    config = _train_config(args.config, args.corpus, args.seed)
    try:
        ckpt, log = training.train(config)
    except training.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(ckpt, out / "checkpoint.ckpt")
    log.write_tsv(out / "metrics.tsv")
    print(f"final_kl: {ckpt.final_kl:.6g}")
    print(f"final_recon: {ckpt.final_recon:.6g}")
    return 0


def cmd_sweep(args) -> int:
    grid_spec = _load_json(args.grid) if args.grid else {}
    base_dict = dict(grid_spec.get("base", {}))
    base_dict["corpus"] = str(args.corpus)
    try:
        base = training.TrainConfig.from_dict(base_dict)
        if "configs" in grid_spec:
            configs = []
            for override in grid_spec["configs"]:
                merged = {**dataclasses.asdict(base), **override}
                configs.append(training.TrainConfig.from_dict(merged))
        else:
            configs = training.default_grid(base)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    try:
        corpus = synthdata.load_corpus(args.corpus)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load corpus: {exc}") from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_rows, per_config = [], {}
    for s in range(args.seeds):
        seeded = [dataclasses.replace(c, seed=base.seed + s) for c in configs]
        rows = training.sweep(seeded, corpus=corpus,
                              checkpoint_dir=out / f"seed{base.seed + s}")
        for cfg, row in zip(seeded, rows):
            all_rows.append(row)
            per_config.setdefault((row.arch, row.K), []).append(row)
    training.write_sweep_tsv(all_rows, out / "sweep.tsv")

    lines = [training.SWEEP_HEADER]
    for (arch, k), rows in per_config.items():
        ok = [r for r in rows if r.status == "ok"]
        if ok:
            lines.append(
                f"{arch}\t{k}"
                f"\t{statistics.median(r.final_kl for r in ok):.10g}"
                f"\t{statistics.median(r.final_recon for r in ok):.10g}"
                f"\tok({len(ok)}/{len(rows)})")
        else:
            lines.append(f"{arch}\t{k}\tnan\tnan\tfailed(0/{len(rows)})")
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")

    if not any(r.status == "ok" for r in all_rows):
        print("all sweep runs failed", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"sweep rows: {len(all_rows)}")
    return 0


def _load_checkpoint_model(path):
    try:
        ckpt = training.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    return training.model_from_checkpoint(ckpt)


def _resolve_prompt(corpus, spec_str):
    """A prompt is an eval-prompt id, an utterance id, or comma-separated
    phoneme ids."""
    try:
        return corpus.prompt(spec_str)
    except KeyError:
        pass
    try:
        return corpus.utterance(spec_str).phonemes
    except KeyError:
        pass
    try:
        return [int(tok) for tok in spec_str.split(",")]
    except ValueError:
        raise CliError(EXIT_CONFIG,
                       f"unknown prompt {spec_str!r}") from None


def cmd_synth(args) -> int:
    model = _load_checkpoint_model(args.checkpoint)
    try:
        corpus = synthdata.load_corpus(args.corpus)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load corpus: {exc}") from exc
    try:
        reference = corpus.utterance(args.reference)
    except KeyError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    phonemes = _resolve_prompt(corpus, args.prompt)
    if any(not (0 <= p < corpus.spec.vocab_size) for p in phonemes):
        raise CliError(EXIT_CONFIG, "phoneme id outside vocabulary")
    n_frames = synthdata.utterance_frames(phonemes, corpus.spec)
    mel = eval_mod.one_shot_synthesize(model, reference.mel, phonemes,
                                       n_frames)
    synthdata.write_mels(Path(args.out), mel)
    est = synthdata.style_oracle(mel, corpus.spec, phonemes=phonemes)
    print(f"a_hat: {est.a:.6g}")
    print(f"b_hat: {est.b:.6g}")
    return 0


def cmd_eval(args) -> int:
    model = _load_checkpoint_model(args.checkpoint)
    try:
        corpus = synthdata.load_corpus(args.corpus)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load corpus: {exc}") from exc
    results, summary = eval_mod.transfer_report(model, corpus)
    eval_mod.write_report(results, summary, args.out)
    print(f"report rows: {len(results)}")
    print(f"monotone: {summary['monotone']}")
    return 0


def cmd_mushra(args) -> int:
    try:
        responses = stats_mod.read_responses_csv(args.responses)
    except stats_mod.ResponseParseError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats_mod.write_aggregate_tsv(
        stats_mod.aggregate(responses, ("system",)),
        out / "summary_by_system.tsv")
    stats_mod.write_aggregate_tsv(
        stats_mod.aggregate(responses, ("system", "intensity")),
        out / "summary_by_system_intensity.tsv")

    families = {"all": responses}
    for level in stats_mod.INTENSITIES:
        slice_ = [r for r in responses if r.intensity == level]
        if slice_:
            families[level] = slice_
    tests, total_dropped = {}, 0
    for name, family in families.items():
        outcomes, dropped = stats_mod.mushra_compare(family, args.alpha)
        total_dropped += dropped
        tests[name] = [dataclasses.asdict(o) for o in outcomes]
    payload = {"question": args.question, "alpha": args.alpha,
               "dropped_cells": total_dropped, "families": tests}
    (out / "tests.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    n_rejected = sum(o["reject"] for fam in tests.values() for o in fam)
    print(f"families: {len(tests)}; rejected comparisons: {n_rejected}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hfvae",
        description="Householder-flow VAE synthesizer: corpus generation, "
                    "training, one-shot synthesis and MUSHRA statistics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="CorpusSpec overrides (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="TrainConfig overrides (JSON)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train a grid of configurations")
    p.add_argument("--grid", help="JSON with 'base' and optional 'configs'")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="one-shot synthesis of one prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--reference", required=True, help="utterance id")
    p.add_argument("--prompt", required=True,
                   help="prompt id, utterance id, or comma-separated ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="one-shot transfer report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mushra", help="aggregate and test a response table")
    p.add_argument("--responses", required=True, help="CSV file")
    p.add_argument("--question", default="naturalness")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mushra)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
