"""Command-line entry point.

Subcommands: ``gen-model``, ``gen-corpus``, ``train``, ``bench``,
``verify-lossless``, ``sweep``.  Exit codes are a stable contract:
0 success, 1 losslessness/verification failure, 2 usage or config error.
Every command is deterministic given its ``--seed`` (timing fields aside).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import serialize
from .adapter import init_adapter
from .engine import DraftPolicy, generate
from .errors import LosslessnessError, SelfspecError
from .metrics import AcceptanceRecord, aggregate
from .model import DESK_CONFIG, ModelConfig, TargetWeights, gen_model, vanilla_greedy_decode
from .simulator import calibrate_latency, sweep
from .training import TrainConfig, train_adapter


class UsageError(SelfspecError, ValueError):
    """Bad flags or unusable inputs; maps to exit code 2."""


def _parse_grid(text: str, kind) -> list:
    try:
        values = [kind(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: {exc}") from exc
    if not values:
        raise UsageError(f"grid {text!r} is empty")
    return values


def _load_model(args) -> TargetWeights:
    path = Path(args.model)
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    _, weights = serialize.load_weights(path)
    exit_layer = getattr(args, "exit_layer", None)
    if exit_layer is not None:
        weights = TargetWeights(
            config=weights.config.with_exit_layer(exit_layer),
            token_embedding=weights.token_embedding,
            layers=weights.layers,
            final_norm=weights.final_norm,
            lm_head=weights.lm_head,
        )
    if getattr(args, "f64", False):
        weights = weights.astype(np.float64)
    return weights


def _load_adapter(args):
    path = Path(args.adapter)
    if not path.is_file():
        raise UsageError(f"adapter file not found: {path}")
    adapter = serialize.load_adapter(path)
    if getattr(args, "f64", False):
        adapter = adapter.astype(np.float64)
    return adapter


def _load_corpus(args) -> list[list[int]]:
    path = Path(args.corpus)
    if not path.is_file():
        raise UsageError(f"corpus file not found: {path}")
    sequences = serialize.read_corpus(path)
    if not sequences:
        raise UsageError(f"corpus is empty: {path}")
    return sequences


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_gen_model(args) -> int:
    if args.heads < 1 or args.d_model % args.heads != 0:
        raise UsageError(f"--heads must divide --d-model, got {args.heads} and {args.d_model}")
    cfg = ModelConfig(
        vocab_size=args.vocab,
        d_model=args.d_model,
        n_heads=args.heads,
        head_dim=args.d_model // args.heads,
        n_layers=args.layers,
        ffn_hidden=args.ffn_hidden,
        exit_layer=args.exit_layer,
        rope_theta=args.rope_theta,
        max_seq_len=args.max_seq_len,
    )
    serialize.save_weights(gen_model(cfg, args.seed), args.out)
    print(f"wrote model ({cfg.n_layers} layers, d={cfg.d_model}, V={cfg.vocab_size}) to {args.out}")
    return 0


def cmd_gen_corpus(args) -> int:
    sequences = corpus_mod.gen_corpus(
        vocab_size=args.vocab,
        n_seqs=args.n_seqs,
        len_range=(args.len_min, args.len_max),
        seed=args.seed,
    )
    serialize.write_corpus(sequences, args.out)
    print(f"wrote {len(sequences)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    model = _load_model(args)
    sequences = _load_corpus(args)
    cfg = TrainConfig(
        learning_rate=args.lr,
        betas=(args.beta1, args.beta2),
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch=args.batch,
        seed=args.seed,
    )
    adapter = init_adapter(model, args.seed)
    trained, curve = train_adapter(model, adapter, sequences, cfg)
    serialize.save_adapter(trained, args.out)
    if args.loss_out:
        lines = ["epoch,mean_loss"] + [f"{i + 1},{loss:.8f}" for i, loss in enumerate(curve)]
        Path(args.loss_out).write_text("\n".join(lines) + "\n")
    print(
        f"trained adapter for {cfg.epochs} epochs: "
        f"loss {curve[0]:.4f} -> {curve[-1]:.4f}; wrote {args.out}"
    )
    return 0


def _bench_prompts(model: TargetWeights, sequences, n_tokens: int) -> list[list[int]]:
    limit = model.config.max_seq_len - n_tokens
    if limit < 1:
        raise UsageError(f"n_tokens {n_tokens} leaves no room for prompts")
    prompts = [seq[:limit] for seq in sequences]
    for i, prompt in enumerate(prompts):
        if any(not 0 <= t < model.config.vocab_size for t in prompt):
            raise UsageError(f"corpus line {i + 1} has ids outside the model vocabulary")
    return prompts


def _divergence_report(prompt_idx, result, reference) -> str:
    pos = next(
        (i for i, (a, b) in enumerate(zip(result.tokens, reference)) if a != b),
        min(len(result.tokens), len(reference)),
    )
    emitted = 0
    round_idx = len(result.rounds) - 1
    for i, trace in enumerate(result.rounds):
        emitted += trace.emitted
        if pos < emitted:
            round_idx = i
            break
    return (
        f"losslessness violation on prompt {prompt_idx}: first divergence at "
        f"position {pos} (round {round_idx}): speculative="
        f"{result.tokens[pos:pos + 4]} vanilla={reference[pos:pos + 4]}"
    )


def cmd_bench(args) -> int:
    model = _load_model(args)
    adapter = _load_adapter(args)
    prompts = _bench_prompts(model, _load_corpus(args), args.n_tokens)
    policy = DraftPolicy(eta=args.eta, gamma_max=args.gamma)
    lat = calibrate_latency(model, adapter, reps=3, seed=args.seed, gamma=max(args.gamma, 1))

    records = []
    vanilla_seconds = []
    spec_seconds = []
    total_sim = 0.0
    for idx, prompt in enumerate(prompts):
        t0 = time.perf_counter()
        reference = vanilla_greedy_decode(model, prompt, args.n_tokens)
        vanilla_seconds.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        result = generate(model, adapter, policy, prompt, args.n_tokens)
        spec_seconds.append(time.perf_counter() - t0)
        if result.tokens != reference:
            raise LosslessnessError(_divergence_report(idx, result, reference))
        records.append(AcceptanceRecord(result.emitted_per_round))
        total_sim += sum(lat.round_cost(t.drafted) for t in result.rounds)

    report = aggregate(
        records,
        vanilla_seconds=vanilla_seconds,
        spec_seconds=spec_seconds,
        subtask=Path(args.corpus).stem,
    )
    report.simulated_speedup = (report.total_tokens * lat.c_big) / total_sim
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.out)
    return 0


def cmd_verify_lossless(args) -> int:
    model = _load_model(args)
    adapter = _load_adapter(args)
    prompts = _bench_prompts(model, _load_corpus(args), args.n_tokens)
    etas = _parse_grid(args.etas, float)
    gammas = _parse_grid(args.gammas, int)

    checked = 0
    for idx, prompt in enumerate(prompts):
        reference = vanilla_greedy_decode(model, prompt, args.n_tokens)
        for eta in etas:
            for gamma in gammas:
                policy = DraftPolicy(eta=eta, gamma_max=gamma)
                result = generate(model, adapter, policy, prompt, args.n_tokens)
                checked += 1
                if result.tokens != reference:
                    print(
                        f"FAIL eta={eta} gamma={gamma}: "
                        + _divergence_report(idx, result, reference)
                    )
                    return 1
    print(f"PASS: {checked} runs token-identical to the greedy reference")
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args)
    adapter = _load_adapter(args)
    prompts = _bench_prompts(model, _load_corpus(args), args.n_tokens)
    etas = _parse_grid(args.etas, float)
    gammas = _parse_grid(args.gammas, int)
    lat = calibrate_latency(
        model, adapter, reps=3, seed=args.seed, gamma=max(max(gammas), 1)
    )
    report = sweep(model, adapter, prompts, etas, gammas, lat, n_tokens=args.n_tokens)
    _emit(report.to_csv(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfspec",
        description="Self-speculative greedy decoding benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write synthetic frozen model weights")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=DESK_CONFIG["vocab_size"])
    p.add_argument("--d-model", dest="d_model", type=int, default=DESK_CONFIG["d_model"])
    p.add_argument("--heads", type=int, default=DESK_CONFIG["n_heads"])
    p.add_argument("--layers", type=int, default=DESK_CONFIG["n_layers"])
    p.add_argument("--ffn-hidden", dest="ffn_hidden", type=int, default=DESK_CONFIG["ffn_hidden"])
    p.add_argument("--exit-layer", dest="exit_layer", type=int, default=DESK_CONFIG["exit_layer"])
    p.add_argument("--rope-theta", dest="rope_theta", type=float, default=DESK_CONFIG["rope_theta"])
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=DESK_CONFIG["max_seq_len"])
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-corpus", help="write a seeded order-2 Markov corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=DESK_CONFIG["vocab_size"])
    p.add_argument("--n-seqs", dest="n_seqs", type=int, default=64)
    p.add_argument("--len-min", dest="len_min", type=int, default=8)
    p.add_argument("--len-max", dest="len_max", type=int, default=24)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="distill the draft adapter on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-out", dest="loss_out", default=None)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    def decoding_flags(p):
        p.add_argument("--model", required=True)
        p.add_argument("--adapter", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--n-tokens", dest="n_tokens", type=int, default=64)
        p.add_argument("--exit-layer", dest="exit_layer", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--f64", action="store_true", help="run inference in float64")

    p = sub.add_parser("bench", help="vanilla vs speculative benchmark over a corpus")
    decoding_flags(p)
    p.add_argument("--eta", type=float, default=0.6)
    p.add_argument("--gamma", type=int, default=6)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify-lossless", help="assert token-exact greedy equality on a grid")
    decoding_flags(p)
    p.add_argument("--etas", default="0,0.3,0.6,1.0")
    p.add_argument("--gammas", default="0,2,6")
    p.set_defaults(func=cmd_verify_lossless)

    p = sub.add_parser("sweep", help="eta/gamma policy sweep with the latency model")
    decoding_flags(p)
    p.add_argument("--etas", default="0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--gammas", default="2,4,6")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except LosslessnessError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (SelfspecError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
