"""Command line entry points.

Subcommands: train, generate, verify, cost, bench. Exit codes: 0 success,
1 runtime or verification failure, 2 usage or configuration error.

`train` and `bench` accept --config pointing at an INI file with [model],
[task], and [train] sections; keys mirror the long option names with
underscores. Explicit command line flags win over the file. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import statistics
import sys
import time
from dataclasses import asdict

import numpy as np

from .checkpoint import load_checkpoint
from .costmodel import (
    ARCH_ROWS,
    HardwareProfile,
    default_profile,
    report_csv,
    report_text,
    standin_config,
    sweep,
)
from .decode import generate, prefill
from .errors import CheckpointError, ConfigError, DivergenceError, ParloopError
from .model import ModelConfig, forward, init_parameters
from .tasks import eval_accuracy, make_task
from .train import TrainConfig, train
from .verify import run_all

# INI key -> (namespace dest, type); bool values accept 1/0, true/false,
# yes/no, on/off
MODEL_KEYS = {
    "d_model": ("d_model", int),
    "n_layers": ("n_layers", int),
    "n_heads": ("n_heads", int),
    "n_kv_heads": ("n_kv_heads", int),
    "d_ff": ("d_ff", int),
    "mode": ("mode", str),
    "loops": ("loops", int),
    "window": ("window", int),
    "gswa": ("gswa", bool),
    "per_loop_gates": ("per_loop_gates", bool),
    "weight_tying": ("weight_tying", bool),
    "max_seq": ("max_seq", int),
}
TASK_KEYS = {
    "name": ("task", str),
    "src_len": ("src_len", int),
    "symbols": ("symbols", int),
    "modulus": ("modulus", int),
    "triples": ("triples", int),
    "seq_len": ("seq_len", int),
}
TRAIN_KEYS = {
    "steps": ("steps", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "warmup_steps": ("warmup_steps", int),
    "clip_norm": ("clip_norm", float),
    "seed": ("seed", int),
}
SECTIONS = {"model": MODEL_KEYS, "task": TASK_KEYS, "train": TRAIN_KEYS}

TASK_OPTION_NAMES = {
    "copy": ("src_len", "symbols"),
    "reverse": ("src_len", "symbols"),
    "modular_add": ("modulus", "triples"),
    "char_lm": ("seq_len",),
}


def positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_model_args(sp) -> None:
    g = sp.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--n-layers", type=int, default=2)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--n-kv-heads", type=int, default=None)
    g.add_argument("--d-ff", type=int, default=None)
    g.add_argument("--mode", choices=["vanilla", "vanilla_loop", "plt"],
                   default="plt")
    g.add_argument("--loops", type=int, default=2)
    g.add_argument("--window", type=int, default=4)
    g.add_argument("--gswa", action="store_true")
    g.add_argument("--per-loop-gates", action="store_true")
    g.add_argument("--no-weight-tying", dest="weight_tying",
                   action="store_false")
    g.add_argument("--max-seq", type=int, default=128)


def _add_task_args(sp) -> None:
    g = sp.add_argument_group("task")
    g.add_argument("--task", choices=sorted(TASK_OPTION_NAMES), default="copy")
    g.add_argument("--src-len", type=int, default=None)
    g.add_argument("--symbols", type=int, default=None)
    g.add_argument("--modulus", type=int, default=None)
    g.add_argument("--triples", type=int, default=None)
    g.add_argument("--seq-len", type=int, default=None)


def build_parser():
    p = argparse.ArgumentParser(
        prog="parloop",
        description="Looped-transformer reference implementation: training, "
                    "parallel decoding, verification, and decode cost analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a model on a synthetic task")
    sp.add_argument("--config", default=None, help="INI file with defaults")
    _add_model_args(sp)
    _add_task_args(sp)
    g = sp.add_argument_group("training")
    g.add_argument("--steps", type=positive_int, default=200)
    g.add_argument("--batch-size", type=positive_int, default=32)
    g.add_argument("--lr", type=float, default=3e-3)
    g.add_argument("--warmup-steps", type=int, default=20)
    g.add_argument("--clip-norm", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="decode from a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt", help="space-separated token ids")
    src.add_argument("--text", help="utf-8 text prompt (byte-level models)")
    sp.add_argument("--tokens", type=positive_int, default=32)
    sp.add_argument("--temperature", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--stats", action="store_true",
                    help="print pass and cache counters to stderr")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("verify", help="run the invariant checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tolerance", type=float, default=1e-9)
    sp.add_argument("--skip-grad", action="store_true",
                    help="skip the finite-difference gradient check")
    sp.add_argument("--checkpoint", default=None,
                    help="also require this checkpoint to load cleanly")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("cost", help="analytical decode cost comparison")
    sp.add_argument("--batch", type=positive_int, nargs="+",
                    default=[4, 8, 16, 32, 64])
    sp.add_argument("--context", type=positive_int, default=5000)
    sp.add_argument("--arch", choices=ARCH_ROWS, nargs="+", default=list(ARCH_ROWS))
    sp.add_argument("--csv", action="store_true")
    g = sp.add_argument_group("hardware profile overrides")
    g.add_argument("--bandwidth", type=float, default=None, help="bytes/s")
    g.add_argument("--peak-flops", type=float, default=None)
    g.add_argument("--weight-bytes", type=float, default=None,
                   help="bytes per parameter")
    g.add_argument("--kv-bytes", type=float, default=None,
                   help="bytes per cached position per layer")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("bench", help="wall-clock decode timing")
    sp.add_argument("--config", default=None, help="INI file with defaults")
    _add_model_args(sp)
    sp.add_argument("--vocab", type=positive_int, default=256)
    sp.add_argument("--steps", type=positive_int, default=64)
    sp.add_argument("--prompt-len", type=positive_int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)

    return p


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def apply_ini(args, argv: list) -> None:
    """Fold INI values into args; explicit command line flags keep priority."""
    cp = configparser.ConfigParser()
    if not cp.read(args.config):
        raise ConfigError(f"cannot read config file {args.config!r}")
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        spec = SECTIONS[section]
        for key, raw in cp[section].items():
            if key not in spec:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            dest, typ = spec[key]
            if not hasattr(args, dest):
                raise ConfigError(
                    f"key {key!r} in [{section}] does not apply to this command")
            # the tying switch is exposed as a negative flag
            flag = ("--no-weight-tying" if dest == "weight_tying"
                    else "--" + dest.replace("_", "-"))
            if any(a == flag or a.startswith(flag + "=") for a in argv):
                continue
            try:
                if typ is bool:
                    value = cp[section].getboolean(key)
                else:
                    value = typ(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {e}") from e
            setattr(args, dest, value)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _task_from_args(args):
    kw = {}
    for name in TASK_OPTION_NAMES[args.task]:
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    for task, names in TASK_OPTION_NAMES.items():
        if task == args.task:
            continue
        for name in set(names) - set(TASK_OPTION_NAMES[args.task]):
            if getattr(args, name) is not None:
                raise ConfigError(f"--{name.replace('_', '-')} does not apply "
                                  f"to task {args.task!r}")
    return make_task(args.task, **kw)


def _model_from_args(args, vocab: int) -> ModelConfig:
    return ModelConfig(
        vocab=vocab, d_model=args.d_model, n_layers=args.n_layers,
        n_heads=args.n_heads, n_kv_heads=args.n_kv_heads, d_ff=args.d_ff,
        mode=args.mode, loops=args.loops, window=args.window, gswa=args.gswa,
        per_loop_gates=args.per_loop_gates, weight_tying=args.weight_tying,
        max_seq=args.max_seq)


def cmd_train(args, argv) -> int:
    if args.config:
        apply_ini(args, argv)
    task = _task_from_args(args)
    if task.seq_len > args.max_seq:
        raise ConfigError(f"task sequences ({task.seq_len}) exceed "
                          f"--max-seq ({args.max_seq})")
    cfg = _model_from_args(args, task.vocab)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                       warmup_steps=args.warmup_steps, clip_norm=args.clip_norm,
                       seed=args.seed,
                       log_path=os.path.join(args.out, "loss.csv"),
                       checkpoint_path=os.path.join(args.out, "model.ckpt"))
    os.makedirs(args.out, exist_ok=True)
    params = init_parameters(cfg, args.seed)
    result = train(params, task, tcfg)
    acc = eval_accuracy(lambda toks: forward(params, toks), task,
                        seed=args.seed + 1)
    manifest = {
        "command": "train",
        "model": asdict(cfg),
        "task": {"name": task.name, **task.params},
        "train": {k: v for k, v in asdict(tcfg).items()
                  if k not in ("log_path", "checkpoint_path")},
        "results": {"final_loss": result.final_loss, "accuracy": acc},
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"trained {task.name}: final_loss={result.final_loss:.6f} "
          f"accuracy={acc:.3f}")
    print(f"wrote {args.out}/model.ckpt, loss.csv, manifest.json")
    return 0


def cmd_generate(args, argv) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    vocab = params.config.vocab
    if args.text is not None:
        prompt = np.frombuffer(args.text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    else:
        try:
            prompt = np.array([int(t) for t in args.prompt.split()], dtype=np.int64)
        except ValueError as e:
            raise ConfigError(f"prompt must be space-separated integers: {e}") from e
    if prompt.size == 0:
        raise ConfigError("empty prompt")
    if prompt.min() < 0 or prompt.max() >= vocab:
        raise ConfigError(f"prompt ids must be in [0, {vocab})")
    sess = prefill(params, prompt)
    toks = generate(sess, args.tokens, temperature=args.temperature,
                    seed=args.seed)
    if args.text is not None:
        print(bytes(t & 0xFF for t in toks).decode("utf-8", errors="replace"))
    else:
        print(" ".join(str(t) for t in toks))
    if args.stats:
        counts = sess.kv_entry_count()
        print(f"passes/token={sess.passes_per_token:.2f} steps={sess.steps} "
              f"kv_shared={counts['shared']} kv_window={counts['window']} "
              f"kv_per_loop={counts['per_loop']}", file=sys.stderr)
    return 0


def cmd_verify(args, argv) -> int:
    if args.checkpoint is not None:
        load_checkpoint(args.checkpoint)  # CheckpointError -> exit 2
        print(f"pass  checkpoint_load          {args.checkpoint}")
    results = run_all(seed=args.seed, tolerance=args.tolerance,
                      include_grad=not args.skip_grad)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_cost(args, argv) -> int:
    cfg = standin_config()
    base = default_profile()
    profile = HardwareProfile(
        name=base.name,
        mem_bandwidth=args.bandwidth or base.mem_bandwidth,
        peak_flops=args.peak_flops or base.peak_flops,
        weight_bytes_per_param=args.weight_bytes or base.weight_bytes_per_param,
        kv_bytes_per_entry=args.kv_bytes or base.kv_bytes_per_entry,
        act_bytes_per_value=base.act_bytes_per_value)
    costs = sweep(cfg, profile, args.batch, args.context, tuple(args.arch))
    print(report_csv(costs) if args.csv else report_text(costs), end="")
    if not args.csv:
        print()
    return 0


def cmd_bench(args, argv) -> int:
    if args.config:
        apply_ini(args, argv)
    cfg = _model_from_args(args, args.vocab)
    if args.prompt_len + args.steps > cfg.max_seq:
        raise ConfigError(f"--prompt-len + --steps must fit --max-seq "
                          f"({cfg.max_seq})")
    params = init_parameters(cfg, args.seed)
    rng = np.random.default_rng(args.seed)
    prompt = rng.integers(0, cfg.vocab, size=args.prompt_len)
    sess = prefill(params, prompt)
    times = []
    logits = sess.last_logits
    for _ in range(args.steps):
        tok = int(np.argmax(logits))
        t0 = time.perf_counter()
        logits = sess.step(tok)
        times.append(time.perf_counter() - t0)
    med = statistics.median(times) * 1e3
    p90 = statistics.quantiles(times, n=10)[-1] * 1e3 if len(times) >= 10 \
        else max(times) * 1e3
    print(f"mode={cfg.mode} loops={cfg.loops} steps={args.steps} "
          f"median={med:.3f}ms p90={p90:.3f}ms passes/token={sess.passes_per_token:.1f}")
    return 0


# ---------------------------------------------------------------------------


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, argv)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ParloopError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
