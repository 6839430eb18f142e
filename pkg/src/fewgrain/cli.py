"""Command-line front end.

Subcommands: synth, select-freq, train, eval, gradcheck.  Exit codes:
0 success, 1 runtime or data failure, 2 usage or config error.  A flat
key=value config file can preset any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import data, dcm, episodic, mfn, pipeline, testkit
from . import tensor as T
from .backbone import BackboneConfig

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    """Bad flags or config values, as opposed to runtime/data failures."""


def read_config_file(path):
    """Flat key=value lines, `#` comments, blank lines ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, _, value = line.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def apply_config_file(parser, args_ns, argv):
    """Merge file values under explicit flags: file settings become parser
    defaults, then the command line is parsed again on top."""
    if not getattr(args_ns, "config", None):
        return args_ns
    file_vals = read_config_file(args_ns.config)
    sub = getattr(args_ns, "_sub", None) or parser
    valid = {a.dest: a for a in sub._actions}
    overrides = {}
    for key, value in file_vals.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        action = valid[key]
        if isinstance(action, (argparse._StoreTrueAction,
                               argparse._StoreFalseAction)):
            overrides[key] = value.lower() in ("1", "true", "yes")
        elif action.type is not None:
            overrides[key] = action.type(value)
        else:
            overrides[key] = value
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def add_model_flags(p):
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--side", type=int, default=84)
    p.add_argument("--m", type=int, default=12)
    p.add_argument("--u", type=int, default=5)
    p.add_argument("--v", type=int, default=5)
    p.add_argument("--loops", type=int, default=2)
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--no-mfn", action="store_true")
    p.add_argument("--no-bcc", action="store_true")
    p.add_argument("--no-dca", action="store_true")


def add_episode_flags(p):
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--metric", default="cosine", choices=episodic.METRICS)


def train_config_from_args(args):
    try:
        return _train_config(args)
    except ValueError as e:
        raise UsageError(str(e))


def _train_config(args):
    return episodic.TrainConfig(
        way=args.way, shot=args.shot, queries=args.queries,
        mu=args.mu, t=args.t, temperature=args.temperature,
        alpha=args.alpha, meta_batch=args.meta_batch,
        iterations=args.iters, metric=args.metric, seed=args.seed,
        loops=args.loops, use_mfn=not args.no_mfn, use_bcc=not args.no_bcc,
        use_dca=not args.no_dca, val_every=args.val_every,
        val_episodes=args.val_episodes, select_iters=args.select_iters,
        backbone=BackboneConfig(block_channels=args.channels,
                                num_blocks=args.blocks, input_side=args.side),
        mfn=mfn.MfnConfig(M=args.m, U=args.u, V=args.v))


def cmd_synth(args):
    try:
        spec = data.SynthSpec(num_classes=args.classes,
                              samples_per_class=args.per_class,
                              side=args.side, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))
    data.generate_synthetic(spec, args.out)
    print(f"manifest: {args.out}/manifest.txt")
    return 0


def cmd_select_freq(args):
    index = data.scan_dataset(args.data, args.split_file or
                              f"{args.data}/split.txt")
    base = train_config_from_args(args)
    fset, grid = mfn.select_frequency_indices(
        index, base, args.m, args.budget, args.seed)
    for row in grid:
        print(" ".join(f"{v:.4f}" for v in row))
    fset.save(args.out)
    print(f"frequency set: {args.out}")
    return 0


def cmd_train(args):
    index = data.scan_dataset(args.data, args.split_file or
                              f"{args.data}/split.txt")
    cfg = train_config_from_args(args)
    freq_set = mfn.FrequencyIndexSet.load(args.freq_file) \
        if args.freq_file else None
    if freq_set is not None:
        cfg.mfn.M = freq_set.M
    model, _ = episodic.meta_train(index, cfg, freq_set=freq_set, log=print)
    ckpt = data.Checkpoint(
        version=1, params=pipeline.state_dict(model),
        freq_set=model.mfn_params.freq_set,
        config=pipeline.config_to_dict(model.config))
    data.save_checkpoint(args.out, ckpt)
    print(f"checkpoint: {args.out}")
    return 0


def load_model(ckpt_path):
    ckpt = data.load_checkpoint(ckpt_path)
    config = pipeline.config_from_dict(ckpt.config)
    model = pipeline.init_model(config, seed=0, freq_set=ckpt.freq_set)
    pipeline.load_state(model, ckpt.params)
    return model


def cmd_eval(args):
    index = data.scan_dataset(args.data, args.split_file or
                              f"{args.data}/split.txt")
    model = load_model(args.ckpt)
    report = episodic.evaluate(
        index, model, episodes=args.episodes, N=args.way, K=args.shot,
        P=args.queries, metric=args.metric, seed=args.seed, jobs=args.jobs,
        split=args.split)
    print(f"acc={report.mean_acc:.9g}±{report.ci95_halfwidth:.9g}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.to_text())
        print(f"report: {args.out}")
    return 0


GRADCHECK_OPS = ("matmul", "conv2d", "conv3d", "maxpool2d", "batchnorm2d",
                 "l2_normalize", "softmax", "einsum2", "crisscross", "mfn")


def bn_loss(dt, probe):
    def loss(x, g, b):
        out = T.batchnorm2d(x, g, b, T.BatchNormState(3, dtype=dt), True)
        return T.tsum(out * probe)
    return loss


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    precision = args.precision
    threshold = 1e-3 if precision == 32 else 1e-5
    dt = np.float32 if precision == 32 else np.float64

    def t(*shape, scale=1.0):
        return T.Tensor((rng.standard_normal(shape) * scale).astype(dt))

    def probe(*shape):
        # fixed non-input weighting; keeps losses sensitive to inputs that
        # normalization would otherwise cancel out
        return T.Tensor(rng.standard_normal(shape).astype(dt))

    bn_probe = probe(2, 3, 4, 4)
    l2_probe = probe(2, 5)

    checks = {
        "matmul": (lambda a, b: T.tsum(T.matmul(a, b) * T.matmul(a, b)),
                   [t(3, 4), t(4, 5)]),
        "conv2d": (lambda x, w, b: T.tsum(T.relu(T.conv2d(x, w, b, padding=1))),
                   [t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)]),
        "conv3d": (lambda x, w, b: T.tsum(T.sigmoid(T.conv3d(x, w, b))),
                   [t(2, 2, 3, 5, 5), t(2, 2, 1, 3, 3), t(2)]),
        "maxpool2d": (lambda x: T.tsum(T.maxpool2d(x) * T.maxpool2d(x)),
                      [t(2, 3, 4, 4)]),
        "batchnorm2d": (bn_loss(dt, bn_probe),
                        [t(2, 3, 4, 4), t(3, scale=0.5), t(3)]),
        "l2_normalize": (lambda x: T.tsum(T.l2_normalize(x, axis=1) *
                                          l2_probe),
                         [T.Tensor((rng.standard_normal((2, 5)) + 2.0)
                                   .astype(dt))]),
        "softmax": (lambda x: T.tsum(T.softmax(x, axis=-1) *
                                     T.log_softmax(x, axis=-1)),
                    [t(3, 6)]),
        "einsum2": (lambda a, b: T.tsum(T.einsum2("bcij,bcaj->bija", a, b) *
                                        T.einsum2("bcij,bcaj->bija", a, b)),
                    [t(1, 2, 3, 3), t(1, 2, 3, 3)]),
    }

    def crisscross_loss(x, wq, bq, wk, bk, wv, bv):
        params = dcm.CrissCrossParams(
            *(T.Parameter(n, v) for n, v in
              zip("wq bq wk bk wv bv".split(), (wq, bq, wk, bk, wv, bv))))
        out = dcm.crisscross_step(x, params).tensor
        return T.tsum(out * out)

    checks["crisscross"] = (crisscross_loss,
                            [t(1, 4, 3, 3), t(1, 4, 1, 1), t(1),
                             t(1, 4, 1, 1), t(1), t(4, 4, 1, 1), t(4)])

    def mfn_loss(x):
        s = mfn.weighted_neighborhood(x, 3, 3)
        return T.tsum(s.tensor * s.tensor)

    checks["mfn"] = (mfn_loss, [t(2, 4, 3, 3)])

    worst_overall = 0.0
    failed = []
    for name in (args.ops or GRADCHECK_OPS):
        if name not in checks:
            raise ValueError(f"unknown gradcheck op {name!r}")
        closure, inputs = checks[name]
        err = testkit.gradcheck(closure, inputs, precision=precision,
                                max_elements=args.max_elements, rng=rng)
        status = "ok" if err <= threshold else "FAIL"
        print(f"{name}: worst_rel_err={err:.3g} {status}")
        worst_overall = max(worst_overall, err)
        if err > threshold:
            failed.append(name)
    print(f"worst={worst_overall:.3g} threshold={threshold:g}")
    return 0 if not failed else RUNTIME_ERROR


def build_parser():
    root = argparse.ArgumentParser(
        prog="fewgrain",
        description="Few-shot fine-grained classification toolkit")
    sub = root.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth, _sub=p)

    p = sub.add_parser("select-freq", help="score and pick frequency indices")
    common(p)
    add_model_flags(p)
    add_episode_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split-file")
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=10,
                   help="validation episodes per candidate")
    p.add_argument("--select-iters", type=int, default=20)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--mu", type=float, default=0.7)
    p.add_argument("--t", type=float, default=0.2)
    p.add_argument("--meta-batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--val-every", type=int, default=0)
    p.add_argument("--val-episodes", type=int, default=20)
    p.set_defaults(func=cmd_select_freq, _sub=p)

    p = sub.add_parser("train", help="meta-train and write a checkpoint")
    common(p)
    add_model_flags(p)
    add_episode_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split-file")
    p.add_argument("--out", required=True)
    p.add_argument("--freq-file", help="MFN-FREQ file from select-freq")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--mu", type=float, default=0.7)
    p.add_argument("--t", type=float, default=0.2)
    p.add_argument("--meta-batch", type=int, default=4)
    p.add_argument("--val-every", type=int, default=0)
    p.add_argument("--val-episodes", type=int, default=20)
    p.add_argument("--select-iters", type=int, default=20)
    p.set_defaults(func=cmd_train, _sub=p)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    common(p)
    add_episode_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split-file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=1200)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--out", help="EvalReport output path")
    p.set_defaults(func=cmd_eval, _sub=p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient sweep")
    common(p)
    p.add_argument("--precision", type=int, default=64, choices=(32, 64))
    p.add_argument("--max-elements", type=int, default=64)
    p.add_argument("--ops", nargs="*", help="subset of ops to check")
    p.set_defaults(func=cmd_gradcheck, _sub=p)
    return root


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = apply_config_file(parser, args, argv)
    except SystemExit as e:
        return USAGE_ERROR if e.code not in (0, None) else 0
    except (ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except UsageError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, KeyError, OSError, ArithmeticError,
            T.ShapeError, data.FileFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
