"""``darqn`` command line: train, eval, count-params, visualize.

Exit codes: 0 success, 1 usage/config error, 2 runtime error. The resolved
configuration is echoed to stderr (in re-parseable ``key = value`` form)
before any work starts; results go to stdout.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint, config
from .agent import MODELS, PROFILES, Architecture, Network, count_params
from .evalviz import capture_trajectory, evaluate
from .training import TrainingError, train, transfer_cnn

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo_config(cfg):
    sys.stderr.write("# resolved configuration\n" + config.dumps(cfg))
    sys.stderr.flush()


def _resolve(path, overrides, **forced):
    cfg = config.load(path, overrides)
    for k, v in forced.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def cmd_train(args):
    cfg = _resolve(args.config, args.set)
    _echo_config(cfg)
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        probe = os.path.join(cfg.out_dir, ".write_test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise config.ConfigError(f"output directory {cfg.out_dir} is not writable: {exc.strerror}")

    net = Network(cfg.architecture(), mix_prob=cfg.mix_prob)
    params = None
    if cfg.init_cnn_from:
        params = net.init_params(np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(7)[0]))
        transfer_cnn(cfg.init_cnn_from, params)

    def progress(row):
        print(f"epoch {row['epoch']} steps {row['steps']} reward {row['mean_eval_reward']:.4f} "
              f"epsilon {row['epsilon']:.4f}", flush=True)

    result = train(cfg.train_config(), net, cfg.make_env(), cfg.make_env(cfg.seed + 1),
                   seed=cfg.seed, out_dir=cfg.out_dir, params=params, model_name=cfg.model,
                   deterministic=cfg.deterministic, progress=progress)
    print(f"finished after {result.steps} steps; metrics in "
          f"{os.path.join(cfg.out_dir, 'metrics.csv')}")
    return EXIT_OK


def _infer_config(ckpt_path, path, overrides):
    """Config for a checkpoint; without a file, model/profile come from the checkpoint."""
    if path is not None:
        return _resolve(path, overrides)
    model, params = checkpoint.load(ckpt_path)
    profile = next((name for name, geo in PROFILES.items()
                    if params["conv1.weight"].shape[2] == geo["convs"][0][1]
                    and params["conv1.weight"].shape[0] == geo["convs"][0][0]), "paper")
    return _resolve(None, [f"model={model}", f"profile={profile}", *overrides])


def _load_for(cfg, ckpt_path):
    net = Network(cfg.architecture(), mix_prob=cfg.mix_prob)
    template = net.init_params(np.random.default_rng(0))
    _, params = checkpoint.load(ckpt_path, expect_model=cfg.model, expect_params=template)
    return net, params


def cmd_eval(args):
    cfg = _infer_config(args.checkpoint, args.config, args.set)
    _echo_config(cfg)
    net, params = _load_for(cfg, args.checkpoint)
    report = evaluate(net, params, cfg.make_env(), episodes=args.episodes,
                      epsilon=cfg.eval_epsilon, rng=np.random.default_rng(cfg.seed),
                      seed=cfg.seed)
    print(f"mean_reward {report.mean:.6f} +/- {report.std:.6f} "
          f"episodes {report.episodes} steps {report.steps}")
    return EXIT_OK


def cmd_count_params(args):
    if args.model not in MODELS:
        raise config.ConfigError(f"unknown model {args.model!r}; choose from {', '.join(MODELS)}")
    cfg = _resolve(None, [f"model={args.model}", f"profile={args.profile}"])
    _echo_config(cfg)
    arch = Architecture.from_profile(args.model, args.profile, args.actions)
    print(count_params(arch))
    return EXIT_OK


def cmd_visualize(args):
    cfg = _infer_config(args.checkpoint, args.config, args.set)
    _echo_config(cfg)
    net, params = _load_for(cfg, args.checkpoint)
    written = capture_trajectory(net, params, cfg.make_env(), args.steps, args.out,
                                 rng=np.random.default_rng(cfg.seed),
                                 epsilon=cfg.eval_epsilon, seed=cfg.seed)
    print(f"wrote {len(written) - 1} frames and index.csv to {args.out}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="darqn", description="Attention recurrent Q-networks at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("config", nargs="?", default=None, help="key = value config file")
    with_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", default=None)
    e.add_argument("--episodes", type=int, default=100)
    with_overrides(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-params", help="print the trainable parameter count")
    c.add_argument("model")
    c.add_argument("profile", choices=sorted(PROFILES))
    c.add_argument("actions", type=int)
    c.set_defaults(func=cmd_count_params)

    v = sub.add_parser("visualize", help="write attention overlay frames")
    v.add_argument("checkpoint")
    v.add_argument("--config", default=None)
    v.add_argument("--steps", type=int, default=50)
    v.add_argument("--out", default="attention_frames")
    with_overrides(v)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(f"darqn: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except checkpoint.CheckpointError as exc:
        print(f"darqn: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrainingError, OSError, ValueError) as exc:
        print(f"darqn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
