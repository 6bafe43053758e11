"""Command-line entry points: train, eval, diarize, gradcheck.

Every run takes one root seed plus a flat key=value config, writes the fully
resolved configuration next to its outputs, and is byte-reproducible: the
same command with the same seed and config produces identical files.

Exit codes: 0 on success, 1 for configuration or input validation problems,
2 for runtime failures (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import autodiff, reports, synth
from .config import (ConfigError, ap_preference_value, build_config,
                     load_config_file, write_resolved)
from .diarization import (CMPEM_SEG, CMPEM_SEG_OVERLAP, SINGLEEM_SEG_OVERLAP,
                          SINGLEEM_TURN, STRATEGIES, der_score, diarize)
from .inference import (CompositionalPredictor, GuessPredictor,
                        SingleEmPredictor, evaluate_episode_batch)
from .nets import (CMPEM, CMPEML2, CompositionalModel, ModelFormatError,
                   SingleModel, init_compositional_model, load_model,
                   save_model)
from .seeding import derive_rng, derive_seed_sequence
from .training import TrainConfig, train, train_single_embedding

SINGLEEM = "singleem"
EVAL_COLUMN_ORDER = (CMPEML2, CMPEM, SINGLEEM, "guess")


class CliError(ValueError):
    """Bad command-line input; reported without a traceback."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _parse_overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value
    return out


def _resolve_config(args, extra_overrides=None):
    file_values = load_config_file(args.config) if args.config else None
    overrides = _parse_overrides(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for key, value in (extra_overrides or {}).items():
        if value is not None:
            overrides[key] = str(value)
    return build_config(file_values, overrides)


def _prepare_out(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    write_resolved(cfg, os.path.join(args.out, "config_resolved.txt"))


def _add_common(sub, with_out=True):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--seed", type=int, help="root seed (overrides config)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key; repeatable")
    if with_out:
        sub.add_argument("--out", required=True, help="output directory")


def _train_config(cfg):
    return TrainConfig(seed=cfg.seed, lr=cfg.lr, triplet_margin=cfg.triplet_margin,
                       adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2,
                       adam_eps=cfg.adam_eps, episodes_train=cfg.episodes_train,
                       episodes_val=cfg.episodes_val, val_every=cfg.val_every,
                       episode_speakers=cfg.episode_speakers, max_card=cfg.max_card,
                       examples_per_set=cfg.examples_per_set,
                       negative_mining=cfg.negative_mining)


def _load_typed_model(path, kind, variant=None):
    model = load_model(path)
    if kind == "compositional":
        if not isinstance(model, CompositionalModel):
            raise CliError(f"{path}: expected a compositional model")
        if variant is not None and model.variant != variant:
            raise CliError(f"{path}: expected variant {variant}, found {model.variant}")
    elif not isinstance(model, SingleModel):
        raise CliError(f"{path}: expected a single-embedding model")
    return model


def cmd_train(args):
    cfg = _resolve_config(args, {"variant": args.variant,
                                 "episodes_train": args.episodes_train,
                                 "lr": args.lr})
    _prepare_out(args, cfg)
    bank = synth.make_bank(cfg.train_speakers, cfg.feature_dim, cfg.within_speaker_noise,
                           derive_seed_sequence(cfg.seed, "bank-train"))
    tcfg = _train_config(cfg)
    if cfg.episodes_train == 0:
        print("warning: episodes_train=0, saving the initial model unchanged", file=sys.stderr)
    if cfg.variant == SINGLEEM:
        result = train_single_embedding(bank, tcfg, hidden_dim=cfg.hidden_dim,
                                        embed_dim=cfg.embed_dim)
    else:
        model = init_compositional_model(cfg.feature_dim, cfg.hidden_dim, cfg.embed_dim,
                                         cfg.variant, derive_rng(cfg.seed, "init-model"))
        result = train(model, bank, tcfg)

    save_model(result.model, os.path.join(args.out, "model_best.txt"))
    save_model(result.final_model, os.path.join(args.out, "model_final.txt"))
    reports.write_train_log_csv(result.log, os.path.join(args.out, "train_log.csv"))
    if cfg.figures and result.log:
        reports.plot_training_curve(result.log, os.path.join(args.out, "training_curve.png"),
                                    dpi=cfg.figure_dpi)
    print(f"trained {cfg.variant} for {cfg.episodes_train} episodes; "
          f"best validation accuracy {result.best_val_accuracy:.4f}")
    print(f"wrote {os.path.join(args.out, 'model_best.txt')}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    model_paths = {CMPEM: args.cmpem, CMPEML2: args.cmpeml2, SINGLEEM: args.singleem}
    if not any(model_paths.values()):
        raise CliError("eval needs at least one of --cmpem, --cmpeml2, --singleem")
    _prepare_out(args, cfg)

    predictors = {}
    for name in EVAL_COLUMN_ORDER[:-1]:
        path = model_paths[name]
        if path is None:
            continue
        if name == SINGLEEM:
            model = _load_typed_model(path, "single")
            predictors[name] = SingleEmPredictor(model, max_card=cfg.max_card)
        else:
            model = _load_typed_model(path, "compositional", variant=name)
            predictors[name] = CompositionalPredictor(model, max_card=cfg.max_card)
    predictors["guess"] = GuessPredictor(derive_rng(cfg.seed, "guess"), max_card=cfg.max_card)

    bank = synth.make_bank(cfg.eval_speakers, cfg.feature_dim, cfg.within_speaker_noise,
                           derive_seed_sequence(cfg.seed, "bank-eval"))
    episodes = [synth.sample_episode(bank, derive_rng(cfg.seed, f"test-episode-{i}"),
                                     n_speakers=cfg.episode_speakers, max_card=cfg.max_card,
                                     examples_per_set=cfg.examples_per_set)
                for i in range(cfg.episodes_test)]
    report = evaluate_episode_batch(predictors, episodes)

    order = [name for name in EVAL_COLUMN_ORDER if name in report.per_model]
    table = reports.format_eval_table(report, order)
    print(table, end="")
    with open(os.path.join(args.out, "eval_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    reports.write_eval_csv(report, os.path.join(args.out, "eval_metrics.csv"), order)
    if cfg.figures:
        reports.plot_eval_figure(report, os.path.join(args.out, "eval_accuracy.png"),
                                 order, dpi=cfg.figure_dpi)
    return 0


def _stream_models(args):
    compositional = _load_typed_model(args.cmpem, "compositional")
    single = _load_typed_model(args.singleem, "single")
    return {SINGLEEM_TURN: single, SINGLEEM_SEG_OVERLAP: single,
            CMPEM_SEG: compositional, CMPEM_SEG_OVERLAP: compositional}


def cmd_diarize(args):
    cfg = _resolve_config(args)
    models = _stream_models(args)
    _prepare_out(args, cfg)
    rttm_dir = os.path.join(args.out, "rttm")
    if args.dump_rttm:
        os.makedirs(rttm_dir, exist_ok=True)

    per_strategy = {name: [] for name in STRATEGIES}
    rows = []
    for k in range(cfg.n_streams):
        bank = synth.make_bank(cfg.stream_speakers, cfg.feature_dim, cfg.within_speaker_noise,
                               derive_seed_sequence(cfg.seed, f"stream-bank-{k}"))
        stream = synth.generate_stream(
            bank, cfg.stream_speakers, cfg.stream_duration_s,
            derive_rng(cfg.seed, f"stream-{k}"),
            boundary_jitter_s=cfg.boundary_jitter_s,
            missed_change_rate=cfg.missed_change_rate,
            overlap_fraction=cfg.overlap_fraction, frame_duration=cfg.frame_duration,
            turn_min_s=cfg.turn_min_s, turn_max_s=cfg.turn_max_s,
            overlap_min_s=cfg.overlap_min_s, overlap_max_s=cfg.overlap_max_s,
            allow_triple_overlap=cfg.allow_triple_overlap)
        if args.dump_rttm:
            synth.write_rttm(stream.timeline, f"stream{k}",
                             os.path.join(rttm_dir, f"ref_stream{k}.rttm"))
        for strategy in STRATEGIES:
            hyp = diarize(stream, models[strategy], strategy,
                          long_turn_s=cfg.long_turn_s, segment_s=cfg.segment_s,
                          detector_false_alarm_rate=cfg.detector_false_alarm_rate,
                          detector_miss_rate=cfg.detector_miss_rate,
                          detector_rng=derive_rng(cfg.seed, f"detector-{k}-{strategy}"),
                          ap_damping=cfg.ap_damping, ap_max_iter=cfg.ap_max_iter,
                          ap_convergence_iter=cfg.ap_convergence_iter,
                          ap_preference=ap_preference_value(cfg))
            score = der_score(stream.timeline, hyp)
            per_strategy[strategy].append(score.der)
            rows.append((k, strategy, score.der, score.miss, score.false_alarm,
                         score.confusion))
            if args.dump_rttm:
                synth.write_rttm(hyp, f"stream{k}",
                                 os.path.join(rttm_dir, f"{strategy}_stream{k}.rttm"))
        print(f"stream {k}: " + "  ".join(
            f"{s}={per_strategy[s][-1]:.4f}" for s in STRATEGIES))

    table = reports.format_der_table(per_strategy)
    print(table, end="")
    with open(os.path.join(args.out, "der_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    reports.write_der_summary_csv(per_strategy, os.path.join(args.out, "der_summary.csv"))
    reports.write_der_stream_csv(rows, os.path.join(args.out, "der_streams.csv"))
    if cfg.figures:
        reports.plot_der_figure(per_strategy, os.path.join(args.out, "der_rates.png"),
                                dpi=cfg.figure_dpi)
    return 0


def cmd_gradcheck(args):
    cfg = _resolve_config(args)
    if args.corrupt_op is not None and args.corrupt_op not in autodiff.OPS:
        raise CliError(f"--corrupt-op must be one of {sorted(autodiff.OPS)}")
    checks = autodiff.run_gradcheck(seed=cfg.seed, h=cfg.gradcheck_step,
                                    tolerance=cfg.gradcheck_tolerance,
                                    corrupt_op=args.corrupt_op)
    net_error = autodiff.gradient_check_network(seed=cfg.seed, h=cfg.gradcheck_step)
    net_passed = net_error < cfg.gradcheck_tolerance
    lines = [f"{c.op:<20} max rel err {c.max_rel_error:.3e}  "
             f"{'PASS' if c.passed else 'FAIL'}" for c in checks]
    lines.append(f"{'network':<20} max rel err {net_error:.3e}  "
                 f"{'PASS' if net_passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
    if all(c.passed for c in checks) and net_passed:
        return 0
    print("gradient check failed", file=sys.stderr)
    return 2


def build_parser():
    parser = _Parser(prog="cmpem",
                     description="Compositional set embeddings: training, closed-set "
                                 "identification, and diarization on synthetic speech.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and save it")
    _add_common(p_train)
    p_train.add_argument("--variant", choices=(CMPEM, CMPEML2, SINGLEEM))
    p_train.add_argument("--episodes-train", type=int, dest="episodes_train")
    p_train.add_argument("--lr", type=float)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score saved models on fresh episodes")
    _add_common(p_eval)
    p_eval.add_argument("--cmpem", help="compositional model file")
    p_eval.add_argument("--cmpeml2", help="normalized compositional model file")
    p_eval.add_argument("--singleem", help="single-embedding model file")
    p_eval.set_defaults(func=cmd_eval)

    p_dia = sub.add_parser("diarize", help="diarize synthetic streams and report DER")
    _add_common(p_dia)
    p_dia.add_argument("--cmpem", required=True, help="compositional model file")
    p_dia.add_argument("--singleem", required=True, help="single-embedding model file")
    p_dia.add_argument("--dump-rttm", action="store_true",
                       help="also write reference and hypothesis RTTM files")
    p_dia.set_defaults(func=cmd_diarize)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every op")
    _add_common(p_grad, with_out=False)
    p_grad.add_argument("--out", help="optional directory for the report file")
    p_grad.add_argument("--corrupt-op", dest="corrupt_op",
                        help="perturb one op's analytic gradient (self-test hook)")
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, ConfigError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to a distinct exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
