"""Operator command line for the full editing pipeline.

    editlab [-c CONFIG] [--set key=value]... COMMAND [flags]

Commands, in pipeline order:

- pretrain:     build the fact corpus, train the base model on it, and
                save the checkpoint;
- gen-stream:   generate the sequential edit stream against the base
                model (probes are prefiltered to facts it answers);
- train-editor: train the two-level editor over repeated trajectories;
- edit-run:     apply the trained editor across the stream once,
                saving the edited model and the trajectory log;
- eval:         aggregate the run's per-edit outcomes (efficacy,
                generalization, specificity) and score the final
                model's retention into a metrics file;
- report:       render metrics, mask frequencies, and per-step curves
                as delimited tables for plotting.

`edit-run --mode` (and optionally `train-editor --mode`) selects the
method variant: the learned selector with full/random counterfactual
rewards, the no-advantage and no-RL ablations, and the flat baselines
(every slot, gradient-norm ranking, random selection).

Every artifact lands under paths.workdir; reruns with one config and
seed are byte-identical.  Exit status: 0 ok, 2 configuration error,
3 missing prerequisite artifact, 1 runtime failure.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import hypernets as hn
from . import metrics as mx
from . import stream as st
from . import toylm
from . import trainer as tr
from .autodiff import NumericsError
from .checkpoint import CheckpointError, atomic_write_text
from .config import ConfigError, parse_config, render_defaults

# variant name -> (select_mode, reward_mode, rl_training)
MODE_MAP = {
    "hiedit-full": ("hinet", "full", True),
    "hiedit-rand": ("hinet", "rand", True),
    "no-advantage": ("hinet", "none", True),
    "no-rl": ("hinet", "full", False),
    "rledit": ("all", "none", True),
    "gradnorm": ("gradnorm", "none", True),
    "random": ("random", "none", True),
}


class DependencyError(RuntimeError):
    pass


def _require(path, producer):
    if not os.path.exists(path):
        raise DependencyError(
            f"missing artifact {path} (run `editlab {producer}` first)"
        )
    return path


def _slot_shapes(cfg):
    return [(cfg.lm.d_model, cfg.lm.d_ff) for _ in range(cfg.n_slots())]


def _variant_train_cfg(cfg, mode):
    if not mode:
        return cfg.train
    select, reward, rl = MODE_MAP[mode]
    return dataclasses.replace(
        cfg.train, select_mode=select, reward_mode=reward, rl_training=rl
    )


def _corpus(cfg):
    return st.make_pretrain_corpus(cfg.stream_spec)


# ------------------------------------------------------------------ commands


def cmd_pretrain(cfg, args):
    weights = toylm.init_lm(cfg.lm, seed=cfg.seed)
    prompts, targets = _corpus(cfg).sequences()
    toylm.pretrain(weights, prompts, targets,
                   steps=cfg.pretrain_steps, lr=cfg.pretrain_lr)
    acc = toylm.top1_accuracy(weights, prompts, targets)
    toylm.save_lm(cfg.base_lm_path, weights)
    print(f"ok pretrain accuracy={acc:.6f} facts={len(targets)} "
          f"path={cfg.base_lm_path}")
    return 0


def cmd_gen_stream(cfg, args):
    weights = toylm.load_lm(_require(cfg.base_lm_path, "pretrain"))
    edit_stream = st.synth_stream(cfg.stream_spec, _corpus(cfg), weights=weights)
    st.save_stream(cfg.stream_path, edit_stream)
    print(f"ok gen-stream edits={len(edit_stream)} path={cfg.stream_path}")
    return 0


def cmd_train_editor(cfg, args):
    base = toylm.load_lm(_require(cfg.base_lm_path, "pretrain"))
    edit_stream = st.load_stream(_require(cfg.stream_path, "gen-stream"))
    high, low = hn.init_editor(cfg.editor, _slot_shapes(cfg), seed=cfg.seed)
    tcfg = _variant_train_cfg(cfg, args.mode)
    history = tr.train_editor(base, edit_stream, high, low, tcfg)
    hn.save_editor(cfg.editor_path, high, low)
    curve = "epoch\tj_high\tj_low\n" + "".join(
        f"{e}\t{jh:.10g}\t{jl:.10g}\n" for e, jh, jl in history
    )
    atomic_write_text(cfg.train_curve_path, curve)
    _, jh, jl = history[-1]
    print(f"ok train-editor epochs={len(history)} j_high={jh:.6g} "
          f"j_low={jl:.6g} path={cfg.editor_path}")
    return 0


def cmd_edit_run(cfg, args):
    base = toylm.load_lm(_require(cfg.base_lm_path, "pretrain"))
    edit_stream = st.load_stream(_require(cfg.stream_path, "gen-stream"))
    _, high, low = hn.load_editor(_require(cfg.editor_path, "train-editor"))
    tcfg = _variant_train_cfg(cfg, args.mode)
    result = tr.run_trajectory(base, edit_stream, high, low, tcfg)
    toylm.save_lm(cfg.edited_lm_path, result.final_weights)
    tr.write_trajlog(cfg.trajlog_path, result)
    print(f"ok edit-run mode={args.mode} edits={len(result.logs)} "
          f"j_low={result.j_low:.6g} path={cfg.edited_lm_path}")
    return 0


def cmd_eval(cfg, args):
    edited = toylm.load_lm(_require(cfg.edited_lm_path, "edit-run"))
    logs = tr.read_trajlog(_require(cfg.trajlog_path, "edit-run"))
    edit_stream = st.load_stream(_require(cfg.stream_path, "gen-stream"))
    prompts, targets = st.heldout_rows(_corpus(cfg), edit_stream)
    rows = [(tuple(p), int(y)) for p, y in zip(prompts, targets)]
    t0 = args.t0 if args.t0 is not None else cfg.eval_t0
    if not (1 <= t0 <= len(edit_stream)):
        raise ConfigError(f"eval.t0 = {t0} must lie in [1, {len(edit_stream)}]")
    report = mx.evaluate_stream(edited, edit_stream.records, logs, t0=t0,
                                mode=cfg.eval_mode, heldout_rows=rows)
    mx.write_metrics(cfg.metrics_path, report)
    print(f"ok eval efficacy={report.efficacy.value:.4f} "
          f"generalization={report.generalization.value:.4f} "
          f"specificity={report.specificity.value:.4f} "
          f"edited_retention={report.edited_retention.value:.4f} "
          f"general_retention={report.general_retention.value:.4f} "
          f"path={cfg.metrics_path}")
    return 0


def cmd_report(cfg, args):
    loaded = mx.load_metrics(_require(cfg.metrics_path, "eval"))
    logs = tr.read_trajlog(_require(cfg.trajlog_path, "edit-run"))
    os.makedirs(cfg.report_dir, exist_ok=True)

    names = ("efficacy", "generalization", "specificity",
             "edited_retention", "general_retention")
    row = [
        f"{loaded[n][0]:.6f}" if n in loaded else "nan" for n in names
    ]
    table = "\t".join(["eff", "gen", "spe", "edit_ret", "gen_ret"]) + "\n" \
        + "\t".join(row) + "\n"
    atomic_write_text(os.path.join(cfg.report_dir, "metrics.tsv"), table)

    freq = mx.mask_frequency_report(logs)
    atomic_write_text(os.path.join(cfg.report_dir, "mask_frequency.tsv"),
                      mx.mask_frequency_table(freq))
    atomic_write_text(os.path.join(cfg.report_dir, "curves.tsv"),
                      mx.curve_table(logs))
    print(f"ok report steps={len(logs)} dir={cfg.report_dir}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "gen-stream": cmd_gen_stream,
    "train-editor": cmd_train_editor,
    "edit-run": cmd_edit_run,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="editlab",
        description="hierarchical lifelong model editing laboratory",
    )
    p.add_argument("-c", "--config", metavar="FILE",
                   help="config file (default: $EDITLAB_CONFIG)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", help="train and save the base model")
    sub.add_parser("gen-stream", help="generate the sequential edit stream")
    pt = sub.add_parser("train-editor", help="train the two-level editor")
    pt.add_argument("--mode", choices=sorted(MODE_MAP), default=None,
                    help="variant preset overriding train.* settings")
    pe = sub.add_parser("edit-run", help="apply the editor over the stream")
    pe.add_argument("--mode", choices=sorted(MODE_MAP), default="hiedit-full")
    pv = sub.add_parser("eval", help="score the edited model")
    pv.add_argument("--t0", type=int, default=None,
                    help="retention window (first N edits)")
    sub.add_parser("report", help="emit plot-ready tables")
    sub.add_parser("defaults", help="print the full default config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(render_defaults())
        return 0
    try:
        cfg = parse_config(args.config, args.overrides)
        os.makedirs(cfg.workdir, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except DependencyError as e:
        print(f"error: dependency: {e}", file=sys.stderr)
        return 3
    except (st.StreamError, CheckpointError, NumericsError,
            tr.TrajectoryDiverged, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
