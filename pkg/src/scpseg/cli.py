"""Command-line interface.

Verbs: ``synth`` (write a dataset), ``train``, ``eval``, ``experiment``
(seed matrix over head variants and capacities), ``flops`` (analytic
complexity report), ``stats`` (generated-weight statistic images).

Every config field can come from a ``key=value`` file (``--config``, ``#``
comments allowed) and any command-line flag overrides the file. Exit codes:
0 success, 2 configuration error, 3 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .analysis import count_complexity, export_stats_pgm, format_report_kv, format_report_text, weight_stats
from .backbone import BackboneConfig, ConfigError
from .heads import HeadVariant, ScpHead, phi_forward
from .metrics import Connectivity, StatisticsError, write_metrics_csv
from .model import ModelSpec, load_checkpoint, save_checkpoint
from .posenc import encode_positions
from .synthdata import NormalizationError, SynthSpec, generate, load_dataset, save_dataset
from .trainer import LossKind, TrainConfig, TrainingError, compare_runs, evaluate, train

log = logging.getLogger("scpseg")

SYNTH_KEYS = ("h", "w", "n_train", "n_val", "n_test", "structured", "lesion_rate", "noise_sigma", "seed")
TRAIN_KEYS = (
    "head", "in_channels", "n_c", "depth", "lr", "weight_decay", "batch_size", "epochs",
    "lr_milestones", "seed", "loss", "phi_hidden", "zero_init_phi_last", "threshold",
)


def parse_kv_file(path: str) -> dict[str, str]:
    kv: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    return kv


def _merged(args: argparse.Namespace, keys: tuple[str, ...]) -> dict[str, str]:
    kv: dict[str, str] = {}
    if getattr(args, "config", None):
        file_kv = parse_kv_file(args.config)
        unknown = set(file_kv) - set(SYNTH_KEYS) - set(TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"{args.config}: unknown config keys {sorted(unknown)}")
        kv.update({k: v for k, v in file_kv.items() if k in keys})
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            kv[key] = str(val)
    return kv


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def synth_spec_from(kv: dict[str, str]) -> SynthSpec:
    base = SynthSpec()
    return SynthSpec(
        h=int(kv.get("h", base.h)),
        w=int(kv.get("w", base.w)),
        n_train=int(kv.get("n_train", base.n_train)),
        n_val=int(kv.get("n_val", base.n_val)),
        n_test=int(kv.get("n_test", base.n_test)),
        structured=_bool(kv.get("structured", "1")),
        lesion_rate=float(kv.get("lesion_rate", base.lesion_rate)),
        noise_sigma=float(kv.get("noise_sigma", base.noise_sigma)),
        seed=int(kv.get("seed", base.seed)),
    )


def train_config_from(kv: dict[str, str]) -> TrainConfig:
    try:
        head = HeadVariant(kv.get("head", "base"))
        loss = LossKind(kv.get("loss", "bce_dice"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    milestones = tuple(float(m) for m in kv.get("lr_milestones", "0.5,0.7,0.9").split(",") if m)
    return TrainConfig(
        backbone=BackboneConfig(
            in_channels=int(kv.get("in_channels", 1)),
            n_c=int(kv.get("n_c", 32)),
            depth=int(kv.get("depth", 3)),
        ),
        head_variant=head,
        lr=float(kv.get("lr", 1e-3)),
        weight_decay=float(kv.get("weight_decay", 1e-6)),
        batch_size=int(kv.get("batch_size", 14)),
        epochs=int(kv.get("epochs", 90)),
        lr_milestones=milestones,
        seed=int(kv.get("seed", 0)),
        loss=loss,
        phi_hidden=int(kv.get("phi_hidden", 64)),
        zero_init_phi_last=_bool(kv.get("zero_init_phi_last", "1")),
        threshold=float(kv.get("threshold", 0.5)),
    )


def _add_config_flags(p: argparse.ArgumentParser, keys: tuple[str, ...]) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    for key in keys:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=argparse.SUPPRESS)


def cmd_synth(args) -> int:
    spec = synth_spec_from(_merged(args, SYNTH_KEYS))
    data = generate(spec)
    save_dataset(args.out, data)
    print(f"wrote {spec.n_train}/{spec.n_val}/{spec.n_test} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = train_config_from(_merged(args, TRAIN_KEYS))
    data = load_dataset(args.data)
    record, model = train(cfg, data, _connectivity(args))
    if args.out:
        save_checkpoint(args.out, model)
        with open(os.path.join(args.out, "history.json"), "w") as f:
            json.dump(
                {
                    "seed": record.seed,
                    "config": record.config,
                    "train_loss": record.train_loss,
                    "val_dice": record.val_dice,
                    "best_epoch": record.best_epoch,
                },
                f,
                indent=2,
            )
        write_metrics_csv(os.path.join(args.out, "test_metrics.csv"), record.per_case)
    r = record.test_report
    print(
        f"test dice {r.dice:.4f}  l_dice {r.l_dice:.4f}  l_tpr {r.l_tpr:.4f}  "
        f"l_ppv {r.l_ppv:.4f}  l_f1 {r.l_f1:.4f}"
    )
    return 0


def _connectivity(args) -> Connectivity:
    return Connectivity.FOUR if getattr(args, "connectivity", "eight") == "four" else Connectivity.EIGHT


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    reports, agg = evaluate(
        model,
        data.split(args.split),
        _connectivity(args),
        threshold=args.threshold,
        ldice_doubled=args.ldice_doubled,
    )
    if args.out:
        write_metrics_csv(args.out, reports)
    print(
        f"{args.split}: dice {agg.dice:.4f}  l_dice {agg.l_dice:.4f}  l_tpr {agg.l_tpr:.4f}  "
        f"l_ppv {agg.l_ppv:.4f}  l_f1 {agg.l_f1:.4f}  (cases={len(reports)})"
    )
    return 0


def cmd_experiment(args) -> int:
    kv = _merged(args, TRAIN_KEYS)
    data = load_dataset(args.data)
    heads = [HeadVariant(h.strip()) for h in args.heads.split(",")]
    ncs = [int(n) for n in args.ncs.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    arms = {}
    for head in heads:
        for n_c in ncs:
            records = []
            for seed in seeds:
                arm_kv = dict(kv, head=head.value, n_c=str(n_c), seed=str(seed))
                cfg = train_config_from(arm_kv)
                record, _ = train(cfg, data, _connectivity(args))
                records.append(record)
                log.info("%s(%d) seed %d: test dice %.4f", head.value, n_c, seed, record.test_report.dice)
            arms[(head.value, n_c)] = records

    print(f"{'model':<14}{'dice':>8}{'l_dice':>8}{'l_tpr':>8}{'l_ppv':>8}{'l_f1':>8}")
    for (head, n_c), records in arms.items():
        mean = {
            k: float(np.mean([getattr(r.test_report, k) for r in records]))
            for k in ("dice", "l_dice", "l_tpr", "l_ppv", "l_f1")
        }
        print(
            f"{head + '(' + str(n_c) + ')':<14}{mean['dice']:>8.4f}{mean['l_dice']:>8.4f}"
            f"{mean['l_tpr']:>8.4f}{mean['l_ppv']:>8.4f}{mean['l_f1']:>8.4f}"
        )
    ref_key = next(iter(arms))
    for key, records in arms.items():
        if key == ref_key:
            continue
        t_dice, t_ldice = compare_runs(records, arms[ref_key])
        print(
            f"paired t-test {key[0]}({key[1]}) vs {ref_key[0]}({ref_key[1]}): "
            f"dice t={t_dice.t_statistic:.3f} p={t_dice.p_value:.4g}; "
            f"l_dice t={t_ldice.t_statistic:.3f} p={t_ldice.p_value:.4g}"
        )
    return 0


def cmd_flops(args) -> int:
    cfg = train_config_from(_merged(args, TRAIN_KEYS))
    shape = tuple(int(v) for v in args.input.split(","))
    if len(shape) != 3:
        raise ConfigError(f"--input must be C,H,W, got {args.input!r}")
    report = count_complexity(cfg.model_spec(), shape)
    print(format_report_kv(report) if args.kv else format_report_text(report))
    return 0


def cmd_stats(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model.head, ScpHead):
        raise ConfigError("stats needs a checkpoint of a spatially covariant head")
    h = args.height or 64
    w = args.width or 64
    s = encode_positions(h, w, normalize=model.spec.posenc_normalize)
    wmap = phi_forward(model.head.phi, s)
    stats = weight_stats(wmap)
    written = export_stats_pgm(stats, args.out)
    print("\n".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scpseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    _add_config_flags(sp, SYNTH_KEYS)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train one model")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", help="checkpoint directory")
    tp.add_argument("--connectivity", choices=("four", "eight"), default="eight")
    _add_config_flags(tp, TRAIN_KEYS)
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", choices=("train", "val", "test"), default="test")
    ep.add_argument("--out", help="per-case CSV path")
    ep.add_argument("--threshold", type=float, default=0.5)
    ep.add_argument("--connectivity", choices=("four", "eight"), default="eight")
    ep.add_argument("--ldice-doubled", action="store_true")
    ep.set_defaults(fn=cmd_eval)

    xp = sub.add_parser("experiment", help="seed matrix over head variants and capacities")
    xp.add_argument("--data", required=True)
    xp.add_argument("--heads", default="base,scp")
    xp.add_argument("--ncs", default="32")
    xp.add_argument("--seeds", default="0,1,2")
    xp.add_argument("--connectivity", choices=("four", "eight"), default="eight")
    _add_config_flags(xp, TRAIN_KEYS)
    xp.set_defaults(fn=cmd_experiment)

    fp = sub.add_parser("flops", help="analytic complexity report")
    fp.add_argument("--input", default="1,160,224", help="input shape C,H,W")
    fp.add_argument("--kv", action="store_true", help="machine-readable key=value output")
    _add_config_flags(fp, TRAIN_KEYS)
    fp.set_defaults(fn=cmd_flops)

    st = sub.add_parser("stats", help="export generated-weight statistic maps")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--height", type=int)
    st.add_argument("--width", type=int)
    st.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (TrainingError, StatisticsError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, NormalizationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
