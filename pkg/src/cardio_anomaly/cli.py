"""Command-line interface.

Every command writes ``manifest.txt`` into its ``--out`` directory.  The
manifest stores the effective argument list (seed made explicit) and the
checksums of every input, so :func:`replay` can rerun a command from the
manifest alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shlex
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import CheckpointError
from .benchmark import CLASS_NAMES, detection_benchmark, long_tail_benchmark
from .errors import ConfigError, ContractError, DataError, NumericError, UndefinedMetricError
from .io import (
    LabelSchema,
    file_checksum,
    list_records,
    read_record,
    read_wfdb16,
    records_checksum,
    write_record,
)
from .metrics import fairness_gap, format_table, write_fairness_svg, write_reports_csv
from .scoring import assemble_many, write_csv, write_svg
from .signal import EcgRecord, prepare_record
from .synth import SynthesisSpec, synthesize_ecg
from .training import (
    Manifest,
    RunConfig,
    evaluate,
    load_model,
    run_stage,
    start_manifest,
    tier_counts_for,
)

log = logging.getLogger("cardio_anomaly")

SEED_ENV = "CARDIO_ANOMALY_SEED"
ABLATION_COMPONENTS = ("mr", "mc", "tar", "apm")
TOP_K = 5


# -- helpers ----------------------------------------------------------------------------------

def resolve_seed(flag: int | None, default: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or not env.strip():
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def load_records(directory) -> list[EcgRecord]:
    """Native records (``*.hdr``) or WFDB format-16 records (``*.hea``) from one directory."""
    directory = Path(directory)
    native = list_records(directory)
    if native:
        return [read_record(p) for p in native]
    return [read_wfdb16(p) for p in sorted(directory.glob("*.hea"))]


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"{out}: output directory not writable ({exc.strerror})") from None
    return out


def _run_config(args, stage: str, init_checkpoint: str = "") -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    over: dict = {"stage": stage, "seed": args.seed}
    if init_checkpoint:
        over["init_checkpoint"] = str(Path(init_checkpoint).resolve())
    for name in ("epochs", "batch_size"):
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    if getattr(args, "lr", None) is not None:
        over["lr0"] = args.lr
    return replace(cfg, **over)


def _schema_for(args, records: Sequence[EcgRecord], n_classes: int | None) -> LabelSchema:
    if args.schema:
        return LabelSchema.load(args.schema)
    if n_classes is None or n_classes == len(CLASS_NAMES):
        names = set(CLASS_NAMES)
        if all(set(r.labels) <= names for r in records):
            return LabelSchema(CLASS_NAMES)
    found = sorted({l for r in records for l in r.labels} - {"normal"})
    return LabelSchema(("normal", *found))


def _log_epoch(row: dict) -> None:
    parts = " ".join(f"{k}={v:.6g}" for k, v in row.items() if k != "epoch")
    log.info("epoch %d %s", int(row["epoch"]), parts)


def _record_inputs(m: Manifest, name: str, records: Sequence[EcgRecord], directory) -> None:
    m.add(f"input.{name}", Path(directory).resolve())
    m.add(f"input.{name}.count", len(records))
    m.add(f"input.{name}.checksum", records_checksum(records))


def top_classes(probs: np.ndarray, schema: LabelSchema, k: int = TOP_K) -> list[tuple[str, float]]:
    order = np.argsort(-probs, kind="stable")[:k]
    return [(schema.class_names[i], float(probs[i])) for i in order]


# -- commands -------------------------------------------------------------------------------------

def cmd_generate(args, m: Manifest) -> None:
    out = Path(args.out)
    if args.benchmark == "detection":
        b = detection_benchmark(args.seed, args.count, args.n_test, args.n_test)
        groups = {"train": b["train"], "test": b["test_normal"] + b["test_anomalous"]}
    elif args.benchmark == "long-tail":
        b = long_tail_benchmark(args.seed, args.count, args.n_test)
        groups = {"train": b["train"], "test": b["test"]}
    else:
        if not args.spec:
            raise ConfigError("generate needs --spec or --benchmark")
        spec = SynthesisSpec.from_file(args.spec)
        m.add("input.spec.checksum", file_checksum(args.spec))
        seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.count)
        groups = {"": [synthesize_ecg(spec, int(s), f"r{i:05d}") for i, s in enumerate(seeds)]}
    for name, recs in groups.items():
        d = out / name if name else out
        d.mkdir(parents=True, exist_ok=True)
        for r in recs:
            write_record(r, d)
        _write_attributes(recs, d / "attributes.csv")
        m.add(f"output.{name or 'records'}.count", len(recs))
        m.add(f"output.{name or 'records'}.checksum", records_checksum(recs))
    print(" ".join(f"{name or 'records'}={len(r)}" for name, r in groups.items()))


def _write_attributes(records: Sequence[EcgRecord], path) -> None:
    from .signal import ATTRIBUTE_NAMES

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", *ATTRIBUTE_NAMES, "labels"])
        for r in records:
            vals = r.attributes.to_mapping()
            w.writerow([r.record_id, *("" if vals[n] is None else repr(vals[n]) for n in ATTRIBUTE_NAMES),
                        ";".join(r.labels)])


def cmd_preprocess(args, m: Manifest) -> None:
    cfg = RunConfig.from_file(args.config).preprocess if args.config else RunConfig().preprocess
    records = load_records(args.records)
    _record_inputs(m, "records", records, args.records)
    out = Path(args.out)
    rows = []
    for r in records:
        p = prepare_record(r, cfg)
        write_record(EcgRecord(p.record_id, p.global_signal[None, :], r.fs, p.attributes, p.labels,
                               p.anomaly_mask, p.r_peaks), out)
        rows.append((p.record_id, len(p.beats), int(not p.beats)))
    with open(out / "beats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "beats", "unsegmented"])
        w.writerows(rows)
    print(f"preprocessed {len(rows)} records")


def _train(args, m: Manifest, stage: str) -> None:
    records = load_records(args.records)
    _record_inputs(m, "records", records, args.records)
    init = getattr(args, "model", "") or ""
    cfg = _run_config(args, stage, init)
    schema = None
    if stage != "pretrain":
        m.add("input.model.checksum", file_checksum(init))
        n_classes = load_model(init).model.cfg.n_classes if init else None
        schema = _schema_for(args, records, n_classes)
        schema.save(Path(args.out) / "schema.txt")
    result = run_stage(cfg, records, schema, args.out, m, _log_epoch)
    last = result.curve[-1]
    print(f"{stage}: {len(result.curve)} epochs, final train loss {last['train_loss']:.6g}"
          + (f", val loss {last['val_loss']:.6g}" if "val_loss" in last else ""))


def cmd_pretrain(args, m):
    _train(args, m, "pretrain")


def cmd_finetune(args, m):
    _train(args, m, "finetune_frozen")


def cmd_joint(args, m):
    _train(args, m, "joint")


def cmd_score(args, m: Manifest) -> None:
    loaded = load_model(args.model)
    m.add("input.model.checksum", file_checksum(args.model))
    if args.schema:
        wanted = LabelSchema.load(args.schema)
        if loaded.schema is None or wanted != loaded.schema:
            have = loaded.schema.class_names if loaded.schema else "none"
            raise ConfigError(f"schema {wanted.class_names} does not match checkpoint schema {have}")
    records = load_records(args.records)
    _record_inputs(m, "records", records, args.records)
    prepared = [prepare_record(r, loaded.config.preprocess) for r in records]
    maps = assemble_many(prepared, loaded.model, args.jobs, loaded.schema is not None)
    out = Path(args.out)
    (out / "maps").mkdir(exist_ok=True)
    if args.plot:
        (out / "plots").mkdir(exist_ok=True)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "anomaly_score", "beats", "unsegmented"]
                   + [f"top{i + 1}" for i in range(TOP_K)])
        for p, s in zip(prepared, maps):
            write_csv(s, out / "maps" / f"{s.record_id}.csv", p.anomaly_mask)
            if args.plot:
                write_svg(s, p.global_signal, out / "plots" / f"{s.record_id}.svg", p.anomaly_mask)
            top = top_classes(s.class_probs, loaded.schema) if s.class_probs is not None else []
            w.writerow([s.record_id, repr(s.anomaly_score), s.beat_count, int(s.unsegmented)]
                       + [f"{n}:{v:.4f}" for n, v in top] + [""] * (TOP_K - len(top)))
    m.add("output.scores", "scores.csv")
    print(f"scored {len(maps)} records")


def cmd_evaluate(args, m: Manifest) -> None:
    loaded = load_model(args.model)
    m.add("input.model.checksum", file_checksum(args.model))
    records = load_records(args.records)
    _record_inputs(m, "records", records, args.records)
    tiers = None
    if args.train_records and loaded.schema is not None:
        train = load_records(args.train_records)
        _record_inputs(m, "train_records", train, args.train_records)
        tiers = tier_counts_for(train, loaded.schema)
    by = _strata(args.by)
    ev = evaluate(loaded, records, tiers, jobs=args.jobs, strata_by=by)
    out = Path(args.out)
    names, reports = zip(*ev.reports())
    write_reports_csv(reports, out / "reports.csv", names)
    m.add("output.reports", "reports.csv")
    lines = [format_table(reports, names)]
    if ev.enrichment is not None:
        lines.append(f"localization: dice={ev.dice:.4f} top_decile_enrichment={ev.enrichment:.4f} "
                     f"threshold={ev.loc_threshold:.6g}")
    if ev.class_auroc is not None:
        with open(out / "class_auroc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "tier", "auroc"])
            for name, v in zip(loaded.schema.class_names, ev.class_auroc):
                w.writerow([name, ev.tier_of.get(name, ""), repr(float(v))])
        m.add("output.class_auroc", "class_auroc.csv")
        lines.append(f"macro AUROC {ev.macro_auroc:.4f}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    m.add("output.report", "report.txt")
    print(text, end="")


def _strata(text: str) -> tuple[str, ...]:
    by = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [b for b in by if b not in ("sex", "age")]
    if bad:
        raise ConfigError(f"unknown stratifier(s) {bad}; use sex and/or age")
    return by


def cmd_fairness(args, m: Manifest) -> None:
    loaded = load_model(args.model)
    m.add("input.model.checksum", file_checksum(args.model))
    records = load_records(args.records)
    _record_inputs(m, "records", records, args.records)
    ev = evaluate(loaded, records, jobs=args.jobs, strata_by=())
    scores = np.array([s.anomaly_score for s in ev.maps])
    labels = np.array([0 if all(l == "normal" for l in r.labels) else 1 for r in records])
    from .metrics import stratify

    out = Path(args.out)
    lines = []
    for by in _strata(args.by):
        reports = stratify([r.attributes for r in records], scores, labels, by)
        write_reports_csv(reports, out / f"fairness_{by}.csv")
        write_fairness_svg(reports, out / f"fairness_{by}.svg")
        m.add(f"output.fairness_{by}", f"fairness_{by}.csv")
        try:
            gap = f"{fairness_gap(reports):.4f}"
        except UndefinedMetricError as exc:
            gap = f"undefined ({exc})"
        for r in reports:
            if r.undefined:
                lines.append(f"warning: {r.stratum_key}: {r.undefined}")
        lines.append(f"gap {by}: {gap}")
    text = "\n".join(lines) + "\n"
    (out / "gaps.txt").write_text(text)
    print(text, end="")


def ablation_lattice(components: Sequence[str]) -> list[tuple[str, dict]]:
    """Cumulative component lattice starting from the plain global autoencoder."""
    flags = {"mr": False, "mc": False, "tar": False, "apm": False}
    rows = [("none", dict(flags))]
    for c in components:
        flags[c] = True
        rows.append(("+" + "+".join(k.upper() for k in components[: len(rows)]), dict(flags)))
    return rows


def ablation_config(base: RunConfig, flags: dict) -> RunConfig:
    model = replace(base.model, use_local=flags["mc"], use_trend=flags["tar"], use_attributes=flags["apm"])
    return replace(base, stage="pretrain", model=model, mask=replace(base.mask, enabled=flags["mr"]))


def cmd_ablate(args, m: Manifest) -> None:
    comps = tuple(c.strip().lower() for c in args.components.split(",") if c.strip())
    if not comps or any(c not in ABLATION_COMPONENTS for c in comps) or len(set(comps)) != len(comps):
        raise ConfigError(f"--components takes distinct entries from {','.join(ABLATION_COMPONENTS)}")
    train = load_records(args.records)
    test = load_records(args.test_records)
    _record_inputs(m, "records", train, args.records)
    _record_inputs(m, "test_records", test, args.test_records)
    base = _run_config(args, "pretrain")
    out = Path(args.out)
    rows = []
    for i, (name, flags) in enumerate(ablation_lattice(comps)):
        cfg = ablation_config(base, flags)
        sub = out / f"stage{i}"
        sm = start_manifest(sub, "ablate-stage")
        sm.add("ablation.stage", name)
        log.info("ablation stage %s", name)
        run_stage(cfg, train, None, sub, sm, _log_epoch)
        ev = evaluate(load_model(sub / "final.ckpt"), test, jobs=args.jobs, strata_by=())
        sm.add("result.auroc", repr(ev.detection.auroc))
        rows.append((name, flags, ev.detection.auroc))
        m.add(f"ablation.{i}", f"{name}:{ev.detection.auroc!r}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", *ABLATION_COMPONENTS, "auroc"])
        for name, flags, auc in rows:
            w.writerow([name, *(int(flags[c]) for c in ABLATION_COMPONENTS), repr(auc)])
    m.add("output.ablation", "ablation.csv")
    for name, _, auc in rows:
        print(f"{name:<20} {auc:.4f}")


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardio-anomaly", description="ECG anomaly detection and diagnosis")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False, train=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 0")
        sp.add_argument("--config", help="run config file (key = value lines)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="scoring threads")
        if train:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int, dest="batch_size")
            sp.add_argument("--lr", type=float)

    g = sub.add_parser("generate", help="write synthetic records")
    g.add_argument("--spec", help="synthesis spec file")
    g.add_argument("--benchmark", choices=("detection", "long-tail"))
    g.add_argument("--count", type=int, default=10, help="records (training records for --benchmark)")
    g.add_argument("--n-test", type=int, default=200, dest="n_test",
                   help="detection: normals and anomalies each; long-tail: per class")
    common(g)
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="filter records and detect beats")
    pp.add_argument("--records", required=True)
    common(pp)
    pp.set_defaults(func=cmd_preprocess)

    for name, func, needs_model in (("pretrain", cmd_pretrain, False), ("finetune", cmd_finetune, True),
                                    ("joint-train", cmd_joint, True)):
        sp = sub.add_parser(name)
        sp.add_argument("--records", required=True, help="training records")
        if needs_model:
            sp.add_argument("--model", required=True, help="pretrained checkpoint")
            sp.add_argument("--schema", help="label schema file (one class per line)")
        common(sp, train=True)
        sp.set_defaults(func=func)

    sc = sub.add_parser("score", help="score maps, anomaly scores and top-5 classes")
    sc.add_argument("--model", required=True)
    sc.add_argument("--records", required=True)
    sc.add_argument("--schema")
    sc.add_argument("--plot", action="store_true", help="one SVG per record")
    common(sc, jobs=True)
    sc.set_defaults(func=cmd_score)

    ev = sub.add_parser("evaluate", help="detection, localization, tier and strata reports")
    ev.add_argument("--model", required=True)
    ev.add_argument("--records", required=True)
    ev.add_argument("--train-records", dest="train_records", help="training records, for rarity tiers")
    ev.add_argument("--by", default="sex,age")
    common(ev, jobs=True)
    ev.set_defaults(func=cmd_evaluate)

    fr = sub.add_parser("fairness-report", help="detection metrics per sex / age stratum")
    fr.add_argument("--model", required=True)
    fr.add_argument("--records", required=True)
    fr.add_argument("--by", default="sex,age")
    common(fr, jobs=True)
    fr.set_defaults(func=cmd_fairness)

    ab = sub.add_parser("ablate", help="pretrain the component lattice and report AUROC per stage")
    ab.add_argument("--components", default="mr,mc,tar,apm")
    ab.add_argument("--records", required=True, help="normal training records")
    ab.add_argument("--test-records", required=True, dest="test_records")
    common(ab, jobs=True, train=True)
    ab.set_defaults(func=cmd_ablate)
    return p


def _effective_argv(argv: Sequence[str], seed: int) -> list[str]:
    argv = list(argv)
    if "--seed" not in argv and not any(a.startswith("--seed=") for a in argv):
        argv += ["--seed", str(seed)]
    return argv


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    m = None
    try:
        args.seed = resolve_seed(args.seed)
        if getattr(args, "count", 0) is not None and getattr(args, "count", 0) < 0:
            raise ConfigError("--count must be >= 0")
        _out_dir(args.out)
        m = start_manifest(args.out, args.command, _effective_argv(argv, args.seed))
        m.add("seed", args.seed)
        args.func(args, m)
        m.add("status", "ok")
        return 0
    except (ConfigError, ContractError) as exc:
        return _fail(m, exc, 2)
    except (DataError, UndefinedMetricError, CheckpointError, OSError) as exc:
        return _fail(m, exc, 3)
    except NumericError as exc:
        return _fail(m, exc, 4)


def _fail(m: Manifest | None, exc: Exception, code: int) -> int:
    msg = str(exc) if not isinstance(exc, OSError) else f"{exc.filename or ''}: {exc.strerror}"
    print(f"error: {msg}", file=sys.stderr)
    if m is not None:
        try:
            m.add("status", f"error{code}")
        except OSError:
            pass
    return code


def replay(manifest_path, out_dir) -> int:
    """Rerun the command recorded in a manifest into ``out_dir``.

    The recorded input checksums are verified first, so a replay on changed
    data fails instead of silently producing different artifacts.
    """
    entries = dict(Manifest.read(manifest_path))
    if "argv" not in entries:
        raise ConfigError(f"{manifest_path}: no argv recorded")
    argv = shlex.split(entries["argv"])
    for key, value in entries.items():
        if key.startswith("input.") and key.count(".") == 1:
            recs = load_records(value)
            if records_checksum(recs) != entries.get(f"{key}.checksum"):
                raise DataError(f"{value}: records changed since the manifest was written")
    for i, a in enumerate(argv):
        if a == "--out":
            argv[i + 1] = str(out_dir)
        elif a.startswith("--out="):
            argv[i] = f"--out={out_dir}"
    return main(argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
