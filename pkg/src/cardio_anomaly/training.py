"""Training stages, evaluation and run manifests.

Stages
------
``pretrain``         masked cross-restoration on normal records (restoration,
                     trend and attribute losses); the classifier is untouched.
``finetune_frozen``  the pretrained backbone is a fixed feature extractor;
                     only the classifier is trained, with the asymmetric loss.
``joint``            every parameter is trained on restoration + classification.
``scratch``          baseline: same network from random init, classification
                     loss only.

Every run writes into its own directory: ``manifest.txt`` (append-only
key/value lines), ``loss_curve.csv``, ``final.ckpt`` and ``best.ckpt``.
"""
from __future__ import annotations

import csv
import math
import shlex
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import AdamW, Tensor, cosine_lr, load_checkpoint, no_grad, ops, save_checkpoint, state_digest
from .errors import ConfigError, DataError, NumericError
from .io import (
    LabelSchema,
    NormalizationStats,
    class_counts,
    fit_normalization,
    label_matrix,
    records_checksum,
    tier_classes,
)
from .losses import AsymmetricLossConfig, loss_ad, loss_cls, loss_pred, loss_res, loss_trend
from .masking import make_pair, mask_global
from .metrics import MetricReport, UndefinedMetricError, dice_counts, macro_auroc, make_report, stratify
from .model import ModelConfig, RestorationModel
from .scoring import ScoreMap, assemble_many, binarize, localization_threshold, top_decile_enrichment
from .signal import EcgRecord, PreparedRecord, PreprocessConfig, prepare_record
from .synth import parse_kv

STAGES = ("pretrain", "finetune_frozen", "joint", "scratch")
NORMAL_CLASS = "normal"


# -- configuration ---------------------------------------------------------------------

@dataclass(frozen=True)
class MaskConfig:
    enabled: bool = True
    global_ratio: float = 0.3
    local_ratio: float = 0.5
    patch_len: int = 50


@dataclass(frozen=True)
class RunConfig:
    stage: str = "pretrain"
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    val_fraction: float = 0.1
    mixed_pretrain: bool = False
    attr_norm: str = "zscore"
    tiers: tuple[int, int] = (10, 50)
    init_checkpoint: str = ""
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: AsymmetricLossConfig = field(default_factory=AsymmetricLossConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr0 > 0 or self.weight_decay < 0:
            raise ConfigError("lr0 must be positive and weight_decay non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if (self.preprocess.global_len, self.preprocess.beat_len) != (self.model.global_len, self.model.beat_len):
            raise ConfigError("preprocess and model signal lengths differ")
        if self.stage in ("finetune_frozen", "joint") and not self.init_checkpoint:
            raise ConfigError(f"stage {self.stage} needs init_checkpoint")

    # plain key/value form, also used for checkpoint metadata
    def to_kv(self) -> dict[str, str]:
        out = {
            "stage": self.stage,
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "lr0": repr(self.lr0),
            "weight_decay": repr(self.weight_decay),
            "seed": str(self.seed),
            "val_fraction": repr(self.val_fraction),
            "mixed_pretrain": str(self.mixed_pretrain).lower(),
            "attr_norm": self.attr_norm,
            "tiers": f"{self.tiers[0]},{self.tiers[1]}",
            "init_checkpoint": self.init_checkpoint,
        }
        out.update({f"mask.{k}": str(v).lower() if isinstance(v, bool) else str(v) for k, v in asdict(self.mask).items()})
        out.update({k: v.lower() if v in ("True", "False") else v for k, v in self.model.to_kv().items()})
        out["loss.alpha"] = out.pop("model.alpha")
        out["loss.beta"] = out.pop("model.beta")
        out.update({f"loss.{k}": repr(v) for k, v in asdict(self.loss).items()})
        out.update(self.preprocess.to_kv())
        return out

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "RunConfig":
        values = dict(values)
        known_top = {"stage", "epochs", "batch_size", "lr0", "weight_decay", "seed", "val_fraction",
                     "mixed_pretrain", "attr_norm", "tiers", "init_checkpoint"}
        mask_keys = {f"mask.{f.name}" for f in fields(MaskConfig)}
        model_keys = {f"model.{f.name}" for f in fields(ModelConfig)} - {"model.alpha", "model.beta"}
        loss_keys = {"loss.alpha", "loss.beta"} | {f"loss.{f.name}" for f in fields(AsymmetricLossConfig)}
        pre_keys = set(PreprocessConfig().to_kv())
        unknown = set(values) - known_top - mask_keys - model_keys - loss_keys - pre_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw: dict = {}
            for k in ("stage", "attr_norm", "init_checkpoint"):
                if k in values:
                    kw[k] = values[k].strip()
            for k in ("epochs", "batch_size", "seed"):
                if k in values:
                    kw[k] = int(values[k])
            for k in ("lr0", "weight_decay", "val_fraction"):
                if k in values:
                    kw[k] = float(values[k])
            if "mixed_pretrain" in values:
                kw["mixed_pretrain"] = _bool(values["mixed_pretrain"])
            if "tiers" in values:
                lo, hi = (int(x) for x in values["tiers"].split(","))
                kw["tiers"] = (lo, hi)
            mask_kw = {}
            for f in fields(MaskConfig):
                key = f"mask.{f.name}"
                if key in values:
                    default = getattr(MaskConfig, f.name)
                    mask_kw[f.name] = _bool(values[key]) if isinstance(default, bool) else type(default)(values[key])
            kw["mask"] = MaskConfig(**mask_kw)
            model_vals = {k: v for k, v in values.items() if k in model_keys}
            for k in ("alpha", "beta"):
                if f"loss.{k}" in values:
                    model_vals[f"model.{k}"] = values[f"loss.{k}"]
            kw["model"] = ModelConfig.from_kv(model_vals)
            kw["loss"] = AsymmetricLossConfig(**{
                f.name: float(values[f"loss.{f.name}"]) for f in fields(AsymmetricLossConfig)
                if f"loss.{f.name}" in values
            })
            kw["preprocess"] = PreprocessConfig.from_kv(values)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        return replace(cls.from_kv(parse_kv(text)), **overrides) if overrides else cls.from_kv(parse_kv(text))

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{k} = {v}\n" for k, v in self.to_kv().items()))


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# -- manifests ------------------------------------------------------------------------------

class Manifest:
    """Append-only ``key value`` log of one run."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.write_text(f"manifest cardio-anomaly {__version__}\n")

    def add(self, key: str, value) -> None:
        text = str(value)
        if any(c.isspace() for c in key) or "\n" in text:
            raise ConfigError(f"bad manifest entry {key!r}")
        with open(self.path, "a") as fh:
            fh.write(f"{key} {text}\n")

    def add_config(self, cfg: RunConfig) -> None:
        for k, v in cfg.to_kv().items():
            self.add(f"config.{k}", v)

    @staticmethod
    def read(path) -> list[tuple[str, str]]:
        out = []
        for ln in Path(path).read_text().splitlines()[1:]:
            if ln.strip():
                k, _, v = ln.partition(" ")
                out.append((k, v))
        return out

    @staticmethod
    def lookup(path, key: str) -> str | None:
        found = [v for k, v in Manifest.read(path) if k == key]
        return found[-1] if found else None

    @staticmethod
    def config(path) -> dict[str, str]:
        return {k[len("config."):]: v for k, v in Manifest.read(path) if k.startswith("config.")}


def start_manifest(out_dir, command: str, argv: Sequence[str] | None = None) -> Manifest:
    m = Manifest(Path(out_dir) / "manifest.txt")
    m.add("command", command)
    if argv is not None:
        m.add("argv", shlex.join(argv))
    return m


# -- data -------------------------------------------------------------------------------------

@dataclass
class TrainingSet:
    prepared: list[PreparedRecord]
    attrs: np.ndarray  # (N, m) normalized
    present: np.ndarray  # (N, m) 1 = observed
    labels: np.ndarray | None  # (N, n) multi-hot

    def __len__(self) -> int:
        return len(self.prepared)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=int)
        return TrainingSet([self.prepared[i] for i in idx], self.attrs[idx], self.present[idx],
                           None if self.labels is None else self.labels[idx])


def prepare_records(records: Sequence[EcgRecord], cfg: PreprocessConfig) -> list[PreparedRecord]:
    return [prepare_record(r, cfg) for r in records]


def build_set(prepared: Sequence[PreparedRecord], norm: NormalizationStats | None,
              schema: LabelSchema | None = None) -> TrainingSet:
    n = len(prepared)
    if norm is not None and n:
        pairs = [norm.apply(p.attributes) for p in prepared]
        attrs = np.stack([a for a, _ in pairs])
        present = np.stack([b for _, b in pairs])
    else:
        m = len(norm.names) if norm is not None else 0
        attrs, present = np.zeros((n, m)), np.zeros((n, m))
    labels = label_matrix(prepared, schema) if schema is not None else None
    return TrainingSet(list(prepared), attrs, present, labels)


def _is_normal(labels: Sequence[str]) -> bool:
    return all(l == NORMAL_CLASS for l in labels)


def _val_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batch_arrays(ts: TrainingSet, idx: np.ndarray, mask: MaskConfig, rng: np.random.Generator,
                  use_local: bool) -> dict[str, np.ndarray]:
    g_in, l_in, g_clean, l_clean = [], [], [], []
    for i in idx:
        p = ts.prepared[i]
        if use_local:
            pair = make_pair(p.global_signal, p.beats, rng, mask.global_ratio, mask.local_ratio, mask.patch_len)
            g_in.append(pair.global_masked if mask.enabled else pair.global_clean)
            l_in.append(pair.local_masked.values if mask.enabled else pair.local_clean.values)
            l_clean.append(pair.local_clean.values)
        elif mask.enabled:
            g_in.append(mask_global(p.global_signal, mask.global_ratio, mask.patch_len, rng)[0])
        else:
            g_in.append(p.global_signal)
        g_clean.append(p.global_signal)
    out = {
        "g_in": np.stack(g_in),
        "g_clean": np.stack(g_clean),
        "trend": np.stack([ts.prepared[i].trend for i in idx]),
        "attrs": ts.attrs[idx],
        "present": ts.present[idx],
    }
    if use_local:
        out["l_in"], out["l_clean"] = np.stack(l_in), np.stack(l_clean)
    if ts.labels is not None:
        out["labels"] = ts.labels[idx]
    return out


def ad_objective(model: RestorationModel, b: dict[str, np.ndarray], classify: bool = False,
                 cls_cfg: AsymmetricLossConfig | None = None) -> tuple[Tensor, dict[str, float]]:
    """Restoration objective (plus the classification loss when ``classify``)."""
    cfg = model.cfg
    out = model(Tensor(b["g_in"]), Tensor(b["l_in"]) if "l_in" in b else None,
                Tensor(b["trend"]) if cfg.use_trend else None, classify=classify,
                xg_clean=Tensor(b["g_clean"]) if classify else None)
    res = loss_res(b["g_clean"], out["global_recon"], out["sigma_g"],
                   b.get("l_clean"), out["local_recon"], out["sigma_l"])
    zero = Tensor(0.0)
    trend = loss_trend(b["g_clean"], out["trend_recon"]) if cfg.use_trend else zero
    pred = zero
    if cfg.use_attributes and b["attrs"].shape[1]:
        pred = loss_pred(b["attrs"], out["attr_pred"], b["present"])
    total = loss_ad(res, trend, pred, cfg.alpha, cfg.beta)
    parts = {"res": res.item(), "trend": trend.item(), "pred": pred.item()}
    if classify:
        cls = loss_cls(b["labels"], out["class_probs"], cls_cfg or AsymmetricLossConfig())
        total = total + cls
        parts["cls"] = cls.item()
    return total, parts


def cls_objective(model: RestorationModel, feats: np.ndarray | None, b: dict[str, np.ndarray],
                  cls_cfg: AsymmetricLossConfig) -> tuple[Tensor, dict[str, float]]:
    """Classification loss; ``feats`` are cached backbone features (frozen mode) or None."""
    if feats is None:
        g = model.encode_global(Tensor(b["g_clean"]))
        t = model.encode_trend(Tensor(b["trend"])) if model.cfg.use_trend else None
        feats_t = model.diagnostic_features(g, t)
    else:
        feats_t = Tensor(feats)
    loss = loss_cls(b["labels"], model.classify(feats_t), cls_cfg)
    return loss, {"cls": loss.item()}


# -- training loop -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RestorationModel
    norm: NormalizationStats | None
    schema: LabelSchema | None
    curve: list[dict[str, float]]
    out_dir: Path | None = None
    loc_threshold: float | None = None
    extra_meta: dict[str, str] = field(default_factory=dict)

    def meta(self, cfg: RunConfig) -> dict[str, str]:
        meta = {f"config.{k}": v for k, v in cfg.to_kv().items()}
        meta.update(self.model.cfg.to_kv())
        if self.norm is not None:
            meta.update(self.norm.to_kv())
        if self.schema is not None:
            meta["schema"] = ",".join(self.schema.class_names)
        if self.loc_threshold is not None:
            meta["score.loc_threshold"] = repr(self.loc_threshold)
        meta.update(self.extra_meta)
        return meta


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"{what} is not finite ({value})")
    return value


def _run_loop(model: RestorationModel, params, cfg: RunConfig, train: TrainingSet, val: TrainingSet | None,
              objective, use_local: bool, on_epoch=None) -> tuple[list[dict[str, float]], dict | None]:
    """Shared epoch loop; returns the loss curve and the best-val state (or None)."""
    opt = AdamW(params, lr=cfg.lr0, weight_decay=cfg.weight_decay)
    n = len(train)
    if n == 0:
        raise DataError("no training records")
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    curve = []
    best_state, best_val = None, math.inf
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        perm = rng.permutation(n)
        sums: dict[str, float] = {}
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            b = _batch_arrays(train, idx, cfg.mask, rng, use_local)
            lr = cosine_lr(step, total, cfg.lr0)
            loss, parts = objective(b, idx)
            _finite(loss.item(), f"training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr=lr)
            step += 1
            for k, v in {"loss": loss.item(), **parts}.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            seen += len(idx)
        row = {"epoch": float(epoch), "lr": cosine_lr(step, total, cfg.lr0)}
        row.update({f"train_{k}": v / seen for k, v in sums.items()})
        if val is not None and len(val):
            vrng = np.random.default_rng([cfg.seed, 2])
            vsum, vseen = 0.0, 0
            with no_grad():
                for start in range(0, len(val), cfg.batch_size):
                    idx = np.arange(start, min(start + cfg.batch_size, len(val)))
                    vb = _batch_arrays(val, idx, cfg.mask, vrng, use_local)
                    vloss, _ = objective(vb, idx, validation=True)
                    vsum += vloss.item() * len(idx)
                    vseen += len(idx)
            row["val_loss"] = _finite(vsum / vseen, "validation loss")
            if row["val_loss"] < best_val:
                best_val = row["val_loss"]
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
        curve.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return curve, best_state


def write_curve(curve: list[dict[str, float]], path) -> None:
    keys: list[str] = []
    for row in curve:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in curve:
            w.writerow([repr(row[k]) if k in row else "" for k in keys])


def _finish(result: TrainResult, cfg: RunConfig, best_state, out_dir, manifest: Manifest | None) -> TrainResult:
    if out_dir is None:
        return result
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.out_dir = out_dir
    meta = result.meta(cfg)
    meta["manifest"] = "manifest.txt"
    write_curve(result.curve, out_dir / "loss_curve.csv")
    save_checkpoint(out_dir / "final.ckpt", result.model.state_dict(), meta)
    save_checkpoint(out_dir / "best.ckpt", best_state or result.model.state_dict(), meta)
    if manifest is not None:
        manifest.add("curve", "loss_curve.csv")
        manifest.add("checkpoint", "final.ckpt")
        manifest.add("checkpoint_best", "best.ckpt")
        manifest.add("digest.final", state_digest(result.model.state_dict()))
    return result


def _check_labels_for_pretrain(records: Sequence[EcgRecord], mixed: bool) -> None:
    if mixed:
        return
    bad = [r.record_id for r in records if r.labels and not _is_normal(r.labels)]
    if bad:
        raise DataError(
            f"pretraining takes normal records only; {len(bad)} abnormal (e.g. {bad[0]}). "
            "Set mixed_pretrain = true to allow them."
        )


def _segmentable(prepared: Sequence[PreparedRecord], use_local: bool) -> list[PreparedRecord]:
    return [p for p in prepared if p.beats] if use_local else list(prepared)


def pretrain(cfg: RunConfig, records: Sequence[EcgRecord], out_dir=None, manifest: Manifest | None = None,
             on_epoch=None) -> TrainResult:
    """Masked restoration pretraining (no diagnostic labels are used)."""
    _check_labels_for_pretrain(records, cfg.mixed_pretrain)
    prepared = _segmentable(prepare_records(records, cfg.preprocess), cfg.model.use_local)
    # labels play no part from here on
    prepared = [replace(p, labels=()) for p in prepared]
    tr_idx, va_idx = _val_split(len(prepared), cfg.val_fraction, cfg.seed)
    norm = fit_normalization([prepared[i].attributes for i in tr_idx], cfg.attr_norm) if len(tr_idx) >= 2 else None
    ts = build_set(prepared, norm)
    train, val = ts.subset(tr_idx), ts.subset(va_idx)
    model = RestorationModel(replace(cfg.model, seed=cfg.seed))

    def objective(b, idx, validation=False):
        return ad_objective(model, b)

    if manifest is not None:
        manifest.add("data.train_checksum", records_checksum(records))
        manifest.add("data.n_train", len(train))
        manifest.add("data.n_val", len(val))
    curve, best = _run_loop(model, model.backbone_parameters(), cfg, train, val, objective,
                            cfg.model.use_local, on_epoch)
    result = TrainResult(model, norm, None, curve)
    if len(val):
        result.loc_threshold = localization_threshold(assemble_many(val.prepared, model))
    return _finish(result, cfg, best, out_dir, manifest)


# -- checkpoints -> models -------------------------------------------------------------------

@dataclass
class LoadedModel:
    model: RestorationModel
    meta: dict[str, str]
    norm: NormalizationStats | None
    schema: LabelSchema | None
    config: RunConfig

    @property
    def loc_threshold(self) -> float | None:
        v = self.meta.get("score.loc_threshold")
        return float(v) if v else None


def load_model(path) -> LoadedModel:
    state, meta = load_checkpoint(path)
    cfg = RunConfig.from_kv({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    model_cfg = ModelConfig.from_kv({k: v for k, v in meta.items() if k.startswith("model.")})
    model = RestorationModel(model_cfg)
    model.load_state_dict(state)
    norm = NormalizationStats.from_kv(meta) if "norm.names" in meta else None
    schema = LabelSchema(tuple(meta["schema"].split(","))) if meta.get("schema") else None
    return LoadedModel(model, meta, norm, schema, replace(cfg, model=model_cfg))


def _schema_model(base: LoadedModel | None, cfg: RunConfig, schema: LabelSchema) -> RestorationModel:
    if base is None:
        return RestorationModel(replace(cfg.model, n_classes=len(schema), seed=cfg.seed))
    if base.model.cfg.n_classes != len(schema):
        raise ConfigError(f"checkpoint classifier has {base.model.cfg.n_classes} outputs, "
                          f"label schema has {len(schema)} classes")
    return base.model


def _labeled_sets(cfg: RunConfig, records, schema: LabelSchema, norm: NormalizationStats | None, use_local: bool):
    prepared = _segmentable(prepare_records(records, cfg.preprocess), use_local)
    tr_idx, va_idx = _val_split(len(prepared), cfg.val_fraction, cfg.seed)
    ts = build_set(prepared, norm, schema)
    return ts.subset(tr_idx), ts.subset(va_idx)


def finetune_frozen(cfg: RunConfig, checkpoint, records: Sequence[EcgRecord], schema: LabelSchema,
                    out_dir=None, manifest: Manifest | None = None, on_epoch=None) -> TrainResult:
    """Train only the classifier on features from the fixed pretrained backbone."""
    base = load_model(checkpoint)
    if base.schema is not None and base.schema != schema:
        raise ConfigError(f"checkpoint schema {base.schema.class_names} != {schema.class_names}")
    model = _schema_model(base, cfg, schema)
    backbone_before = state_digest({n: p.data for n, p in model.named_parameters() if not n.startswith("classifier.")})
    train, val = _labeled_sets(cfg, records, schema, base.norm, False)

    def features(ts: TrainingSet) -> np.ndarray:
        with no_grad():
            out = []
            for s in range(0, len(ts), 64):
                ps = ts.prepared[s : s + 64]
                g = model.encode_global(Tensor(np.stack([p.global_signal for p in ps])))
                t = model.encode_trend(Tensor(np.stack([p.trend for p in ps]))) if model.cfg.use_trend else None
                out.append(model.diagnostic_features(g, t).data)
            return np.concatenate(out) if out else np.zeros((0,))

    f_train, f_val = features(train), features(val) if len(val) else None
    frozen_mask = replace(cfg.mask, enabled=False)
    run_cfg = replace(cfg, mask=frozen_mask)

    def objective(b, idx, validation=False):
        return cls_objective(model, (f_val if validation else f_train)[idx], b, cfg.loss)

    if manifest is not None:
        manifest.add("data.train_checksum", records_checksum(records))
        manifest.add("schema.checksum", schema.checksum())
        manifest.add("digest.backbone_before", backbone_before)
    curve, best = _run_loop(model, model.head_parameters(), run_cfg, train, val if len(val) else None, objective,
                            False, on_epoch)
    after = state_digest({n: p.data for n, p in model.named_parameters() if not n.startswith("classifier.")})
    if after != backbone_before:
        raise NumericError("backbone changed during frozen fine-tuning")
    if manifest is not None:
        manifest.add("digest.backbone_after", after)
    result = TrainResult(model, base.norm, schema, curve, loc_threshold=base.loc_threshold)
    return _finish(result, cfg, best, out_dir, manifest)


def joint_train(cfg: RunConfig, checkpoint, records: Sequence[EcgRecord], schema: LabelSchema,
                out_dir=None, manifest: Manifest | None = None, on_epoch=None) -> TrainResult:
    """All parameters on restoration + classification losses."""
    base = load_model(checkpoint)
    model = _schema_model(base, cfg, schema)
    use_local = model.cfg.use_local
    train, val = _labeled_sets(cfg, records, schema, base.norm, use_local)

    def objective(b, idx, validation=False):
        return ad_objective(model, b, classify=True, cls_cfg=cfg.loss)

    if manifest is not None:
        manifest.add("data.train_checksum", records_checksum(records))
        manifest.add("schema.checksum", schema.checksum())
    curve, best = _run_loop(model, model.parameters(), cfg, train, val if len(val) else None, objective,
                            use_local, on_epoch)
    result = TrainResult(model, base.norm, schema, curve, loc_threshold=base.loc_threshold)
    return _finish(result, cfg, best, out_dir, manifest)


def train_scratch(cfg: RunConfig, records: Sequence[EcgRecord], schema: LabelSchema, out_dir=None,
                  manifest: Manifest | None = None, on_epoch=None) -> TrainResult:
    """Baseline: the same network from random init, classification loss only."""
    model = _schema_model(None, cfg, schema)
    train, val = _labeled_sets(cfg, records, schema, None, False)
    run_cfg = replace(cfg, mask=replace(cfg.mask, enabled=False))

    def objective(b, idx, validation=False):
        return cls_objective(model, None, b, cfg.loss)

    if manifest is not None:
        manifest.add("data.train_checksum", records_checksum(records))
        manifest.add("schema.checksum", schema.checksum())
    params = [p for n, p in model.named_parameters()
              if n.startswith(("classifier.", "g_enc.", "t_enc."))]
    curve, best = _run_loop(model, params, run_cfg, train, val if len(val) else None, objective, False, on_epoch)
    return _finish(TrainResult(model, None, schema, curve), cfg, best, out_dir, manifest)


def run_stage(cfg: RunConfig, records: Sequence[EcgRecord], schema: LabelSchema | None = None, out_dir=None,
              manifest: Manifest | None = None, on_epoch=None) -> TrainResult:
    if manifest is not None:
        manifest.add_config(cfg)
    if cfg.stage == "pretrain":
        return pretrain(cfg, records, out_dir, manifest, on_epoch)
    if schema is None:
        raise ConfigError(f"stage {cfg.stage} needs a label schema")
    if cfg.stage == "finetune_frozen":
        return finetune_frozen(cfg, cfg.init_checkpoint, records, schema, out_dir, manifest, on_epoch)
    if cfg.stage == "joint":
        return joint_train(cfg, cfg.init_checkpoint, records, schema, out_dir, manifest, on_epoch)
    return train_scratch(cfg, records, schema, out_dir, manifest, on_epoch)


# -- evaluation ------------------------------------------------------------------------------------

@dataclass
class Evaluation:
    detection: MetricReport
    maps: list[ScoreMap]
    strata: list[MetricReport]
    tiers: dict[str, MetricReport] = field(default_factory=dict)
    class_auroc: np.ndarray | None = None
    macro_auroc: float | None = None
    tier_of: dict[str, str] = field(default_factory=dict)
    dice: float | None = None
    enrichment: float | None = None
    loc_threshold: float | None = None

    def reports(self) -> list[tuple[str, MetricReport]]:
        out = [("detection", self.detection)]
        out += [(f"tier={t}", r) for t, r in self.tiers.items()]
        out += [(r.stratum_key or "stratum", r) for r in self.strata]
        return out


def _tier_report(y: np.ndarray, p: np.ndarray, cols: list[int], tier: str) -> MetricReport:
    """Macro AUROC over the tier's classes; the other rates pool (record, class) pairs."""
    try:
        auc, _ = macro_auroc(y, p, cols)
    except UndefinedMetricError:
        auc = float("nan")
    rep = make_report(p[:, cols].ravel(), y[:, cols].ravel(), stratum=f"tier={tier}")
    return replace(rep, auroc=auc)


def evaluate(loaded: LoadedModel, records: Sequence[EcgRecord], tier_counts: dict[str, int] | None = None,
             loc_threshold: float | None = None, jobs: int = 1, strata_by: Sequence[str] = ("sex", "age"),
             classes: bool | None = None) -> Evaluation:
    """Detection (anomaly score), localization, optional per-tier classification and strata.

    Records whose labels are all ``normal`` count as negatives for detection.
    ``tier_counts`` (training label counts per class) enables the tiered
    classification reports.
    """
    cfg = loaded.config
    prepared = prepare_records(records, cfg.preprocess)
    with_classes = loaded.schema is not None if classes is None else classes
    maps = assemble_many(prepared, loaded.model, jobs, with_classes)
    scores = np.array([m.anomaly_score for m in maps])
    y = np.array([0 if _is_normal(r.labels) else 1 for r in records])
    thr = loc_threshold if loc_threshold is not None else loaded.loc_threshold
    dice_value = enrich = None
    masked = [(m, p) for m, p, yy in zip(maps, prepared, y) if yy and p.anomaly_mask is not None
              and p.anomaly_mask.any()]
    if masked and thr is not None:
        num = den = 0
        ratios = []
        for m, p in masked:
            a, b = dice_counts(binarize(m, thr), p.anomaly_mask)
            num, den = num + a, den + b
            ratios.append(top_decile_enrichment(m.values, p.anomaly_mask))
        dice_value = num / den if den else 1.0
        enrich = float(np.mean(ratios))
    detection = make_report(scores, y, dice_value=dice_value, stratum="all")
    strata = []
    for by in strata_by:
        strata += stratify([r.attributes for r in records], scores, y, by)
    ev = Evaluation(detection, maps, strata, dice=dice_value, enrichment=enrich, loc_threshold=thr)
    if with_classes and loaded.schema is not None:
        schema = loaded.schema
        Y = label_matrix(records, schema)
        P = np.stack([m.class_probs for m in maps])
        ev.macro_auroc, ev.class_auroc = macro_auroc(Y, P)
        if tier_counts is not None:
            ev.tier_of = tier_classes(tier_counts, cfg.tiers)
            for tier in ("common", "uncommon", "rare"):
                cols = [schema.index[c] for c, t in ev.tier_of.items() if t == tier and c in schema.index]
                if cols:
                    ev.tiers[tier] = _tier_report(Y, P, cols, tier)
    return ev


def tier_counts_for(records: Sequence[EcgRecord], schema: LabelSchema) -> dict[str, int]:
    return class_counts(records, schema)
